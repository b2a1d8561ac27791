#include "dsu/tokenizer.hpp"

#include "dsu/errors.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <map>
#include <sstream>

namespace dsu {

std::string BpeModel::spelling(std::int64_t token) const {
    std::string out;
    for (std::int64_t u : expand(token)) {
        if (!out.empty()) out.push_back('_');
        out += std::to_string(u);
    }
    return out;
}

std::vector<std::int64_t> BpeModel::expand(std::int64_t token) const {
    if (token < 0 || token >= vocab_size())
        throw DataError("unknown token id " + std::to_string(token));
    if (token < base_vocab_size) return {token};
    const auto& [left, right] = merges[static_cast<std::size_t>(token - base_vocab_size)];
    std::vector<std::int64_t> out = expand(left);
    std::vector<std::int64_t> r = expand(right);
    out.insert(out.end(), r.begin(), r.end());
    return out;
}

UnitSequence dedup(const UnitSequence& s) {
    UnitSequence out;
    out.vocab_size = s.vocab_size;
    out.utterance_id = s.utterance_id;
    out.stream_tag = s.stream_tag;
    for (std::int64_t u : s.units) {
        if (out.units.empty() || out.units.back() != u) out.units.push_back(u);
    }
    return out;
}

namespace {

using Pair = std::pair<std::int64_t, std::int64_t>;

void apply_merge(std::vector<std::int64_t>& seq, const Pair& pair, std::int64_t new_id) {
    std::size_t w = 0;
    for (std::size_t r = 0; r < seq.size();) {
        if (r + 1 < seq.size() && seq[r] == pair.first && seq[r + 1] == pair.second) {
            seq[w++] = new_id;
            r += 2;
        } else {
            seq[w++] = seq[r++];
        }
    }
    seq.resize(w);
}

}  // namespace

BpeModel bpe_train(const std::vector<UnitSequence>& corpus, std::int64_t target_vocab_size) {
    if (corpus.empty()) throw DataError("bpe_train: empty corpus");
    const std::int64_t base = corpus.front().vocab_size;
    if (base < 1) throw DataError("bpe_train: corpus vocab_size must be >= 1");
    if (target_vocab_size < base)
        throw ConfigError("bpe_train: target vocab below base vocab");

    std::vector<std::vector<std::int64_t>> work;
    work.reserve(corpus.size());
    for (const auto& s : corpus) {
        if (s.vocab_size != base)
            throw DataError("bpe_train: mixed vocab sizes in corpus");
        for (std::int64_t u : s.units)
            if (u < 0 || u >= base) throw DataError("bpe_train: unit out of range");
        work.push_back(s.units);
    }

    BpeModel m;
    m.base_vocab_size = base;
    m.target_vocab_size = target_vocab_size;
    while (m.vocab_size() < target_vocab_size) {
        std::map<Pair, std::int64_t> counts;  // ordered: ties resolve to smallest pair
        for (const auto& seq : work)
            for (std::size_t i = 0; i + 1 < seq.size(); ++i)
                ++counts[{seq[i], seq[i + 1]}];

        Pair best{};
        std::int64_t best_count = 0;
        for (const auto& [pair, count] : counts) {
            if (count > best_count) {
                best_count = count;
                best = pair;
            }
        }
        if (best_count < 2) break;  // merging singletons cannot compress

        const std::int64_t new_id = m.vocab_size();
        m.merges.push_back(best);
        for (auto& seq : work) apply_merge(seq, best, new_id);
    }
    return m;
}

TokenSequence bpe_encode(const BpeModel& m, const UnitSequence& s) {
    if (s.vocab_size != m.base_vocab_size)
        throw DataError("bpe_encode: sequence vocab does not match model base vocab");
    for (std::int64_t u : s.units)
        if (u < 0 || u >= m.base_vocab_size) throw DataError("bpe_encode: unit out of range");

    std::vector<std::int64_t> seq = s.units;
    for (std::size_t i = 0; i < m.merges.size(); ++i)
        apply_merge(seq, m.merges[i], m.base_vocab_size + static_cast<std::int64_t>(i));

    TokenSequence out;
    out.tokens = std::move(seq);
    out.model_id = m.model_id;
    out.utterance_id = s.utterance_id;
    return out;
}

UnitSequence bpe_decode(const BpeModel& m, const TokenSequence& t) {
    UnitSequence out;
    out.vocab_size = m.base_vocab_size;
    out.utterance_id = t.utterance_id;
    for (std::int64_t tok : t.tokens) {
        auto units = m.expand(tok);
        out.units.insert(out.units.end(), units.begin(), units.end());
    }
    return out;
}

void save_bpe_model(const BpeModel& m, const std::string& path) {
    nlohmann::json j;
    j["version"] = 1;
    j["base_vocab_size"] = m.base_vocab_size;
    j["target_vocab_size"] = m.target_vocab_size;
    j["merges"] = nlohmann::json::array();
    for (const auto& [l, r] : m.merges) j["merges"].push_back({l, r});
    nlohmann::json vocab = nlohmann::json::object();
    for (std::int64_t t = 0; t < m.vocab_size(); ++t)
        vocab[std::to_string(t)] = m.spelling(t);
    j["vocab"] = std::move(vocab);
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write BPE model: " + path);
    os << j.dump(2) << '\n';
}

BpeModel load_bpe_model(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open BPE model: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad BPE model JSON: ") + e.what());
    }
    if (!j.contains("version") || j["version"].get<int>() != 1)
        throw FormatError("unsupported BPE model version in " + path);
    BpeModel m;
    m.base_vocab_size = j.at("base_vocab_size").get<std::int64_t>();
    m.target_vocab_size = j.at("target_vocab_size").get<std::int64_t>();
    for (const auto& pair : j.at("merges"))
        m.merges.emplace_back(pair.at(0).get<std::int64_t>(), pair.at(1).get<std::int64_t>());
    return m;
}

namespace {

template <typename Seq>
void save_id_sequences(const std::vector<Seq>& seqs,
                       const std::vector<std::int64_t> Seq::* field, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write sequence file: " + path);
    for (const auto& s : seqs) {
        os << s.utterance_id << '\t';
        const auto& ids = s.*field;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i) os << ' ';
            os << ids[i];
        }
        os << '\n';
    }
}

std::vector<std::pair<std::string, std::vector<std::int64_t>>> load_id_lines(
    const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open sequence file: " + path);
    std::vector<std::pair<std::string, std::vector<std::int64_t>>> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw FormatError("sequence line missing tab: " + line);
        std::vector<std::int64_t> ids;
        std::istringstream iss(line.substr(tab + 1));
        std::int64_t v;
        while (iss >> v) ids.push_back(v);
        out.emplace_back(line.substr(0, tab), std::move(ids));
    }
    return out;
}

}  // namespace

void save_unit_sequences(const std::vector<UnitSequence>& seqs, const std::string& path) {
    save_id_sequences(seqs, &UnitSequence::units, path);
}

std::vector<UnitSequence> load_unit_sequences(const std::string& path, std::int64_t vocab_size,
                                              const std::string& stream_tag) {
    std::vector<UnitSequence> out;
    for (auto& [id, ids] : load_id_lines(path)) {
        UnitSequence s;
        s.utterance_id = id;
        s.units = std::move(ids);
        s.vocab_size = vocab_size;
        s.stream_tag = stream_tag;
        for (std::int64_t u : s.units)
            if (u < 0 || u >= vocab_size)
                throw DataError("unit out of range in " + path + " utterance " + id);
        out.push_back(std::move(s));
    }
    return out;
}

void save_token_sequences(const std::vector<TokenSequence>& seqs, const std::string& path) {
    save_id_sequences(seqs, &TokenSequence::tokens, path);
}

std::vector<TokenSequence> load_token_sequences(const std::string& path,
                                                const std::string& model_id) {
    std::vector<TokenSequence> out;
    for (auto& [id, ids] : load_id_lines(path)) {
        TokenSequence s;
        s.utterance_id = id;
        s.tokens = std::move(ids);
        s.model_id = model_id;
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace dsu
