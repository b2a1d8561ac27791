#include "dsu/trainer.hpp"

#include "dsu/errors.hpp"
#include "dsu/metrics.hpp"
#include "dsu/model/ctc.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

namespace dsu {

// ---------------------------------------------------------------- optimizer

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::non_fusion_primary: return "non_fusion_primary";
        case Variant::non_fusion_secondary: return "non_fusion_secondary";
        case Variant::concat_time: return "concat_time";
        case Variant::fusion: return "fusion";
    }
    throw ConfigError("unknown variant");
}

Variant variant_from_string(const std::string& s) {
    if (s == "non_fusion_primary") return Variant::non_fusion_primary;
    if (s == "non_fusion_secondary") return Variant::non_fusion_secondary;
    if (s == "concat_time") return Variant::concat_time;
    if (s == "fusion") return Variant::fusion;
    throw ConfigError("unknown variant: " + s);
}

void TrainConfig::validate() const {
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (warmup_steps < 1 || batch_size < 1 || eval_every < 1)
        throw ConfigError("warmup_steps, batch_size, eval_every must be >= 1");
    if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw ConfigError("Adam betas must lie in [0, 1)");
    if (adam_eps <= 0.0) throw ConfigError("adam_eps must be > 0");
}

bool decay_excluded(const std::string& name) {
    auto ends_with = [&](const char* suffix) {
        const std::size_t n = std::strlen(suffix);
        return name.size() >= n && name.compare(name.size() - n, n, suffix) == 0;
    };
    return ends_with(".gate") || ends_with(".gamma") || ends_with(".beta") || ends_with(".b");
}

void adam_step(ParamStore& params, AdamState& state, const TrainConfig& cfg) {
    // global-norm clipping
    if (cfg.grad_clip > 0.0) {
        const double norm = params.grad_norm();
        if (!std::isfinite(norm)) throw NumericalError("adam_step: non-finite gradient norm");
        if (norm > cfg.grad_clip) {
            const double scale = cfg.grad_clip / norm;
            for (auto& [name, e] : params.entries()) e.grad *= scale;
        }
    }

    state.t += 1;
    const double t = static_cast<double>(state.t);
    const double lr =
        cfg.learning_rate * std::min(t / static_cast<double>(cfg.warmup_steps), 1.0);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);

    for (auto& [name, e] : params.entries()) {
        if (!e.grad.allFinite())
            throw NumericalError("adam_step: non-finite gradient in " + name);
        auto it = state.moments.find(name);
        if (it == state.moments.end()) {
            AdamState::Moments m;
            m.m = Eigen::MatrixXd::Zero(e.value.rows(), e.value.cols());
            m.v = Eigen::MatrixXd::Zero(e.value.rows(), e.value.cols());
            it = state.moments.emplace(name, std::move(m)).first;
        }
        AdamState::Moments& mo = it->second;
        mo.m = cfg.beta1 * mo.m + (1.0 - cfg.beta1) * e.grad;
        mo.v.array() = cfg.beta2 * mo.v.array() + (1.0 - cfg.beta2) * e.grad.array().square();
        if (cfg.weight_decay > 0.0 && !decay_excluded(name))
            e.value *= (1.0 - lr * cfg.weight_decay);
        e.value.array() -=
            lr * (mo.m.array() / bc1) / ((mo.v.array() / bc2).sqrt() + cfg.adam_eps);
    }
}

// ------------------------------------------------------------------- corpus

CharVocab CharVocab::from_texts(const std::vector<std::string>& texts) {
    std::set<char> chars;
    for (const std::string& t : texts) chars.insert(t.begin(), t.end());
    CharVocab v;
    v.alphabet.assign(chars.begin(), chars.end());
    return v;
}

std::vector<std::int64_t> CharVocab::encode(const std::string& text) const {
    std::vector<std::int64_t> ids;
    ids.reserve(text.size());
    for (char c : text) {
        const std::size_t pos = alphabet.find(c);
        if (pos == std::string::npos)
            throw DataError(std::string("character not in vocabulary: '") + c + "'");
        ids.push_back(static_cast<std::int64_t>(pos));
    }
    return ids;
}

std::string CharVocab::decode(const std::vector<std::int64_t>& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (std::int64_t id : ids) {
        if (id < 0 || id >= size()) throw DataError("character id out of vocabulary range");
        out.push_back(alphabet[static_cast<std::size_t>(id)]);
    }
    return out;
}

void save_refs(const std::vector<std::pair<std::string, std::string>>& refs,
               const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + path);
    for (const auto& [id, text] : refs) os << id << '\t' << text << '\n';
    if (!os) throw IoError("short write on " + path);
}

std::vector<std::pair<std::string, std::string>> load_refs(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    std::vector<std::pair<std::string, std::string>> refs;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos) throw FormatError("missing tab in refs file " + path);
        refs.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    }
    return refs;
}

FusionBatchItem make_item(const Utterance& u, Variant v, const CharVocab& vocab, bool swap,
                          std::int64_t primary_vocab, std::int64_t secondary_vocab) {
    const std::vector<std::int64_t>& p = swap ? u.secondary : u.primary;
    const std::vector<std::int64_t>& s = swap ? u.primary : u.secondary;
    const std::int64_t pv = swap ? secondary_vocab : primary_vocab;
    const std::int64_t sv = swap ? primary_vocab : secondary_vocab;

    FusionBatchItem item;
    item.utterance_id = u.id;
    item.target = vocab.encode(u.text);
    switch (v) {
        case Variant::non_fusion_primary:
            item.primary.tokens = p;
            break;
        case Variant::non_fusion_secondary:
            item.primary.tokens = s;
            break;
        case Variant::concat_time: {
            item.primary.tokens = p;
            item.primary.tokens.push_back(pv + sv);  // separator symbol
            for (std::int64_t tok : s) item.primary.tokens.push_back(tok + pv);
            break;
        }
        case Variant::fusion: {
            item.primary.tokens = p;
            StreamInput sec;
            sec.tokens = s;
            item.secondaries.push_back(std::move(sec));
            break;
        }
    }
    return item;
}

ModelConfig variant_model_config(const ModelConfig& base, Variant v,
                                 std::int64_t primary_vocab, std::int64_t secondary_vocab,
                                 std::int64_t char_vocab, bool swap) {
    const std::int64_t pv = swap ? secondary_vocab : primary_vocab;
    const std::int64_t sv = swap ? primary_vocab : secondary_vocab;
    ModelConfig cfg = base;
    cfg.char_vocab = char_vocab;
    cfg.secondary_vocabs.clear();
    switch (v) {
        case Variant::non_fusion_primary: cfg.primary_vocab = pv; break;
        case Variant::non_fusion_secondary: cfg.primary_vocab = sv; break;
        case Variant::concat_time: cfg.primary_vocab = pv + sv + 1; break;
        case Variant::fusion:
            cfg.primary_vocab = pv;
            cfg.secondary_vocabs = {sv};
            break;
    }
    return cfg;
}

// ----------------------------------------------------------------- training

double evaluate_cer(const FusionModel& model, const std::vector<Utterance>& utts,
                    const CharVocab& vocab, Variant v, bool swap, std::int64_t primary_vocab,
                    std::int64_t secondary_vocab, int beam) {
    BeamOptions opts;
    opts.beam = beam;
    std::vector<CerReport> reports;
    reports.reserve(utts.size());
    for (const Utterance& u : utts) {
        const FusionBatchItem item = make_item(u, v, vocab, swap, primary_vocab, secondary_vocab);
        const auto hyps = beam_search_item(model, item, opts);
        const std::string hyp = hyps.empty() ? std::string() : vocab.decode(hyps.front().tokens);
        reports.push_back(cer(hyp, u.text));
    }
    return micro_average_cer(reports);
}

TrainResult train(const ExperimentCorpus& corpus, const CharVocab& vocab,
                  const ModelConfig& base_model, const TrainConfig& cfg, bool swap) {
    cfg.validate();
    if (corpus.train.empty()) throw DataError("train: empty training corpus");

    const ModelConfig mcfg = variant_model_config(base_model, cfg.variant, corpus.primary_vocab,
                                                  corpus.secondary_vocab, vocab.size(), swap);
    FusionModel model(mcfg);

    FusionBatch items;
    items.reserve(corpus.train.size());
    for (const Utterance& u : corpus.train) {
        FusionBatchItem item =
            make_item(u, cfg.variant, vocab, swap, corpus.primary_vocab, corpus.secondary_vocab);
        if (static_cast<std::int64_t>(item.primary.tokens.size()) <
            ctc_min_frames(item.target))
            throw DataError("train: utterance " + u.id +
                            " is too short to align its target under CTC");
        items.push_back(std::move(item));
    }

    TrainResult result{model};
    result.best_dev_cer = std::numeric_limits<double>::infinity();

    auto eval_dev = [&](int step) {
        if (corpus.dev.empty()) return;
        const double dev = evaluate_cer(model, corpus.dev, vocab, cfg.variant, swap,
                                        corpus.primary_vocab, corpus.secondary_vocab, 1);
        result.dev_curve.emplace_back(step, dev);
        if (dev < result.best_dev_cer) {
            result.best_dev_cer = dev;
            result.best_step = step;
            result.model = model;
        }
    };

    if (cfg.max_steps == 0) {
        eval_dev(0);
        return result;
    }

    AdamState adam;
    std::mt19937_64 shuffle_rng(cfg.seed);
    std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    const bool use_dropout = mcfg.dropout > 0.0;

    std::vector<std::size_t> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();  // forces an initial shuffle

    for (int step = 1; step <= cfg.max_steps; ++step) {
        FusionBatch batch;
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor >= order.size()) {
                std::shuffle(order.begin(), order.end(), shuffle_rng);
                cursor = 0;
            }
            batch.push_back(items[order[cursor++]]);
        }
        model.params().zero_grad();
        const LossBreakdown loss =
            model.joint_loss(batch, true, use_dropout ? &dropout_rng : nullptr);
        if (!std::isfinite(loss.joint))
            throw NumericalError("train: loss diverged at step " + std::to_string(step));
        result.loss_curve.push_back(loss.joint);
        adam_step(model.params(), adam, cfg);

        if (step % cfg.eval_every == 0 || step == cfg.max_steps) eval_dev(step);
    }
    if (corpus.dev.empty()) result.model = model;  // no dev set: final params
    return result;
}

// --------------------------------------------------------------- experiment

namespace {

std::int64_t stream_tokens(const std::vector<Utterance>& utts, bool secondary) {
    std::int64_t total = 0;
    for (const Utterance& u : utts)
        total += static_cast<std::int64_t>((secondary ? u.secondary : u.primary).size());
    return total;
}

double variant_bitrate(const ExperimentCorpus& corpus, Variant v) {
    if (corpus.test_seconds <= 0.0) return 0.0;
    const std::int64_t tp = stream_tokens(corpus.test, false);
    const std::int64_t ts = stream_tokens(corpus.test, true);
    std::vector<StreamStats> streams;
    switch (v) {
        case Variant::non_fusion_primary:
            streams = {{tp, corpus.primary_vocab, "primary"}};
            break;
        case Variant::non_fusion_secondary:
            streams = {{ts, corpus.secondary_vocab, "secondary"}};
            break;
        case Variant::concat_time:
            streams = {{tp + ts + static_cast<std::int64_t>(corpus.test.size()),
                        corpus.primary_vocab + corpus.secondary_vocab + 1, "concat"}};
            break;
        case Variant::fusion:
            streams = {{tp, corpus.primary_vocab, "primary"},
                       {ts, corpus.secondary_vocab, "secondary"}};
            break;
    }
    return bitrate(streams, corpus.test_seconds);
}

}  // namespace

ExperimentReport run_experiment(const ExperimentCorpus& corpus, const ExperimentConfig& cfg) {
    std::vector<std::string> texts;
    for (const auto* split : {&corpus.train, &corpus.dev, &corpus.test})
        for (const Utterance& u : *split) texts.push_back(u.text);
    const CharVocab vocab = CharVocab::from_texts(texts);

    ExperimentReport report;
    auto run_one = [&](Variant v, bool swap) {
        TrainConfig tc = cfg.train;
        tc.variant = v;
        const TrainResult res = train(corpus, vocab, cfg.model, tc, swap);
        ExperimentRow row;
        row.name = variant_name(v) + (swap ? "_swapped" : "");
        row.swapped = swap;
        row.test_cer = evaluate_cer(res.model, corpus.test, vocab, v, swap,
                                    corpus.primary_vocab, corpus.secondary_vocab,
                                    cfg.eval_beam);
        row.bitrate = variant_bitrate(corpus, v);
        report.rows.push_back(row);
    };

    for (Variant v : cfg.variants) run_one(v, false);
    if (cfg.order_swap &&
        std::find(cfg.variants.begin(), cfg.variants.end(), Variant::fusion) !=
            cfg.variants.end())
        run_one(Variant::fusion, true);

    // relative differences against the non-fusion primary baseline
    double base_cer = report.rows.empty() ? 0.0 : report.rows.front().test_cer;
    for (const ExperimentRow& r : report.rows)
        if (r.name == variant_name(Variant::non_fusion_primary)) base_cer = r.test_cer;
    for (ExperimentRow& r : report.rows)
        r.cer_diff = base_cer > 0.0 ? cer_diff(r.test_cer, base_cer) : 0.0;
    return report;
}

std::string render_report(const ExperimentReport& report) {
    std::ostringstream os;
    os << "variant                        test_cer   bitrate    cer_diff\n";
    os << "------------------------------ ---------- ---------- ----------\n";
    os.setf(std::ios::fixed);
    for (const ExperimentRow& r : report.rows) {
        os.width(30);
        os.setf(std::ios::left, std::ios::adjustfield);
        os << r.name << ' ';
        os.unsetf(std::ios::adjustfield);
        os.precision(4);
        os.width(10);
        os << r.test_cer << ' ';
        os.precision(2);
        os.width(10);
        os << r.bitrate << ' ';
        os.precision(4);
        os.width(10);
        os << r.cer_diff << '\n';
    }
    return os.str();
}

std::string report_json(const ExperimentReport& report) {
    nlohmann::json rows = nlohmann::json::array();
    for (const ExperimentRow& r : report.rows)
        rows.push_back({{"variant", r.name},
                        {"test_cer", r.test_cer},
                        {"bitrate", r.bitrate},
                        {"cer_diff", r.cer_diff},
                        {"swapped", r.swapped}});
    return nlohmann::json{{"rows", rows}}.dump(2);
}

// ----------------------------------------------------------------- manifest

std::map<std::string, std::string> parse_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open manifest " + path);
    std::map<std::string, std::string> out;
    std::string line, section;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw FormatError("manifest " + path + ": bad section header at line " +
                                  std::to_string(lineno));
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError("manifest " + path + ": expected key = value at line " +
                              std::to_string(lineno));
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw FormatError("manifest " + path + ": empty key at line " +
                              std::to_string(lineno));
        out[section.empty() ? key : section + "." + key] = value;
    }
    return out;
}

}  // namespace dsu
