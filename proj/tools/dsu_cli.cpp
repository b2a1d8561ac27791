// dsu: discrete speech unit pipeline front-end.
// Subcommands: synth, tokenize, train, experiment, decode, eval.
// Exit codes: 0 success, 2 usage/config, 3 data/format, 4 numerical.

#include "dsu/errors.hpp"
#include "dsu/features.hpp"
#include "dsu/metrics.hpp"
#include "dsu/model/beam_search.hpp"
#include "dsu/model/fusion_model.hpp"
#include "dsu/quantizer.hpp"
#include "dsu/tokenizer.hpp"
#include "dsu/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ------------------------------------------------------------- small utils

/// Writes through a temp file and renames so failed runs leave no partial
/// output behind.
template <class Writer>
void write_atomic(const fs::path& path, Writer&& writer) {
    fs::path tmp = path;
    tmp += ".tmp";
    writer(tmp.string());
    fs::rename(tmp, path);
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    write_atomic(path, [&](const std::string& p) {
        std::ofstream os(p, std::ios::trunc | std::ios::binary);
        if (!os) throw dsu::IoError("cannot write " + p);
        os << text;
        if (!os) throw dsu::IoError("short write on " + p);
    });
}

std::string work_dir_override(const std::string& given) {
    if (!given.empty()) return given;
    if (const char* env = std::getenv("DSU_WORK_DIR")) return env;
    return given;
}

double to_double(const std::string& s, const std::string& key) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw dsu::FormatError("manifest value for " + key + " is not a number: " + s);
    }
}

std::int64_t to_int(const std::string& s, const std::string& key) {
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw dsu::FormatError("manifest value for " + key + " is not an integer: " + s);
    }
}

// ------------------------------------------------------------------- synth

int cmd_synth(const std::string& out_dir, dsu::SynthCorpusSpec spec) {
    if (spec.feature_dim < 2 || spec.feature_dim % 2 != 0)
        throw dsu::ConfigError("--dim must be even and >= 2 (stream split and reshape)");

    const auto utts = dsu::synth_corpus(spec);

    fs::create_directories(fs::path(out_dir) / "a");
    fs::create_directories(fs::path(out_dir) / "b");

    std::vector<dsu::ManifestEntry> manifest_a, manifest_b;
    std::vector<std::pair<std::string, std::string>> refs;
    for (const dsu::SynthUtterance& u : utts) {
        const std::string& id = u.stream_a.utterance_id;
        write_atomic(fs::path(out_dir) / "a" / (id + ".feat"),
                     [&](const std::string& p) { dsu::save_features(u.stream_a, p); });
        write_atomic(fs::path(out_dir) / "b" / (id + ".feat"),
                     [&](const std::string& p) { dsu::save_features(u.stream_b, p); });
        manifest_a.push_back({id, "a/" + id + ".feat", u.transcript});
        manifest_b.push_back({id, "b/" + id + ".feat", u.transcript});
        refs.emplace_back(id, u.transcript);
    }
    write_atomic(fs::path(out_dir) / "manifest_a.tsv",
                 [&](const std::string& p) { dsu::save_manifest(manifest_a, p); });
    write_atomic(fs::path(out_dir) / "manifest_b.tsv",
                 [&](const std::string& p) { dsu::save_manifest(manifest_b, p); });
    write_atomic(fs::path(out_dir) / "refs.tsv",
                 [&](const std::string& p) { dsu::save_refs(refs, p); });
    std::cout << "wrote " << utts.size() << " utterances to " << out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------- tokenize

int cmd_tokenize(const std::string& manifest_path, const std::string& work_dir,
                 const std::string& tag, const std::string& augment,
                 const std::string& codebook_path, bool fit_kmeans, std::int64_t k,
                 std::uint64_t kmeans_seed, double sample_fraction, std::int64_t bpe_size,
                 const std::string& bpe_model_path, bool emit_json) {
    if (!fit_kmeans && codebook_path.empty())
        throw dsu::ConfigError("need --codebook or --fit-kmeans");
    if (work_dir.empty())
        throw dsu::ConfigError("need --workdir or $DSU_WORK_DIR");

    const auto manifest = dsu::load_manifest(manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();

    std::vector<dsu::FeatureMatrix> feats;
    feats.reserve(manifest.size());
    double total_seconds = 0.0;
    for (const dsu::ManifestEntry& e : manifest) {
        dsu::FeatureMatrix f = dsu::load_features((base / e.relative_path).string());
        f.utterance_id = e.utterance_id;
        if (augment == "reshape")
            f = dsu::reshape_split(f);
        else if (augment == "delta")
            f = dsu::delta(f);
        total_seconds += static_cast<double>(f.num_frames()) / f.frame_rate;
        feats.push_back(std::move(f));
    }

    fs::create_directories(work_dir);
    const fs::path wd(work_dir);

    dsu::Codebook cb;
    if (fit_kmeans) {
        std::int64_t total_frames = 0;
        for (const auto& f : feats) total_frames += f.num_frames();
        Eigen::MatrixXd pooled(total_frames, feats.empty() ? 0 : feats.front().dim());
        Eigen::Index row = 0;
        for (const auto& f : feats) {
            pooled.middleRows(row, f.num_frames()) = f.frames;
            row += f.num_frames();
        }
        dsu::KmeansOptions opts;
        opts.sample_fraction = sample_fraction;
        cb = dsu::kmeans_fit(pooled, k, kmeans_seed, opts);
    } else {
        cb = dsu::load_codebook(codebook_path);
    }

    std::vector<dsu::UnitSequence> units, dedup_units;
    for (const auto& f : feats) {
        dsu::UnitSequence u = dsu::kmeans_assign(cb, f);
        u.stream_tag = tag;
        dedup_units.push_back(dsu::dedup(u));
        units.push_back(std::move(u));
    }

    dsu::BpeModel bpe;
    if (!bpe_model_path.empty()) {
        bpe = dsu::load_bpe_model(bpe_model_path);
    } else {
        if (bpe_size <= 0) bpe_size = cb.k();  // no merges by default
        if (bpe_size < cb.k())
            throw dsu::ConfigError("--bpe-size must be >= the k-means vocabulary");
        bpe = dsu::bpe_train(dedup_units, bpe_size);
    }
    std::vector<dsu::TokenSequence> tokens;
    for (const auto& u : dedup_units) tokens.push_back(dsu::bpe_encode(bpe, u));

    if (fit_kmeans)
        dsu::save_codebook(cb, (wd / (tag + ".codebook.json")).string());
    write_atomic(wd / (tag + ".units.tsv"),
                 [&](const std::string& p) { dsu::save_unit_sequences(units, p); });
    write_atomic(wd / (tag + ".dedup.tsv"),
                 [&](const std::string& p) { dsu::save_unit_sequences(dedup_units, p); });
    if (bpe_model_path.empty())
        write_atomic(wd / (tag + ".bpe.json"),
                     [&](const std::string& p) { dsu::save_bpe_model(bpe, p); });
    write_atomic(wd / (tag + ".tokens.tsv"),
                 [&](const std::string& p) { dsu::save_token_sequences(tokens, p); });

    // per-stage length audit + stream stats
    std::vector<std::pair<std::string, std::size_t>> lo, ld, lt;
    std::int64_t total_tokens = 0;
    for (std::size_t i = 0; i < units.size(); ++i) {
        lo.emplace_back(units[i].utterance_id, units[i].units.size());
        ld.emplace_back(dedup_units[i].utterance_id, dedup_units[i].units.size());
        lt.emplace_back(tokens[i].utterance_id, tokens[i].tokens.size());
        total_tokens += static_cast<std::int64_t>(tokens[i].tokens.size());
    }
    const dsu::LengthStats ls = dsu::length_stats(lo, ld, lt);
    const double rate =
        dsu::bitrate({{total_tokens, bpe.vocab_size(), tag}}, total_seconds);

    json stats = {{"tag", tag},
                  {"utterances", units.size()},
                  {"kmeans_k", cb.k()},
                  {"bpe_vocab", bpe.vocab_size()},
                  {"total_tokens", total_tokens},
                  {"total_seconds", total_seconds},
                  {"bitrate_bits_per_s", rate},
                  {"mean_len_original", ls.mean_original},
                  {"mean_len_dedup", ls.mean_dedup},
                  {"mean_len_dedup_bpe", ls.mean_dedup_bpe},
                  {"dedup_reduction_pct", ls.dedup_reduction_pct},
                  {"dedup_bpe_reduction_pct", ls.dedup_bpe_reduction_pct}};
    write_text_atomic(wd / (tag + ".stats.json"), stats.dump(2) + "\n");
    if (emit_json)
        std::cout << stats.dump(2) << "\n";
    else
        std::cout << "tokenized " << units.size() << " utterances; dedup -"
                  << ls.dedup_reduction_pct << "%, dedup+bpe -" << ls.dedup_bpe_reduction_pct
                  << "%, " << rate << " bits/s\n";
    return 0;
}

// ------------------------------------------------------------ corpus loading

std::vector<dsu::Utterance> load_split(const std::map<std::string, std::string>& m,
                                       const fs::path& base, const std::string& split) {
    const auto get = [&](const std::string& key) -> std::optional<std::string> {
        auto it = m.find("corpus." + split + "_" + key);
        if (it == m.end() || it->second.empty()) return std::nullopt;
        return (base / it->second).string();
    };
    const auto primary = get("primary");
    const auto refs_path = get("refs");
    if (!primary || !refs_path) return {};

    const auto p_seqs = dsu::load_token_sequences(*primary);
    std::map<std::string, std::vector<std::int64_t>> secondary;
    if (const auto s = get("secondary"))
        for (const auto& seq : dsu::load_token_sequences(*s)) secondary[seq.utterance_id] = seq.tokens;
    std::map<std::string, std::string> refs;
    for (const auto& [id, text] : dsu::load_refs(*refs_path)) refs[id] = text;

    std::vector<dsu::Utterance> out;
    for (const auto& seq : p_seqs) {
        dsu::Utterance u;
        u.id = seq.utterance_id;
        u.primary = seq.tokens;
        if (!secondary.empty()) {
            auto it = secondary.find(u.id);
            if (it == secondary.end())
                throw dsu::DataError(split + ": no secondary stream for utterance " + u.id);
            u.secondary = it->second;
        }
        auto rt = refs.find(u.id);
        if (rt == refs.end())
            throw dsu::DataError(split + ": no reference text for utterance " + u.id);
        u.text = rt->second;
        out.push_back(std::move(u));
    }
    return out;
}

dsu::ExperimentCorpus load_corpus(const std::map<std::string, std::string>& m,
                                  const fs::path& base) {
    dsu::ExperimentCorpus corpus;
    corpus.train = load_split(m, base, "train");
    corpus.dev = load_split(m, base, "dev");
    corpus.test = load_split(m, base, "test");
    const auto req = [&](const std::string& key) {
        auto it = m.find(key);
        if (it == m.end()) throw dsu::FormatError("manifest is missing " + key);
        return it->second;
    };
    corpus.primary_vocab = to_int(req("corpus.primary_vocab"), "corpus.primary_vocab");
    if (auto it = m.find("corpus.secondary_vocab"); it != m.end())
        corpus.secondary_vocab = to_int(it->second, "corpus.secondary_vocab");
    if (auto it = m.find("corpus.test_seconds"); it != m.end())
        corpus.test_seconds = to_double(it->second, "corpus.test_seconds");
    return corpus;
}

dsu::ModelConfig model_from_manifest(const std::map<std::string, std::string>& m) {
    dsu::ModelConfig cfg;
    const auto geti = [&](const std::string& key, int dflt) {
        auto it = m.find("model." + key);
        return it == m.end() ? dflt : static_cast<int>(to_int(it->second, "model." + key));
    };
    const auto getd = [&](const std::string& key, double dflt) {
        auto it = m.find("model." + key);
        return it == m.end() ? dflt : to_double(it->second, "model." + key);
    };
    cfg.d_emb = geti("d_emb", cfg.d_emb);
    cfg.d_model = geti("d_model", cfg.d_model);
    cfg.encoder_layers = geti("encoder_layers", cfg.encoder_layers);
    cfg.decoder_layers = geti("decoder_layers", cfg.decoder_layers);
    cfg.heads = geti("heads", cfg.heads);
    cfg.ffn_dim = geti("ffn_dim", cfg.ffn_dim);
    cfg.adapter_bottleneck = geti("adapter_bottleneck", cfg.adapter_bottleneck);
    cfg.dropout = getd("dropout", cfg.dropout);
    cfg.ctc_weight = getd("ctc_weight", cfg.ctc_weight);
    cfg.max_src_len = geti("max_src_len", cfg.max_src_len);
    cfg.max_tgt_len = geti("max_tgt_len", cfg.max_tgt_len);
    if (auto it = m.find("model.seed"); it != m.end())
        cfg.seed = static_cast<std::uint64_t>(to_int(it->second, "model.seed"));
    return cfg;
}

dsu::TrainConfig train_from_manifest(const std::map<std::string, std::string>& m) {
    dsu::TrainConfig cfg;
    const auto geti = [&](const std::string& key, int dflt) {
        auto it = m.find("train." + key);
        return it == m.end() ? dflt : static_cast<int>(to_int(it->second, "train." + key));
    };
    const auto getd = [&](const std::string& key, double dflt) {
        auto it = m.find("train." + key);
        return it == m.end() ? dflt : to_double(it->second, "train." + key);
    };
    cfg.learning_rate = getd("learning_rate", cfg.learning_rate);
    cfg.weight_decay = getd("weight_decay", cfg.weight_decay);
    cfg.warmup_steps = geti("warmup_steps", cfg.warmup_steps);
    cfg.max_steps = geti("max_steps", cfg.max_steps);
    cfg.batch_size = geti("batch_size", cfg.batch_size);
    cfg.eval_every = geti("eval_every", cfg.eval_every);
    cfg.grad_clip = getd("grad_clip", cfg.grad_clip);
    if (auto it = m.find("train.seed"); it != m.end())
        cfg.seed = static_cast<std::uint64_t>(to_int(it->second, "train.seed"));
    return cfg;
}

// ------------------------------------------------------------------- train

int cmd_train(const std::string& manifest_path, const std::string& out_path,
              const std::string& variant_str, bool swap, bool emit_json) {
    const auto m = dsu::parse_manifest(manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();
    const dsu::ExperimentCorpus corpus = load_corpus(m, base);
    const dsu::ModelConfig mcfg = model_from_manifest(m);
    dsu::TrainConfig tcfg = train_from_manifest(m);
    tcfg.variant = dsu::variant_from_string(variant_str);

    std::vector<std::string> texts;
    for (const auto* split : {&corpus.train, &corpus.dev, &corpus.test})
        for (const dsu::Utterance& u : *split) texts.push_back(u.text);
    const dsu::CharVocab vocab = dsu::CharVocab::from_texts(texts);

    const dsu::TrainResult res = dsu::train(corpus, vocab, mcfg, tcfg, swap);

    write_atomic(out_path,
                 [&](const std::string& p) { res.model.save_checkpoint(p); });
    const json meta = {{"alphabet", vocab.alphabet},
                       {"variant", variant_str},
                       {"swap", swap},
                       {"primary_vocab", corpus.primary_vocab},
                       {"secondary_vocab", corpus.secondary_vocab}};
    write_text_atomic(out_path + ".meta.json", meta.dump(2) + "\n");

    json summary = {{"steps", res.loss_curve.size()},
                    {"final_loss", res.loss_curve.empty() ? 0.0 : res.loss_curve.back()},
                    {"best_dev_cer", res.best_dev_cer},
                    {"best_step", res.best_step},
                    {"checkpoint", out_path}};
    if (emit_json) {
        summary["loss_curve"] = res.loss_curve;
        json dev = json::array();
        for (const auto& [step, c] : res.dev_curve) dev.push_back({{"step", step}, {"cer", c}});
        summary["dev_curve"] = dev;
        std::cout << summary.dump(2) << "\n";
    } else {
        std::cout << "trained " << variant_str << " for " << res.loss_curve.size()
                  << " steps; best dev CER " << res.best_dev_cer << " at step "
                  << res.best_step << "; saved " << out_path << "\n";
    }
    return 0;
}

// -------------------------------------------------------------- experiment

int cmd_experiment(const std::string& manifest_path, const std::string& out_path,
                   bool emit_json) {
    const auto m = dsu::parse_manifest(manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();
    const dsu::ExperimentCorpus corpus = load_corpus(m, base);

    dsu::ExperimentConfig cfg;
    cfg.model = model_from_manifest(m);
    cfg.train = train_from_manifest(m);
    if (auto it = m.find("experiment.variants"); it != m.end()) {
        cfg.variants.clear();
        std::stringstream ss(it->second);
        std::string name;
        while (std::getline(ss, name, ',')) {
            const auto b = name.find_first_not_of(" \t");
            const auto e = name.find_last_not_of(" \t");
            if (b != std::string::npos)
                cfg.variants.push_back(dsu::variant_from_string(name.substr(b, e - b + 1)));
        }
    }
    if (auto it = m.find("experiment.order_swap"); it != m.end())
        cfg.order_swap = it->second == "true" || it->second == "1";
    if (auto it = m.find("experiment.eval_beam"); it != m.end())
        cfg.eval_beam = static_cast<int>(to_int(it->second, "experiment.eval_beam"));

    const dsu::ExperimentReport report = dsu::run_experiment(corpus, cfg);
    const std::string rendered =
        emit_json ? dsu::report_json(report) + "\n" : dsu::render_report(report);
    std::cout << rendered;
    if (!out_path.empty()) write_text_atomic(out_path, dsu::report_json(report) + "\n");
    return 0;
}

// ------------------------------------------------------------------ decode

int cmd_decode(const std::string& ckpt_path, const std::string& manifest_path,
               const std::string& split, int beam, double length_penalty,
               const std::string& out_path, bool emit_json) {
    std::ifstream meta_is(ckpt_path + ".meta.json");
    if (!meta_is) throw dsu::IoError("cannot open " + ckpt_path + ".meta.json");
    json meta;
    try {
        meta = json::parse(meta_is);
    } catch (const json::exception& e) {
        throw dsu::FormatError(std::string("bad checkpoint metadata: ") + e.what());
    }
    dsu::CharVocab vocab;
    vocab.alphabet = meta.at("alphabet").get<std::string>();
    const dsu::Variant variant = dsu::variant_from_string(meta.at("variant").get<std::string>());
    const bool swap = meta.at("swap").get<bool>();
    const std::int64_t pv = meta.at("primary_vocab").get<std::int64_t>();
    const std::int64_t sv = meta.at("secondary_vocab").get<std::int64_t>();

    const dsu::FusionModel model = dsu::FusionModel::load_checkpoint(ckpt_path);

    const auto m = dsu::parse_manifest(manifest_path);
    const auto utts = load_split(m, fs::path(manifest_path).parent_path(), split);
    if (utts.empty()) throw dsu::DataError("split '" + split + "' is empty or missing");

    dsu::BeamOptions opts;
    opts.beam = beam;
    opts.length_penalty = length_penalty;

    std::vector<std::pair<std::string, std::string>> hyps;
    json rows = json::array();
    for (const dsu::Utterance& u : utts) {
        const auto item = dsu::make_item(u, variant, vocab, swap, pv, sv);
        const auto results = dsu::beam_search_item(model, item, opts);
        const std::string text =
            results.empty() ? std::string() : vocab.decode(results.front().tokens);
        hyps.emplace_back(u.id, text);
        rows.push_back({{"id", u.id},
                        {"hyp", text},
                        {"score", results.empty() ? 0.0 : results.front().score}});
    }
    if (!out_path.empty())
        write_atomic(out_path, [&](const std::string& p) { dsu::save_refs(hyps, p); });
    if (emit_json)
        std::cout << rows.dump(2) << "\n";
    else
        for (const auto& [id, text] : hyps) std::cout << id << '\t' << text << "\n";
    return 0;
}

// -------------------------------------------------------------------- eval

int cmd_eval(const std::string& hyp_path, const std::string& ref_path,
             const std::string& baseline_path, bool do_bitrate, double fps, std::int64_t dims,
             std::int64_t bits, const std::vector<std::string>& streams, double seconds,
             bool emit_json) {
    json out;

    if (do_bitrate) {
        if (!streams.empty()) {
            std::vector<dsu::StreamStats> ss;
            for (const std::string& s : streams) {
                const auto colon = s.find(':');
                if (colon == std::string::npos)
                    throw dsu::ConfigError("--stream expects TOKENS:VOCAB, got " + s);
                ss.push_back({to_int(s.substr(0, colon), "--stream tokens"),
                              to_int(s.substr(colon + 1), "--stream vocab"), ""});
            }
            out["bitrate_bits_per_s"] = dsu::bitrate(ss, seconds);
        } else {
            // continuous baseline: frames/s * dims * bits per value
            out["bitrate_bits_per_s"] = fps * static_cast<double>(dims * bits);
        }
    }

    if (!hyp_path.empty()) {
        if (ref_path.empty()) throw dsu::ConfigError("--hyp requires --ref");
        std::map<std::string, std::string> hyp, base;
        for (const auto& [id, text] : dsu::load_refs(hyp_path)) hyp[id] = text;
        if (!baseline_path.empty())
            for (const auto& [id, text] : dsu::load_refs(baseline_path)) base[id] = text;

        std::vector<dsu::CerReport> reports, base_reports;
        std::map<std::string, double> diffs;
        json utt_rows = json::array();
        for (const auto& [id, ref] : dsu::load_refs(ref_path)) {
            auto it = hyp.find(id);
            if (it == hyp.end()) throw dsu::DataError("no hypothesis for utterance " + id);
            const dsu::CerReport r = dsu::cer(it->second, ref);
            reports.push_back(r);
            json row = {{"id", id},
                        {"cer", r.rate_defined ? json(r.cer) : json()},
                        {"sub", r.substitutions},
                        {"ins", r.insertions},
                        {"del", r.deletions},
                        {"ref_chars", r.ref_chars}};
            if (!baseline_path.empty()) {
                auto bt = base.find(id);
                if (bt == base.end())
                    throw dsu::DataError("no baseline hypothesis for utterance " + id);
                const dsu::CerReport br = dsu::cer(bt->second, ref);
                base_reports.push_back(br);
                if (br.rate_defined && br.cer > 0.0) {
                    diffs[id] = dsu::cer_diff(r.cer, br.cer);
                    row["cer_diff"] = diffs[id];
                }
            }
            utt_rows.push_back(row);
        }
        out["utterances"] = utt_rows;
        out["micro_cer"] = dsu::micro_average_cer(reports);
        if (!baseline_path.empty()) {
            out["baseline_micro_cer"] = dsu::micro_average_cer(base_reports);
            out["micro_cer_diff"] = dsu::cer_diff(out["micro_cer"].get<double>(),
                                                  out["baseline_micro_cer"].get<double>());
            const dsu::BucketCounts buckets = dsu::robustness_buckets(diffs);
            out["buckets"] = {{"decline", buckets.decline},
                              {"comparable", buckets.comparable},
                              {"improved", buckets.improved},
                              {"diff_std", buckets.std_defined ? json(buckets.diff_std) : json()}};
        }
    }

    if (out.empty()) throw dsu::ConfigError("eval: nothing to do (need --hyp or --bitrate)");

    if (emit_json) {
        std::cout << out.dump(2) << "\n";
    } else {
        if (out.contains("bitrate_bits_per_s"))
            std::cout << "bitrate: " << out["bitrate_bits_per_s"].get<double>() << " bits/s\n";
        if (out.contains("micro_cer"))
            std::cout << "micro CER: " << out["micro_cer"].get<double>() << "\n";
        if (out.contains("micro_cer_diff"))
            std::cout << "micro CER diff vs baseline: " << out["micro_cer_diff"].get<double>()
                      << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"discrete speech unit pipeline"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic two-stream corpus");
    std::string synth_out;
    dsu::SynthCorpusSpec spec;
    spec.vocab = "abcdefghijklmnopqrstuvwxy";
    std::int64_t synth_utts = 100;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--utts", synth_utts, "number of utterances");
    synth->add_option("--vocab", spec.vocab, "transcript alphabet");
    synth->add_option("--frames-per-char", spec.frames_per_char, "mean frames per character");
    synth->add_option("--dim", spec.feature_dim, "feature dimension (even)");
    synth->add_option("--noise", spec.noise_std, "feature noise std");
    synth->add_option("--info-split", spec.info_split, "stream A information share [0,1]");
    synth->add_option("--seed", spec.seed, "corpus seed");
    synth->add_option("--frame-rate", spec.frame_rate, "frames per second");
    synth->add_option("--min-chars", spec.min_chars, "min transcript length");
    synth->add_option("--max-chars", spec.max_chars, "max transcript length");

    // tokenize
    auto* tok = app.add_subcommand("tokenize", "features -> units -> dedup -> BPE tokens");
    std::string tok_manifest, tok_workdir, tok_tag = "primary", tok_augment = "none";
    std::string tok_codebook, tok_bpe_model;
    bool tok_fit = false, tok_json = false;
    std::int64_t tok_k = 100, tok_bpe_size = 0;
    std::uint64_t tok_seed = 0;
    double tok_fraction = 1.0;
    tok->add_option("--manifest", tok_manifest, "feature manifest TSV")->required();
    tok->add_option("--workdir", tok_workdir, "output directory (or $DSU_WORK_DIR)");
    tok->add_option("--tag", tok_tag, "stream tag prefix for output files");
    tok->add_option("--augment", tok_augment, "none|reshape|delta")
        ->check(CLI::IsMember({"none", "reshape", "delta"}));
    tok->add_option("--codebook", tok_codebook, "existing codebook JSON");
    tok->add_flag("--fit-kmeans", tok_fit, "fit a new codebook on this corpus");
    tok->add_option("--k", tok_k, "k-means clusters");
    tok->add_option("--kmeans-seed", tok_seed, "k-means seed");
    tok->add_option("--sample-fraction", tok_fraction, "frame sampling fraction for fitting");
    tok->add_option("--bpe-size", tok_bpe_size, "BPE target vocab (0 = no merges)");
    tok->add_option("--bpe-model", tok_bpe_model, "existing BPE model JSON");
    tok->add_flag("--json", tok_json, "machine-readable stats on stdout");

    // train
    auto* tr = app.add_subcommand("train", "train one variant from an experiment manifest");
    std::string tr_manifest, tr_out, tr_variant = "fusion";
    bool tr_swap = false, tr_json = false;
    tr->add_option("--manifest", tr_manifest, "experiment manifest (INI)")->required();
    tr->add_option("--out", tr_out, "checkpoint output path")->required();
    tr->add_option("--variant", tr_variant,
                   "non_fusion_primary|non_fusion_secondary|concat_time|fusion")
        ->check(CLI::IsMember(
            {"non_fusion_primary", "non_fusion_secondary", "concat_time", "fusion"}));
    tr->add_flag("--swap", tr_swap, "swap primary and secondary streams");
    tr->add_flag("--json", tr_json, "JSON summary on stdout");

    // experiment
    auto* ex = app.add_subcommand("experiment", "train all variants and compare");
    std::string ex_manifest, ex_out;
    bool ex_json = false;
    ex->add_option("--manifest", ex_manifest, "experiment manifest (INI)")->required();
    ex->add_option("--out", ex_out, "also write the JSON report here");
    ex->add_flag("--json", ex_json, "JSON report on stdout");

    // decode
    auto* dec = app.add_subcommand("decode", "beam-search decode a split");
    std::string dec_ckpt, dec_manifest, dec_split = "test", dec_out;
    int dec_beam = 20;
    double dec_penalty = 1.0;
    bool dec_json = false;
    dec->add_option("--checkpoint", dec_ckpt, "model checkpoint")->required();
    dec->add_option("--manifest", dec_manifest, "experiment manifest (INI)")->required();
    dec->add_option("--split", dec_split, "train|dev|test")
        ->check(CLI::IsMember({"train", "dev", "test"}));
    dec->add_option("--beam", dec_beam, "beam size")->check(CLI::PositiveNumber);
    dec->add_option("--length-penalty", dec_penalty, "length normalization exponent");
    dec->add_option("--out", dec_out, "hypotheses TSV output");
    dec->add_flag("--json", dec_json, "JSON rows on stdout");

    // eval
    auto* ev = app.add_subcommand("eval", "CER / bitrate reports");
    std::string ev_hyp, ev_ref, ev_baseline;
    bool ev_bitrate = false, ev_json = false;
    double ev_fps = 50.0, ev_seconds = 0.0;
    std::int64_t ev_dims = 1280, ev_bits = 32;
    std::vector<std::string> ev_streams;
    ev->add_option("--hyp", ev_hyp, "hypotheses TSV");
    ev->add_option("--ref", ev_ref, "references TSV");
    ev->add_option("--baseline", ev_baseline, "baseline hypotheses TSV for diffs/buckets");
    ev->add_flag("--bitrate", ev_bitrate, "compute a bitrate");
    ev->add_option("--fps", ev_fps, "continuous baseline: frames per second");
    ev->add_option("--dims", ev_dims, "continuous baseline: dimensions");
    ev->add_option("--bits", ev_bits, "continuous baseline: bits per value");
    ev->add_option("--stream", ev_streams, "discrete stream as TOKENS:VOCAB (repeatable)");
    ev->add_option("--seconds", ev_seconds, "total seconds for discrete bitrate");
    ev->add_flag("--json", ev_json, "JSON report on stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (synth->parsed()) {
            spec.num_utterances = static_cast<std::size_t>(synth_utts);
            return cmd_synth(synth_out, spec);
        }
        if (tok->parsed())
            return cmd_tokenize(tok_manifest, work_dir_override(tok_workdir), tok_tag,
                                tok_augment, tok_codebook, tok_fit, tok_k, tok_seed,
                                tok_fraction, tok_bpe_size, tok_bpe_model, tok_json);
        if (tr->parsed()) return cmd_train(tr_manifest, tr_out, tr_variant, tr_swap, tr_json);
        if (ex->parsed()) return cmd_experiment(ex_manifest, ex_out, ex_json);
        if (dec->parsed())
            return cmd_decode(dec_ckpt, dec_manifest, dec_split, dec_beam, dec_penalty, dec_out,
                              dec_json);
        if (ev->parsed())
            return cmd_eval(ev_hyp, ev_ref, ev_baseline, ev_bitrate, ev_fps, ev_dims, ev_bits,
                            ev_streams, ev_seconds, ev_json);
        std::cerr << "no subcommand\n";
        return 2;
    } catch (const dsu::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const dsu::NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 4;
    } catch (const std::runtime_error& e) {
        // DataError, FormatError, DimensionError, IoError
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
