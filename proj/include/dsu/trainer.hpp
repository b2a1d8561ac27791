#pragma once

#include "dsu/model/beam_search.hpp"
#include "dsu/model/fusion_model.hpp"
#include "dsu/model/params.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dsu {

// ---------------------------------------------------------------- optimizer

enum class Variant { non_fusion_primary, non_fusion_secondary, concat_time, fusion };

std::string variant_name(Variant v);
Variant variant_from_string(const std::string& s);

struct TrainConfig {
    double learning_rate = 5e-4;
    double weight_decay = 1e-6;   // decoupled, weights only
    int warmup_steps = 200;       // linear warmup then constant lr
    int max_steps = 1000;
    int batch_size = 8;
    int eval_every = 100;
    double grad_clip = 5.0;        // global norm; <= 0 disables
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    Variant variant = Variant::fusion;

    void validate() const;
};

struct AdamState {
    struct Moments {
        Eigen::MatrixXd m, v;
    };
    std::map<std::string, Moments> moments;
    std::int64_t t = 0;  // completed steps
};

/// Gates, norm scales/shifts, and biases are excluded from weight decay.
bool decay_excluded(const std::string& name);

/// One Adam update from the gradients accumulated in `params`.
/// Effective lr = lr * min(t / warmup, 1). Throws NumericalError on
/// non-finite gradients.
void adam_step(ParamStore& params, AdamState& state, const TrainConfig& cfg);

// ------------------------------------------------------------------- corpus

/// Byte-level output vocabulary built from reference texts.
struct CharVocab {
    std::string alphabet;  // sorted, unique bytes

    static CharVocab from_texts(const std::vector<std::string>& texts);
    std::int64_t size() const { return static_cast<std::int64_t>(alphabet.size()); }
    std::vector<std::int64_t> encode(const std::string& text) const;  // DataError on unknown
    std::string decode(const std::vector<std::int64_t>& ids) const;
};

/// One tokenized training example: two discrete streams plus the reference.
struct Utterance {
    std::string id;
    std::vector<std::int64_t> primary;
    std::vector<std::int64_t> secondary;
    std::string text;
};

struct ExperimentCorpus {
    std::vector<Utterance> train, dev, test;
    std::int64_t primary_vocab = 0;
    std::int64_t secondary_vocab = 0;
    double test_seconds = 0.0;  // audio duration of the test split, for bitrate
};

/// Reference text file: "utterance_id<TAB>text" per line.
void save_refs(const std::vector<std::pair<std::string, std::string>>& refs,
               const std::string& path);
std::vector<std::pair<std::string, std::string>> load_refs(const std::string& path);

/// Builds the model input for one utterance under a variant. Swap exchanges
/// the roles of the two streams first. The vocab sizes are needed by the
/// concat_time variant (secondary ids are offset past the primary ids, with
/// one separator symbol between the streams).
FusionBatchItem make_item(const Utterance& u, Variant v, const CharVocab& vocab, bool swap,
                          std::int64_t primary_vocab, std::int64_t secondary_vocab);

/// Model config with stream vocabularies set for the variant.
ModelConfig variant_model_config(const ModelConfig& base, Variant v,
                                 std::int64_t primary_vocab, std::int64_t secondary_vocab,
                                 std::int64_t char_vocab, bool swap);

// ----------------------------------------------------------------- training

struct TrainResult {
    FusionModel model;  // best-dev parameters
    std::vector<double> loss_curve;                // joint loss per step
    std::vector<std::pair<int, double>> dev_curve; // (step, micro CER)
    double best_dev_cer = 0.0;
    int best_step = 0;
};

/// Deterministic training loop: seeded shuffling, Adam with warmup, dev CER
/// every eval_every steps, best-dev snapshot returned. Throws DataError when
/// a training item cannot align under CTC, NumericalError on divergence.
TrainResult train(const ExperimentCorpus& corpus, const CharVocab& vocab,
                  const ModelConfig& base_model, const TrainConfig& cfg, bool swap = false);

/// Micro-average CER of beam decodes against the references.
double evaluate_cer(const FusionModel& model, const std::vector<Utterance>& utts,
                    const CharVocab& vocab, Variant v, bool swap, std::int64_t primary_vocab,
                    std::int64_t secondary_vocab, int beam = 1);

// --------------------------------------------------------------- experiment

struct ExperimentConfig {
    ModelConfig model;
    TrainConfig train;
    std::vector<Variant> variants = {Variant::non_fusion_primary, Variant::non_fusion_secondary,
                                     Variant::concat_time, Variant::fusion};
    bool order_swap = true;  // additionally run fusion with streams swapped
    int eval_beam = 1;
};

struct ExperimentRow {
    std::string name;
    double test_cer = 0.0;
    double bitrate = 0.0;
    double cer_diff = 0.0;  // vs the non-fusion primary baseline row
    bool swapped = false;
};

struct ExperimentReport {
    std::vector<ExperimentRow> rows;
};

/// Trains every variant on the shared corpus and reports test CER, bitrate,
/// and relative CER difference against the non-fusion primary baseline
/// (first row when that variant is absent).
ExperimentReport run_experiment(const ExperimentCorpus& corpus, const ExperimentConfig& cfg);

std::string render_report(const ExperimentReport& report);  // plain text table
std::string report_json(const ExperimentReport& report);

// ----------------------------------------------------------------- manifest

/// Flat INI-style manifest: [section] headers, key = value lines, '#'
/// comments. Keys are returned as "section.key".
std::map<std::string, std::string> parse_manifest(const std::string& path);

}  // namespace dsu
