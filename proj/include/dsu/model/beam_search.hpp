#pragma once

#include "dsu/model/fusion_model.hpp"

#include <cstdint>
#include <vector>

namespace dsu {

struct BeamHypothesis {
    std::vector<std::int64_t> tokens;  // char ids, no sos/eos
    double score = 0.0;                // length-normalized log probability
    bool ended = false;                // reached the end symbol before the cap
};

struct BeamOptions {
    int beam = 20;
    double length_penalty = 1.0;  // score = logp / len^penalty
    int max_len = 0;              // 0 = model's max_tgt_len
};

/// Attention-decoder beam search over one encoded item. Deterministic:
/// candidate ties break toward the lower token id. Returns up to `beam`
/// finished hypotheses sorted best-first by normalized score.
std::vector<BeamHypothesis> beam_search_item(const FusionModel& model,
                                             const FusionBatchItem& item,
                                             const BeamOptions& opts);

/// Best hypothesis per batch item.
std::vector<BeamHypothesis> beam_search(const FusionModel& model, const FusionBatch& batch,
                                        const BeamOptions& opts);

}  // namespace dsu
