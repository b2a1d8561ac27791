#include "dsu/model/beam_search.hpp"

#include "dsu/errors.hpp"

#include <algorithm>
#include <cmath>

namespace dsu {

namespace {

struct Live {
    std::vector<std::int64_t> tokens;
    double logp = 0.0;
};

Eigen::RowVectorXd log_softmax(const Eigen::RowVectorXd& logits) {
    const double m = logits.maxCoeff();
    const Eigen::ArrayXd e = (logits.array() - m).exp();
    return (logits.array() - m - std::log(e.sum())).matrix();
}

double normalized(double logp, std::size_t len, double penalty) {
    const double l = std::max<std::size_t>(len, 1);
    return logp / std::pow(static_cast<double>(l), penalty);
}

}  // namespace

std::vector<BeamHypothesis> beam_search_item(const FusionModel& model,
                                             const FusionBatchItem& item,
                                             const BeamOptions& opts) {
    if (opts.beam < 1) throw ConfigError("beam size must be >= 1");
    const ModelConfig& cfg = model.config();
    const int max_len = opts.max_len > 0 ? opts.max_len : cfg.max_tgt_len;
    const std::int64_t eos = cfg.eos_id();

    const Eigen::MatrixXd enc = model.encode(item);
    const ops::Mask& enc_mask = item.primary.mask;

    std::vector<Live> live = {Live{}};
    std::vector<BeamHypothesis> finished;

    for (int step = 0; step < max_len && !live.empty(); ++step) {
        // expand every live hypothesis by every decoder symbol
        struct Cand {
            std::size_t parent;
            std::int64_t token;
            double logp;
        };
        std::vector<Cand> cands;
        for (std::size_t h = 0; h < live.size(); ++h) {
            const Eigen::RowVectorXd lp =
                log_softmax(model.decoder_step_logits(enc, enc_mask, live[h].tokens));
            for (Eigen::Index t = 0; t < lp.size(); ++t) {
                if (t == cfg.sos_id()) continue;  // never re-emit the start symbol
                cands.push_back({h, t, live[h].logp + lp(t)});
            }
        }
        // top `beam` by cumulative log probability; ties toward lower token id
        const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(opts.beam),
                                                       cands.size());
        std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep),
                          cands.end(), [](const Cand& a, const Cand& b) {
                              if (a.logp != b.logp) return a.logp > b.logp;
                              if (a.token != b.token) return a.token < b.token;
                              return a.parent < b.parent;
                          });

        std::vector<Live> next;
        for (std::size_t i = 0; i < keep; ++i) {
            const Cand& c = cands[i];
            if (c.token == eos) {
                BeamHypothesis h;
                h.tokens = live[c.parent].tokens;
                h.score = normalized(c.logp, h.tokens.size() + 1, opts.length_penalty);
                h.ended = true;
                finished.push_back(h);
            } else {
                Live nl = live[c.parent];
                nl.tokens.push_back(c.token);
                nl.logp = c.logp;
                next.push_back(std::move(nl));
            }
        }
        live = std::move(next);
        if (finished.size() >= static_cast<std::size_t>(opts.beam) && live.empty()) break;
    }

    // hypotheses that hit the cap compete with their raw prefix score
    for (const Live& l : live) {
        BeamHypothesis h;
        h.tokens = l.tokens;
        h.score = normalized(l.logp, l.tokens.size() + 1, opts.length_penalty);
        h.ended = false;
        finished.push_back(h);
    }

    std::sort(finished.begin(), finished.end(), [](const BeamHypothesis& a,
                                                   const BeamHypothesis& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.tokens < b.tokens;
    });
    if (finished.size() > static_cast<std::size_t>(opts.beam))
        finished.resize(static_cast<std::size_t>(opts.beam));
    return finished;
}

std::vector<BeamHypothesis> beam_search(const FusionModel& model, const FusionBatch& batch,
                                        const BeamOptions& opts) {
    std::vector<BeamHypothesis> out;
    out.reserve(batch.size());
    for (const FusionBatchItem& item : batch) {
        const auto hyps = beam_search_item(model, item, opts);
        out.push_back(hyps.empty() ? BeamHypothesis{} : hyps.front());
    }
    return out;
}

}  // namespace dsu
