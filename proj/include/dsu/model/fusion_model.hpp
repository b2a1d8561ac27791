#pragma once

#include "dsu/model/config.hpp"
#include "dsu/model/ops.hpp"
#include "dsu/model/params.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace dsu {

struct StreamInput {
    std::vector<std::int64_t> tokens;
    ops::Mask mask;  // empty means all positions valid

    bool valid_at(std::size_t i) const { return mask.empty() || mask[i] != 0; }
};

struct FusionBatchItem {
    StreamInput primary;
    std::vector<StreamInput> secondaries;  // size must match config
    std::vector<std::int64_t> target;      // char ids in [0, char_vocab)
    std::string utterance_id;
};

using FusionBatch = std::vector<FusionBatchItem>;

struct LossBreakdown {
    double joint = 0.0;
    double ctc = 0.0;
    double attention = 0.0;
};

/// Encoder-decoder ASR model whose encoder layers fuse a primary token
/// stream (self-attention) with secondary streams injected through
/// per-layer adapters + cross-attention, mixed by a learnable gate.
/// With no secondary streams configured this is the plain (non-fusion)
/// encoder sharing the same parameter names for the common weights.
class FusionModel {
  public:
    explicit FusionModel(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    /// Test hook: forces the self-attention mixing weight. Exactly 1.0
    /// skips the cross-attention branch entirely, reducing each layer to
    /// the plain encoder layer bit for bit.
    void set_gate_override(std::optional<double> v);
    std::optional<double> gate_override() const { return gate_override_; }

    /// Current gate value alpha = sigmoid(a) for a layer (single-secondary
    /// configuration).
    double gate_alpha(int layer) const;

    // -- eval-mode building blocks (deterministic, no dropout) --

    /// Embedding lookup -> dimension reduction -> sinusoidal positions.
    /// stream -1 selects the primary table, s >= 0 the s-th secondary.
    Eigen::MatrixXd embed(const std::vector<std::int64_t>& tokens, int stream) const;

    /// Bottleneck adapter of one encoder layer applied to secondary states.
    Eigen::MatrixXd adapter_apply(const Eigen::MatrixXd& e2, int layer, int stream = 0) const;

    /// One fusion encoder layer in eval mode.
    Eigen::MatrixXd fusion_encoder_layer(const Eigen::MatrixXd& e1, const ops::Mask& mask1,
                                         const std::vector<Eigen::MatrixXd>& e2,
                                         const std::vector<ops::Mask>& mask2, int layer) const;

    /// Full encoder (embed both streams, run the layer stack, final norm).
    Eigen::MatrixXd encode(const FusionBatchItem& item) const;

    // -- losses --

    LossBreakdown eval_loss(const FusionBatchItem& item) const;

    /// Mean joint loss over the batch; when accumulate_grads is set the
    /// analytic gradients are added to the parameter store. A non-null
    /// dropout_rng enables dropout (training mode).
    LossBreakdown joint_loss(const FusionBatch& batch, bool accumulate_grads = false,
                             std::mt19937_64* dropout_rng = nullptr);

    /// Teacher-forced decoder cross-entropy given encoder states (eval).
    double attention_loss(const Eigen::MatrixXd& enc, const ops::Mask& enc_mask,
                          const std::vector<std::int64_t>& target) const;

    /// CTC loss of the encoder states against the target characters (eval).
    double ctc_loss_on(const Eigen::MatrixXd& enc, const ops::Mask& enc_mask,
                       const std::vector<std::int64_t>& target) const;

    /// CTC head logits for the (unpadded) encoder states.
    Eigen::MatrixXd ctc_logits(const Eigen::MatrixXd& enc) const;

    /// Next-token decoder logits for a generation prefix (no sos/eos in
    /// `prefix`; returns logits over decoder_vocab at the last position).
    Eigen::RowVectorXd decoder_step_logits(const Eigen::MatrixXd& enc, const ops::Mask& enc_mask,
                                           const std::vector<std::int64_t>& prefix) const;

    void save_checkpoint(const std::string& path) const;
    static FusionModel load_checkpoint(const std::string& path);

  private:
    struct EncCaches;
    struct DecCaches;

    Eigen::MatrixXd embed_impl(const std::vector<std::int64_t>& tokens, const std::string& table,
                               const std::string& reduce, std::int64_t vocab, bool training,
                               std::mt19937_64* rng, ops::LinearCache* reduce_cache,
                               ops::DropoutCache* drop_cache) const;
    void embed_backward(const std::vector<std::int64_t>& tokens, const std::string& table,
                        const ops::LinearCache& reduce_cache, const ops::DropoutCache& drop_cache,
                        const Eigen::MatrixXd& dy);

    Eigen::MatrixXd encoder_layer_forward(int layer, const Eigen::MatrixXd& x,
                                          const ops::Mask& mask1,
                                          const std::vector<Eigen::MatrixXd>& sec,
                                          const std::vector<ops::Mask>& mask2, bool training,
                                          std::mt19937_64* rng, EncCaches* caches) const;
    Eigen::MatrixXd encode_impl(const FusionBatchItem& item, bool training, std::mt19937_64* rng,
                                EncCaches* caches) const;
    /// Returns gradients wrt the secondary embeddings via *dsec.
    Eigen::MatrixXd encode_backward(const FusionBatchItem& item, EncCaches& caches,
                                    const Eigen::MatrixXd& denc);

    Eigen::MatrixXd decoder_forward(const Eigen::MatrixXd& enc, const ops::Mask& enc_mask,
                                    const std::vector<std::int64_t>& dec_input, bool training,
                                    std::mt19937_64* rng, DecCaches* caches) const;
    /// Returns gradient wrt encoder states.
    Eigen::MatrixXd decoder_backward(DecCaches& caches, const Eigen::MatrixXd& dlogits);

    std::string stream_prefix(int stream) const;

    ModelConfig cfg_;
    ParamStore params_;
    std::optional<double> gate_override_;
};

}  // namespace dsu
