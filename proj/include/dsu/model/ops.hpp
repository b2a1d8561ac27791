#pragma once

#include "dsu/model/params.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace dsu::ops {

using Mask = std::vector<std::uint8_t>;  // 1 = valid position, 0 = padding

// ---- linear: y = x W + b, W named prefix+".w" (in x out), b prefix+".b" ----

struct LinearCache {
    Eigen::MatrixXd input;
    std::string prefix;
};

Eigen::MatrixXd linear_forward(const ParamStore& ps, const std::string& prefix,
                               const Eigen::MatrixXd& x, LinearCache* cache = nullptr);
Eigen::MatrixXd linear_backward(ParamStore& ps, const LinearCache& cache,
                                const Eigen::MatrixXd& dy);
void linear_init(ParamStore& ps, const std::string& prefix, Eigen::Index in, Eigen::Index out,
                 std::mt19937_64& rng);

// ---- layer norm over the feature axis, params prefix+".gamma"/".beta" ----

struct LayerNormCache {
    Eigen::MatrixXd x_hat;
    Eigen::VectorXd inv_std;
    std::string prefix;
};

Eigen::MatrixXd layer_norm_forward(const ParamStore& ps, const std::string& prefix,
                                   const Eigen::MatrixXd& x, LayerNormCache* cache = nullptr);
Eigen::MatrixXd layer_norm_backward(ParamStore& ps, const LayerNormCache& cache,
                                    const Eigen::MatrixXd& dy);
void layer_norm_init(ParamStore& ps, const std::string& prefix, Eigen::Index dim);

// ---- exact GELU ----

Eigen::MatrixXd gelu(const Eigen::MatrixXd& x);
Eigen::MatrixXd gelu_backward(const Eigen::MatrixXd& x, const Eigen::MatrixXd& dy);

// ---- multi-head attention ----

struct AttentionCache {
    LinearCache q_cache, k_cache, v_cache, o_cache;
    Eigen::MatrixXd q, k, v;                 // post-projection, Tq x d / Tk x d
    std::vector<Eigen::MatrixXd> weights;    // per head, Tq x Tk softmax rows
    int heads = 0;
};

/// Scaled dot-product multi-head attention. Key positions with mask 0 get
/// zero attention weight; causal additionally hides keys j > i. A query row
/// with no visible key is a degenerate-input error.
Eigen::MatrixXd attention_forward(const ParamStore& ps, const std::string& prefix, int heads,
                                  const Eigen::MatrixXd& q_in, const Eigen::MatrixXd& kv_in,
                                  const Mask& key_mask, bool causal,
                                  AttentionCache* cache = nullptr);
/// Returns d(q_in); d(kv_in) is written to *dkv (K and V branches summed).
Eigen::MatrixXd attention_backward(ParamStore& ps, const AttentionCache& cache,
                                   const Eigen::MatrixXd& dy, Eigen::MatrixXd* dkv);
void attention_init(ParamStore& ps, const std::string& prefix, Eigen::Index dim,
                    std::mt19937_64& rng);

// ---- inverted dropout ----

struct DropoutCache {
    Eigen::ArrayXXd mask;  // already scaled by 1/(1-p)
    bool active = false;
};

Eigen::MatrixXd dropout_forward(const Eigen::MatrixXd& x, double p, bool training,
                                std::mt19937_64& rng, DropoutCache* cache = nullptr);
Eigen::MatrixXd dropout_backward(const DropoutCache& cache, const Eigen::MatrixXd& dy);

// ---- sinusoidal positional encoding, rows = positions ----

Eigen::MatrixXd positional_encoding(Eigen::Index length, Eigen::Index dim);

// ---- log-softmax cross entropy over rows ----

struct SoftmaxXentCache {
    Eigen::MatrixXd probs;
    std::vector<std::int64_t> targets;
};

/// Mean cross entropy of rows of `logits` against `targets`; cache enables
/// the d(logits) backward pass.
double softmax_xent_forward(const Eigen::MatrixXd& logits,
                            const std::vector<std::int64_t>& targets,
                            SoftmaxXentCache* cache = nullptr);
Eigen::MatrixXd softmax_xent_backward(const SoftmaxXentCache& cache, double dloss);

}  // namespace dsu::ops
