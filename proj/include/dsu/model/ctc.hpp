#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace dsu {

/// CTC loss: negative log of the summed probability of all blank-augmented
/// frame alignments collapsing to `target`. Blank is class 0; target entries
/// must be in [1, C]. Log-space forward algorithm; when dlogits is non-null
/// the analytic gradient is computed via the forward-backward recursion.
/// Throws DataError when no alignment fits (T < |y| + adjacent repeats).
double ctc_loss(const Eigen::MatrixXd& logits /* T x (C+1) */,
                const std::vector<std::int64_t>& target, Eigen::MatrixXd* dlogits = nullptr);

/// Minimum number of frames required for the target to be feasible.
std::int64_t ctc_min_frames(const std::vector<std::int64_t>& target);

}  // namespace dsu
