#pragma once

#include "dsu/model/fusion_model.hpp"

#include <cstdint>

namespace dsu {

struct GradCheckOptions {
    double epsilon = 1e-5;
    std::size_t sample_size = 200;  // lower bound; gates and adapters always included
    std::uint64_t seed = 0;
};

/// Central-finite-difference check of the analytic gradients of the joint
/// loss on `batch`. Samples at least `sample_size` scalar parameters
/// (always covering every encoder gate and all adapter weights) and returns
/// the maximum relative error between analytic and numerical gradients.
double grad_check(FusionModel& model, const FusionBatch& batch, const GradCheckOptions& opts);

}  // namespace dsu
