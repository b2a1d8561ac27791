#pragma once

#include "dsu/features.hpp"
#include "dsu/tokenizer_types.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <string>

namespace dsu {

/// K-means codebook over pooled frames. Immutable after fit.
struct Codebook {
    Eigen::MatrixXd centroids;  // K x D
    std::uint64_t seed = 0;
    std::int64_t trained_on_frames = 0;

    std::int64_t k() const { return centroids.rows(); }
    std::int64_t dim() const { return centroids.cols(); }
};

struct KmeansOptions {
    int max_iter = 100;
    double tol = 1e-6;            // max centroid L2 displacement
    double sample_fraction = 1.0; // fraction of frames used for fitting
    bool standardize = false;     // optional per-dimension standardization
};

/// k-means++ init then Lloyd iterations. Deterministic given seed; the
/// sampled frames are sorted lexicographically before fitting so the
/// result is invariant to input frame order at sample_fraction = 1.
/// When inertia_history is non-null it receives the inertia measured at
/// the start of every Lloyd iteration (a non-increasing sequence).
Codebook kmeans_fit(const Eigen::MatrixXd& frames, std::int64_t k, std::uint64_t seed,
                    const KmeansOptions& opts = {},
                    std::vector<double>* inertia_history = nullptr);

/// Nearest-centroid assignment (squared Euclidean, ties to the lowest index).
UnitSequence kmeans_assign(const Codebook& cb, const FeatureMatrix& f);

/// Sum of squared distances from each frame to its nearest centroid.
double inertia(const Codebook& cb, const Eigen::MatrixXd& frames);

// Codebook persistence: JSON header at `path`, centroid matrix in the
// feature-file format in an adjacent file named inside the header.
void save_codebook(const Codebook& cb, const std::string& path);
Codebook load_codebook(const std::string& path);

}  // namespace dsu
