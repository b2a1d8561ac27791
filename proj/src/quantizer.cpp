#include "dsu/quantizer.hpp"

#include "dsu/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cassert>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

namespace dsu {

namespace {

// Nearest centroid index, ties broken toward the lowest index.
std::int64_t nearest_centroid(const Eigen::MatrixXd& centroids, const Eigen::RowVectorXd& x,
                              double* dist_out = nullptr) {
    std::int64_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
        const double d = (centroids.row(c) - x).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    if (dist_out) *dist_out = best_d;
    return best;
}

Eigen::MatrixXd kmeanspp_init(const Eigen::MatrixXd& frames, std::int64_t k,
                              std::mt19937_64& rng) {
    const Eigen::Index n = frames.rows();
    Eigen::MatrixXd centroids(k, frames.cols());
    std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
    centroids.row(0) = frames.row(first(rng));

    Eigen::VectorXd d2(n);
    for (Eigen::Index i = 0; i < n; ++i)
        d2(i) = (frames.row(i) - centroids.row(0)).squaredNorm();

    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (std::int64_t c = 1; c < k; ++c) {
        const double total = d2.sum();
        Eigen::Index pick = 0;
        if (total > 0.0) {
            const double r = unif(rng) * total;
            double acc = 0.0;
            pick = n - 1;
            for (Eigen::Index i = 0; i < n; ++i) {
                acc += d2(i);
                if (acc >= r) {
                    pick = i;
                    break;
                }
            }
        } else {
            // all remaining distances zero: duplicate points, pick uniformly
            pick = first(rng);
        }
        centroids.row(c) = frames.row(pick);
        for (Eigen::Index i = 0; i < n; ++i)
            d2(i) = std::min(d2(i), (frames.row(i) - centroids.row(c)).squaredNorm());
    }
    return centroids;
}

}  // namespace

Codebook kmeans_fit(const Eigen::MatrixXd& frames, std::int64_t k, std::uint64_t seed,
                    const KmeansOptions& opts, std::vector<double>* inertia_history) {
    if (inertia_history) inertia_history->clear();
    if (k < 1) throw ConfigError("kmeans k must be >= 1");
    if (opts.sample_fraction <= 0.0 || opts.sample_fraction > 1.0)
        throw ConfigError("sample_fraction must lie in (0, 1]");
    if (!frames.allFinite()) throw DataError("kmeans input has non-finite frames");

    std::mt19937_64 rng(seed);

    Eigen::MatrixXd data;
    if (opts.sample_fraction < 1.0) {
        const auto n_sample = static_cast<Eigen::Index>(
            static_cast<double>(frames.rows()) * opts.sample_fraction);
        std::vector<Eigen::Index> idx(static_cast<std::size_t>(frames.rows()));
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        data.resize(n_sample, frames.cols());
        for (Eigen::Index i = 0; i < n_sample; ++i)
            data.row(i) = frames.row(idx[static_cast<std::size_t>(i)]);
    } else {
        data = frames;
    }
    if (data.rows() < k) throw DataError("kmeans: fewer frames than clusters after sampling");

    Eigen::RowVectorXd mean, inv_std;
    if (opts.standardize) {
        mean = data.colwise().mean();
        Eigen::RowVectorXd var =
            (data.rowwise() - mean).array().square().colwise().mean();
        inv_std = (var.array() + 1e-12).sqrt().inverse();
        data = (data.rowwise() - mean).array().rowwise() * inv_std.array();
    }

    // Sort rows lexicographically: makes init and centroid sums independent
    // of the caller's frame order.
    {
        std::vector<Eigen::Index> order(static_cast<std::size_t>(data.rows()));
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
            for (Eigen::Index j = 0; j < data.cols(); ++j) {
                if (data(a, j) != data(b, j)) return data(a, j) < data(b, j);
            }
            return false;
        });
        Eigen::MatrixXd sorted(data.rows(), data.cols());
        for (Eigen::Index i = 0; i < data.rows(); ++i)
            sorted.row(i) = data.row(order[static_cast<std::size_t>(i)]);
        data = std::move(sorted);
    }

    Eigen::MatrixXd centroids = kmeanspp_init(data, k, rng);

    const Eigen::Index n = data.rows();
    std::vector<std::int64_t> assign(static_cast<std::size_t>(n));
#ifndef NDEBUG
    double prev_inertia = std::numeric_limits<double>::infinity();
#endif
    for (int iter = 0; iter < opts.max_iter; ++iter) {
        double cur_inertia = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            double d = 0.0;
            assign[static_cast<std::size_t>(i)] = nearest_centroid(centroids, data.row(i), &d);
            cur_inertia += d;
        }
        if (inertia_history) inertia_history->push_back(cur_inertia);
#ifndef NDEBUG
        assert(cur_inertia <= prev_inertia * (1.0 + 1e-12) + 1e-12);
        prev_inertia = cur_inertia;
#endif

        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, data.cols());
        Eigen::VectorXd counts = Eigen::VectorXd::Zero(k);
        for (Eigen::Index i = 0; i < n; ++i) {
            sums.row(assign[static_cast<std::size_t>(i)]) += data.row(i);
            counts(assign[static_cast<std::size_t>(i)]) += 1.0;
        }

        Eigen::MatrixXd next = centroids;
        for (std::int64_t c = 0; c < k; ++c) {
            if (counts(c) > 0.0) next.row(c) = sums.row(c) / counts(c);
        }
        // Empty-cluster repair: move the centroid onto the point farthest
        // from it, excluding points already used for repair this round.
        std::vector<bool> taken(static_cast<std::size_t>(n), false);
        for (std::int64_t c = 0; c < k; ++c) {
            if (counts(c) > 0.0) continue;
            Eigen::Index far = -1;
            double far_d = -1.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                if (taken[static_cast<std::size_t>(i)]) continue;
                const double d = (data.row(i) - centroids.row(c)).squaredNorm();
                if (d > far_d) {
                    far_d = d;
                    far = i;
                }
            }
            if (far >= 0) {
                next.row(c) = data.row(far);
                taken[static_cast<std::size_t>(far)] = true;
            }
        }

        double max_shift = 0.0;
        for (std::int64_t c = 0; c < k; ++c)
            max_shift = std::max(max_shift, (next.row(c) - centroids.row(c)).norm());
        centroids = std::move(next);
        if (max_shift < opts.tol) break;
    }

    if (opts.standardize) {
        // map centroids back to the raw feature space
        centroids = (centroids.array().rowwise() / inv_std.array()).matrix();
        centroids.rowwise() += mean;
    }

    Codebook cb;
    cb.centroids = std::move(centroids);
    cb.seed = seed;
    cb.trained_on_frames = data.rows();
    return cb;
}

UnitSequence kmeans_assign(const Codebook& cb, const FeatureMatrix& f) {
    if (f.dim() != cb.dim())
        throw DimensionError("kmeans_assign: feature dim does not match codebook dim");
    UnitSequence seq;
    seq.vocab_size = cb.k();
    seq.utterance_id = f.utterance_id;
    seq.units.reserve(static_cast<std::size_t>(f.num_frames()));
    for (Eigen::Index t = 0; t < f.num_frames(); ++t)
        seq.units.push_back(nearest_centroid(cb.centroids, f.frames.row(t)));
    return seq;
}

double inertia(const Codebook& cb, const Eigen::MatrixXd& frames) {
    if (frames.cols() != cb.dim() && frames.rows() > 0)
        throw DimensionError("inertia: frame dim does not match codebook dim");
    double total = 0.0;
    for (Eigen::Index i = 0; i < frames.rows(); ++i) {
        double d = 0.0;
        nearest_centroid(cb.centroids, frames.row(i), &d);
        total += d;
    }
    return total;
}

void save_codebook(const Codebook& cb, const std::string& path) {
    namespace fs = std::filesystem;
    const fs::path json_path(path);
    const std::string bin_name = json_path.stem().string() + ".centroids.feat";

    FeatureMatrix m;
    m.frames = cb.centroids;
    m.frame_rate = 1.0;  // placeholder, centroids have no time axis
    m.utterance_id = "centroids";
    save_features(m, (json_path.parent_path() / bin_name).string());

    nlohmann::json j;
    j["version"] = 1;
    j["k"] = cb.k();
    j["d"] = cb.dim();
    j["seed"] = cb.seed;
    j["trained_on_frames"] = cb.trained_on_frames;
    j["centroids_file"] = bin_name;
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write codebook: " + path);
    os << j.dump(2) << '\n';
}

Codebook load_codebook(const std::string& path) {
    namespace fs = std::filesystem;
    std::ifstream is(path);
    if (!is) throw IoError("cannot open codebook: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad codebook JSON: ") + e.what());
    }
    if (!j.contains("version") || j["version"].get<int>() != 1)
        throw FormatError("unsupported codebook version in " + path);
    const fs::path bin_path =
        fs::path(path).parent_path() / j.at("centroids_file").get<std::string>();
    FeatureMatrix m = load_features(bin_path.string());

    Codebook cb;
    cb.centroids = std::move(m.frames);
    cb.seed = j.at("seed").get<std::uint64_t>();
    cb.trained_on_frames = j.at("trained_on_frames").get<std::int64_t>();
    if (cb.k() != j.at("k").get<std::int64_t>() || cb.dim() != j.at("d").get<std::int64_t>())
        throw FormatError("codebook header dims disagree with centroid file: " + path);
    return cb;
}

}  // namespace dsu
