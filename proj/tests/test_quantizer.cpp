#include <doctest.h>

#include "dsu/errors.hpp"
#include "dsu/quantizer.hpp"

#include <algorithm>
#include <filesystem>
#include <map>
#include <random>

using namespace dsu;

namespace {

Eigen::MatrixXd gauss_blobs(const Eigen::MatrixXd& centers, int per_blob, double std_dev,
                            unsigned seed, std::vector<int>* labels = nullptr) {
    std::mt19937 rng(seed);
    std::normal_distribution<double> g(0.0, std_dev);
    Eigen::MatrixXd out(centers.rows() * per_blob, centers.cols());
    for (Eigen::Index b = 0; b < centers.rows(); ++b) {
        for (int i = 0; i < per_blob; ++i) {
            const Eigen::Index row = b * per_blob + i;
            for (Eigen::Index j = 0; j < centers.cols(); ++j)
                out(row, j) = centers(b, j) + g(rng);
            if (labels) labels->push_back(static_cast<int>(b));
        }
    }
    return out;
}

// Adjusted Rand Index between two labelings.
double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
    REQUIRE(a.size() == b.size());
    std::map<std::pair<int, int>, double> joint;
    std::map<int, double> ca, cb;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ++joint[{a[i], b[i]}];
        ++ca[a[i]];
        ++cb[b[i]];
    }
    auto comb2 = [](double n) { return n * (n - 1.0) / 2.0; };
    double sum_joint = 0, sum_a = 0, sum_b = 0;
    for (auto& [k, v] : joint) sum_joint += comb2(v);
    for (auto& [k, v] : ca) sum_a += comb2(v);
    for (auto& [k, v] : cb) sum_b += comb2(v);
    const double n2 = comb2(static_cast<double>(a.size()));
    const double expected = sum_a * sum_b / n2;
    const double max_index = 0.5 * (sum_a + sum_b);
    return (sum_joint - expected) / (max_index - expected);
}

}  // namespace

TEST_CASE("kmeans: two symmetric separated clusters recovered exactly") {
    Eigen::MatrixXd frames(20, 2);
    for (int i = 0; i < 10; ++i) frames.row(i) << 0, 0;
    for (int i = 10; i < 20; ++i) frames.row(i) << 10, 10;
    const Codebook cb = kmeans_fit(frames, 2, 1);
    std::vector<Eigen::RowVector2d> cents = {cb.centroids.row(0), cb.centroids.row(1)};
    std::sort(cents.begin(), cents.end(),
              [](const auto& x, const auto& y) { return x(0) < y(0); });
    CHECK(cents[0] == Eigen::RowVector2d(0, 0));
    CHECK(cents[1] == Eigen::RowVector2d(10, 10));
}

TEST_CASE("kmeans: k equal to number of distinct points gives zero inertia") {
    Eigen::MatrixXd frames(6, 3);
    frames << 1, 0, 0, 0, 2, 0, 0, 0, 3, 4, 4, 0, 5, 0, 5, 0, 6, 6;
    const Codebook cb = kmeans_fit(frames, 6, 9);
    CHECK(inertia(cb, frames) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("kmeans: four separated gaussian blobs, ARI >= 0.99") {
    Eigen::MatrixXd centers(4, 3);
    centers << 0, 0, 0, 20, 0, 0, 0, 20, 0, 0, 0, 20;
    std::vector<int> truth;
    const Eigen::MatrixXd frames = gauss_blobs(centers, 100, 0.5, 77, &truth);
    const Codebook cb = kmeans_fit(frames, 4, 5);

    FeatureMatrix f;
    f.frames = frames;
    const UnitSequence units = kmeans_assign(cb, f);
    std::vector<int> pred(units.units.begin(), units.units.end());
    CHECK(adjusted_rand_index(truth, pred) >= 0.99);
}

TEST_CASE("kmeans: errors") {
    Eigen::MatrixXd frames = Eigen::MatrixXd::Random(3, 2);
    CHECK_THROWS_AS(kmeans_fit(frames, 0, 1), ConfigError);
    CHECK_THROWS_AS(kmeans_fit(frames, 4, 1), DataError);
    KmeansOptions opts;
    opts.sample_fraction = 0.5;
    CHECK_THROWS_AS(kmeans_fit(frames, 2, 1, opts), DataError);  // N < k after sampling
}

TEST_CASE("kmeans_assign: frame equal to a centroid maps to it") {
    Codebook cb;
    cb.centroids = Eigen::MatrixXd::Random(10, 4);
    FeatureMatrix f;
    f.frames.resize(1, 4);
    f.frames.row(0) = cb.centroids.row(7);
    const UnitSequence s = kmeans_assign(cb, f);
    REQUIRE(s.units.size() == 1);
    CHECK(s.units[0] == 7);
    CHECK(s.vocab_size == 10);
}

TEST_CASE("kmeans_assign: ties break toward the lowest index") {
    Codebook cb;
    cb.centroids.resize(6, 1);
    cb.centroids << 5, 5, -1, 5, 5, 3;  // centroids 2 and 5 equidistant from 1
    FeatureMatrix f;
    f.frames.resize(1, 1);
    f.frames << 1;
    CHECK(kmeans_assign(cb, f).units[0] == 2);
}

TEST_CASE("kmeans_assign: empty input, dimension mismatch") {
    Codebook cb;
    cb.centroids = Eigen::MatrixXd::Random(3, 4);
    FeatureMatrix f;
    f.frames.resize(0, 4);
    CHECK(kmeans_assign(cb, f).units.empty());
    f.frames.resize(2, 5);
    f.frames.setZero();
    CHECK_THROWS_AS(kmeans_assign(cb, f), DimensionError);
}

TEST_CASE("kmeans_assign: reassigning the centroid matrix yields units 0..K") {
    const Eigen::MatrixXd frames = Eigen::MatrixXd::Random(40, 3) * 10.0;
    const Codebook cb = kmeans_fit(frames, 8, 13);
    FeatureMatrix f;
    f.frames = cb.centroids;
    const UnitSequence s = kmeans_assign(cb, f);
    for (std::size_t i = 0; i < s.units.size(); ++i)
        CHECK(s.units[i] == static_cast<std::int64_t>(i));
}

TEST_CASE("inertia: matches brute-force nearest-distance sum") {
    std::mt19937 rng(99);
    std::normal_distribution<double> g;
    Eigen::MatrixXd frames(20, 3);
    for (Eigen::Index i = 0; i < 20; ++i)
        for (Eigen::Index j = 0; j < 3; ++j) frames(i, j) = g(rng);
    Codebook cb;
    cb.centroids = Eigen::MatrixXd::Random(4, 3);

    double brute = 0.0;
    for (Eigen::Index i = 0; i < frames.rows(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (Eigen::Index c = 0; c < 4; ++c)
            best = std::min(best, (frames.row(i) - cb.centroids.row(c)).squaredNorm());
        brute += best;
    }
    CHECK(std::abs(inertia(cb, frames) - brute) < 1e-9);

    // single frame / single centroid definition
    Codebook one;
    one.centroids.resize(1, 3);
    one.centroids << 1, 2, 3;
    Eigen::MatrixXd x(1, 3);
    x << 4, 6, 3;
    CHECK(inertia(one, x) == doctest::Approx(9.0 + 16.0).epsilon(1e-12));

    // frames equal to centroids -> zero
    CHECK(inertia(cb, cb.centroids) == 0.0);
}

TEST_CASE("kmeans: deterministic given (frames, k, seed)") {
    const Eigen::MatrixXd frames = Eigen::MatrixXd::Random(60, 4);
    const Codebook a = kmeans_fit(frames, 5, 21);
    const Codebook b = kmeans_fit(frames, 5, 21);
    CHECK(a.centroids == b.centroids);
}

TEST_CASE("kmeans: permutation of frame order leaves the fit invariant") {
    std::mt19937 rng(4);
    Eigen::MatrixXd centers(3, 2);
    centers << 0, 0, 15, 0, 0, 15;
    Eigen::MatrixXd frames = gauss_blobs(centers, 40, 1.0, 8);

    const Codebook cb1 = kmeans_fit(frames, 3, 2);
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(frames.rows()));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Eigen::MatrixXd shuffled(frames.rows(), frames.cols());
    for (Eigen::Index i = 0; i < frames.rows(); ++i)
        shuffled.row(i) = frames.row(perm[static_cast<std::size_t>(i)]);
    const Codebook cb2 = kmeans_fit(shuffled, 3, 2);

    CHECK(std::abs(inertia(cb1, frames) - inertia(cb2, frames)) < 1e-9);

    auto cluster_sizes = [&](const Codebook& cb) {
        FeatureMatrix f;
        f.frames = frames;
        std::vector<std::int64_t> counts(3, 0);
        for (std::int64_t u : kmeans_assign(cb, f).units) ++counts[static_cast<std::size_t>(u)];
        std::sort(counts.begin(), counts.end());
        return counts;
    };
    CHECK(cluster_sizes(cb1) == cluster_sizes(cb2));
}

TEST_CASE("codebook: save/load round trip") {
    const Eigen::MatrixXd frames = Eigen::MatrixXd::Random(30, 3);
    const Codebook cb = kmeans_fit(frames, 4, 6);
    const auto dir = std::filesystem::temp_directory_path() / "dsu_cb_test";
    std::filesystem::create_directories(dir);
    const auto path = (dir / "cb.json").string();
    save_codebook(cb, path);
    const Codebook loaded = load_codebook(path);
    CHECK(loaded.k() == cb.k());
    CHECK(loaded.seed == cb.seed);
    // disk format is f32, so compare at float precision
    CHECK((loaded.centroids - cb.centroids).cwiseAbs().maxCoeff() < 1e-6);
    std::filesystem::remove_all(dir);
}
