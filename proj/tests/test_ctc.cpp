#include "dsu/model/ctc.hpp"

#include "dsu/errors.hpp"

#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

using namespace dsu;

namespace {

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
    Eigen::MatrixXd p(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const Eigen::ArrayXd e = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
        p.row(i) = (e / e.sum()).matrix().transpose();
    }
    return p;
}

std::vector<std::int64_t> collapse(const std::vector<std::int64_t>& path) {
    std::vector<std::int64_t> out;
    std::int64_t prev = -1;
    for (std::int64_t s : path) {
        if (s != prev && s != 0) out.push_back(s);
        prev = s;
    }
    return out;
}

// independent oracle: enumerate every frame labeling, sum the probability of
// those collapsing to the target
double ctc_oracle(const Eigen::MatrixXd& logits, const std::vector<std::int64_t>& target) {
    const Eigen::MatrixXd p = softmax_rows(logits);
    const Eigen::Index t_len = logits.rows();
    const auto classes = static_cast<std::int64_t>(logits.cols());
    std::vector<std::int64_t> path(static_cast<std::size_t>(t_len), 0);
    double total = 0.0;
    while (true) {
        if (collapse(path) == target) {
            double prob = 1.0;
            for (Eigen::Index t = 0; t < t_len; ++t)
                prob *= p(t, path[static_cast<std::size_t>(t)]);
            total += prob;
        }
        // odometer increment over {0..classes-1}^T
        Eigen::Index pos = 0;
        while (pos < t_len && ++path[static_cast<std::size_t>(pos)] == classes) {
            path[static_cast<std::size_t>(pos)] = 0;
            ++pos;
        }
        if (pos == t_len) break;
    }
    return -std::log(total);
}

Eigen::MatrixXd random_logits(Eigen::Index t, Eigen::Index c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, 1.5);
    Eigen::MatrixXd m(t, c);
    for (Eigen::Index i = 0; i < t; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = d(rng);
    return m;
}

}  // namespace

TEST_CASE("min frames counts adjacent repeats") {
    CHECK(ctc_min_frames({}) == 0);
    CHECK(ctc_min_frames({1}) == 1);
    CHECK(ctc_min_frames({1, 2, 3}) == 3);
    CHECK(ctc_min_frames({1, 1}) == 3);
    CHECK(ctc_min_frames({2, 2, 2}) == 5);
}

TEST_CASE("single frame, single label") {
    Eigen::MatrixXd logits = random_logits(1, 3, 1);
    const Eigen::MatrixXd p = softmax_rows(logits);
    CHECK(ctc_loss(logits, {1}) == doctest::Approx(-std::log(p(0, 1))).epsilon(1e-12));
    CHECK(ctc_loss(logits, {2}) == doctest::Approx(-std::log(p(0, 2))).epsilon(1e-12));
}

TEST_CASE("matches the exhaustive alignment oracle on a sampled grid") {
    std::mt19937_64 rng(42);
    for (Eigen::Index t = 1; t <= 5; ++t) {
        for (std::int64_t labels = 1; labels <= 3; ++labels) {
            const Eigen::Index classes = labels + 1;
            for (int len = 1; len <= 3; ++len) {
                std::vector<std::int64_t> target;
                std::uniform_int_distribution<std::int64_t> pick(1, labels);
                for (int i = 0; i < len; ++i) target.push_back(pick(rng));
                if (t < ctc_min_frames(target)) continue;
                const Eigen::MatrixXd logits =
                    random_logits(t, classes, static_cast<std::uint64_t>(t * 100 + len));
                CHECK(ctc_loss(logits, target) ==
                      doctest::Approx(ctc_oracle(logits, target)).epsilon(1e-9));
            }
        }
    }
}

TEST_CASE("empty target scores all-blank paths") {
    const Eigen::MatrixXd logits = random_logits(4, 3, 7);
    CHECK(ctc_loss(logits, {}) == doctest::Approx(ctc_oracle(logits, {})).epsilon(1e-9));
}

TEST_CASE("infeasible targets throw") {
    const Eigen::MatrixXd logits = random_logits(2, 3, 2);
    CHECK_THROWS_AS(ctc_loss(logits, {1, 2, 1}), DataError);     // too short
    CHECK_THROWS_AS(ctc_loss(logits, {1, 1}), DataError);        // repeat needs 3 frames
    CHECK_THROWS_AS(ctc_loss(logits, {0}), DataError);           // blank not a label
    CHECK_THROWS_AS(ctc_loss(logits, {5}), DataError);           // out of range
}

TEST_CASE("gradient matches finite differences") {
    Eigen::MatrixXd logits = random_logits(6, 4, 9);
    const std::vector<std::int64_t> target = {2, 1, 1};

    Eigen::MatrixXd dlogits;
    ctc_loss(logits, target, &dlogits);

    const double eps = 1e-6;
    for (Eigen::Index i = 0; i < logits.rows(); ++i)
        for (Eigen::Index j = 0; j < logits.cols(); ++j) {
            const double saved = logits(i, j);
            logits(i, j) = saved + eps;
            const double up = ctc_loss(logits, target);
            logits(i, j) = saved - eps;
            const double down = ctc_loss(logits, target);
            logits(i, j) = saved;
            CHECK(dlogits(i, j) ==
                  doctest::Approx((up - down) / (2 * eps)).epsilon(1e-6).scale(1.0));
        }
}

TEST_CASE("loss is invariant to per-frame logit shifts") {
    Eigen::MatrixXd logits = random_logits(5, 4, 11);
    const std::vector<std::int64_t> target = {3, 1};
    const double base = ctc_loss(logits, target);
    logits.col(0).array() += 0.0;  // no-op guard
    Eigen::MatrixXd shifted = logits;
    for (Eigen::Index i = 0; i < shifted.rows(); ++i)
        shifted.row(i).array() += static_cast<double>(i) - 2.0;
    CHECK(ctc_loss(shifted, target) == doctest::Approx(base).epsilon(1e-12));
}
