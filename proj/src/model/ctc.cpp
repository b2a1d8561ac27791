#include "dsu/model/ctc.hpp"

#include "dsu/errors.hpp"

#include <cmath>
#include <limits>

namespace dsu {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    const double m = std::max(a, b);
    return m + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace

std::int64_t ctc_min_frames(const std::vector<std::int64_t>& target) {
    std::int64_t repeats = 0;
    for (std::size_t i = 1; i < target.size(); ++i)
        if (target[i] == target[i - 1]) ++repeats;
    return static_cast<std::int64_t>(target.size()) + repeats;
}

double ctc_loss(const Eigen::MatrixXd& logits, const std::vector<std::int64_t>& target,
                Eigen::MatrixXd* dlogits) {
    const Eigen::Index t_len = logits.rows();
    const Eigen::Index classes = logits.cols();
    for (std::int64_t y : target)
        if (y < 1 || y >= classes) throw DataError("ctc: target class out of range");
    if (t_len < ctc_min_frames(target))
        throw DataError("ctc: alignment infeasible, sequence too short for target");

    // log-softmax per frame
    Eigen::MatrixXd lp(t_len, classes);
    Eigen::MatrixXd probs(t_len, classes);
    for (Eigen::Index t = 0; t < t_len; ++t) {
        const double m = logits.row(t).maxCoeff();
        const Eigen::ArrayXd e = (logits.row(t).array() - m).exp();
        const double z = e.sum();
        probs.row(t) = (e / z).matrix().transpose();
        lp.row(t) = (logits.row(t).array() - m - std::log(z)).matrix();
    }

    // extended label sequence: blank, y1, blank, y2, ..., blank
    const Eigen::Index s_len = 2 * static_cast<Eigen::Index>(target.size()) + 1;
    std::vector<std::int64_t> ext(static_cast<std::size_t>(s_len), 0);
    for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];

    Eigen::MatrixXd alpha = Eigen::MatrixXd::Constant(t_len, s_len, kNegInf);
    alpha(0, 0) = lp(0, 0);
    if (s_len > 1) alpha(0, 1) = lp(0, ext[1]);
    for (Eigen::Index t = 1; t < t_len; ++t) {
        for (Eigen::Index s = 0; s < s_len; ++s) {
            double acc = alpha(t - 1, s);
            if (s >= 1) acc = log_add(acc, alpha(t - 1, s - 1));
            if (s >= 2 && ext[static_cast<std::size_t>(s)] != 0 &&
                ext[static_cast<std::size_t>(s)] != ext[static_cast<std::size_t>(s - 2)])
                acc = log_add(acc, alpha(t - 1, s - 2));
            alpha(t, s) = acc + lp(t, ext[static_cast<std::size_t>(s)]);
        }
    }

    double log_p = alpha(t_len - 1, s_len - 1);
    if (s_len > 1) log_p = log_add(log_p, alpha(t_len - 1, s_len - 2));
    if (log_p == kNegInf)
        throw NumericalError("ctc: zero total alignment probability");
    const double loss = -log_p;

    if (dlogits) {
        // beta excludes the emission at t, so alpha + beta sums to log_p
        Eigen::MatrixXd beta = Eigen::MatrixXd::Constant(t_len, s_len, kNegInf);
        beta(t_len - 1, s_len - 1) = 0.0;
        if (s_len > 1) beta(t_len - 1, s_len - 2) = 0.0;
        for (Eigen::Index t = t_len - 2; t >= 0; --t) {
            for (Eigen::Index s = 0; s < s_len; ++s) {
                double acc = beta(t + 1, s) + lp(t + 1, ext[static_cast<std::size_t>(s)]);
                if (s + 1 < s_len)
                    acc = log_add(acc,
                                  beta(t + 1, s + 1) + lp(t + 1, ext[static_cast<std::size_t>(s + 1)]));
                if (s + 2 < s_len && ext[static_cast<std::size_t>(s + 2)] != 0 &&
                    ext[static_cast<std::size_t>(s + 2)] != ext[static_cast<std::size_t>(s)])
                    acc = log_add(acc,
                                  beta(t + 1, s + 2) + lp(t + 1, ext[static_cast<std::size_t>(s + 2)]));
                beta(t, s) = acc;
            }
        }

        dlogits->setZero(t_len, classes);
        for (Eigen::Index t = 0; t < t_len; ++t) {
            Eigen::ArrayXd occupancy = Eigen::ArrayXd::Zero(classes);
            for (Eigen::Index s = 0; s < s_len; ++s) {
                const double g = alpha(t, s) + beta(t, s) - log_p;
                if (g != kNegInf)
                    occupancy(ext[static_cast<std::size_t>(s)]) += std::exp(g);
            }
            dlogits->row(t) = (probs.row(t).array() - occupancy.transpose()).matrix();
        }
    }
    return loss;
}

}  // namespace dsu
