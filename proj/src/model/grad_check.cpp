#include "dsu/model/grad_check.hpp"

#include "dsu/errors.hpp"

#include <cmath>
#include <random>

namespace dsu {

namespace {

struct Coord {
    std::string name;
    Eigen::Index i, j;
};

}  // namespace

double grad_check(FusionModel& model, const FusionBatch& batch, const GradCheckOptions& opts) {
    if (opts.epsilon <= 0.0) throw ConfigError("grad_check: epsilon must be positive");

    ParamStore& ps = model.params();
    ps.zero_grad();
    model.joint_loss(batch, /*accumulate_grads=*/true, nullptr);

    std::vector<Coord> coords;
    const auto names = ps.names();
    for (const std::string& name : names) {
        const bool always = name.find(".gate") != std::string::npos ||
                            name.find(".adapter") != std::string::npos;
        if (!always) continue;
        const Eigen::MatrixXd& v = ps.value(name);
        for (Eigen::Index i = 0; i < v.rows(); ++i)
            for (Eigen::Index j = 0; j < v.cols(); ++j) coords.push_back({name, i, j});
    }

    // fill up to sample_size with uniformly sampled coordinates elsewhere
    std::mt19937_64 rng(opts.seed);
    std::uniform_int_distribution<std::size_t> pick_name(0, names.size() - 1);
    while (coords.size() < opts.sample_size) {
        const std::string& name = names[pick_name(rng)];
        const Eigen::MatrixXd& v = ps.value(name);
        std::uniform_int_distribution<Eigen::Index> pi(0, v.rows() - 1), pj(0, v.cols() - 1);
        coords.push_back({name, pi(rng), pj(rng)});
    }

    double max_rel = 0.0;
    for (const Coord& c : coords) {
        const double analytic = ps.grad(c.name)(c.i, c.j);
        if (!std::isfinite(analytic))
            throw NumericalError("grad_check: non-finite analytic gradient in " + c.name);

        double& p = ps.value(c.name)(c.i, c.j);
        const double saved = p;
        p = saved + opts.epsilon;
        const double up = model.joint_loss(batch, false, nullptr).joint;
        p = saved - opts.epsilon;
        const double down = model.joint_loss(batch, false, nullptr).joint;
        p = saved;

        const double numeric = (up - down) / (2.0 * opts.epsilon);
        if (!std::isfinite(numeric))
            throw NumericalError("grad_check: non-finite numerical gradient in " + c.name);
        const double denom = std::max(std::abs(analytic), std::abs(numeric));
        // both sides at the finite-difference noise floor count as agreement
        if (denom < 1e-7) continue;
        max_rel = std::max(max_rel, std::abs(analytic - numeric) / denom);
    }
    return max_rel;
}

}  // namespace dsu
