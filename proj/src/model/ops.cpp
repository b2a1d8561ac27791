#include "dsu/model/ops.hpp"

#include "dsu/errors.hpp"

#include <cmath>
#include <limits>

namespace dsu::ops {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double xavier_bound(Eigen::Index in, Eigen::Index out) {
    return std::sqrt(6.0 / static_cast<double>(in + out));
}

void fill_uniform(Eigen::MatrixXd& m, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> d(-bound, bound);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = d(rng);
}

}  // namespace

// ---- linear ----

void linear_init(ParamStore& ps, const std::string& prefix, Eigen::Index in, Eigen::Index out,
                 std::mt19937_64& rng) {
    Eigen::MatrixXd& w = ps.add(prefix + ".w", in, out);
    fill_uniform(w, xavier_bound(in, out), rng);
    ps.add(prefix + ".b", 1, out);
}

Eigen::MatrixXd linear_forward(const ParamStore& ps, const std::string& prefix,
                               const Eigen::MatrixXd& x, LinearCache* cache) {
    const Eigen::MatrixXd& w = ps.value(prefix + ".w");
    const Eigen::MatrixXd& b = ps.value(prefix + ".b");
    if (x.cols() != w.rows())
        throw DimensionError("linear " + prefix + ": input dim mismatch");
    if (cache) {
        cache->input = x;
        cache->prefix = prefix;
    }
    return (x * w).rowwise() + b.row(0);
}

Eigen::MatrixXd linear_backward(ParamStore& ps, const LinearCache& cache,
                                const Eigen::MatrixXd& dy) {
    ps.grad(cache.prefix + ".w").noalias() += cache.input.transpose() * dy;
    ps.grad(cache.prefix + ".b").row(0) += dy.colwise().sum();
    return dy * ps.value(cache.prefix + ".w").transpose();
}

// ---- layer norm ----

void layer_norm_init(ParamStore& ps, const std::string& prefix, Eigen::Index dim) {
    ps.add(prefix + ".gamma", 1, dim).setOnes();
    ps.add(prefix + ".beta", 1, dim);
}

Eigen::MatrixXd layer_norm_forward(const ParamStore& ps, const std::string& prefix,
                                   const Eigen::MatrixXd& x, LayerNormCache* cache) {
    constexpr double eps = 1e-9;
    const Eigen::MatrixXd& gamma = ps.value(prefix + ".gamma");
    const Eigen::MatrixXd& beta = ps.value(prefix + ".beta");
    Eigen::MatrixXd x_hat(x.rows(), x.cols());
    Eigen::VectorXd inv_std(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double mu = x.row(i).mean();
        const double var = (x.row(i).array() - mu).square().mean();
        const double is = 1.0 / std::sqrt(var + eps);
        x_hat.row(i) = (x.row(i).array() - mu) * is;
        inv_std(i) = is;
    }
    if (cache) {
        cache->x_hat = x_hat;
        cache->inv_std = inv_std;
        cache->prefix = prefix;
    }
    return (x_hat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array();
}

Eigen::MatrixXd layer_norm_backward(ParamStore& ps, const LayerNormCache& cache,
                                    const Eigen::MatrixXd& dy) {
    const Eigen::MatrixXd& gamma = ps.value(cache.prefix + ".gamma");
    ps.grad(cache.prefix + ".gamma").row(0) +=
        (dy.array() * cache.x_hat.array()).colwise().sum().matrix();
    ps.grad(cache.prefix + ".beta").row(0) += dy.colwise().sum();

    const double d = static_cast<double>(dy.cols());
    Eigen::MatrixXd dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const Eigen::ArrayXd dxh = dy.row(i).array() * gamma.row(0).array();
        const double sum_dxh = dxh.sum();
        const double sum_dxh_xh = (dxh * cache.x_hat.row(i).transpose().array()).sum();
        dx.row(i) = (cache.inv_std(i) / d) *
                    (d * dxh - sum_dxh - cache.x_hat.row(i).transpose().array() * sum_dxh_xh)
                        .matrix()
                        .transpose();
    }
    return dx;
}

// ---- GELU ----

Eigen::MatrixXd gelu(const Eigen::MatrixXd& x) {
    return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
}

Eigen::MatrixXd gelu_backward(const Eigen::MatrixXd& x, const Eigen::MatrixXd& dy) {
    Eigen::MatrixXd dx = x.unaryExpr([](double v) {
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        return cdf + v * pdf;
    });
    return dx.cwiseProduct(dy);
}

// ---- attention ----

void attention_init(ParamStore& ps, const std::string& prefix, Eigen::Index dim,
                    std::mt19937_64& rng) {
    linear_init(ps, prefix + ".wq", dim, dim, rng);
    linear_init(ps, prefix + ".wk", dim, dim, rng);
    linear_init(ps, prefix + ".wv", dim, dim, rng);
    linear_init(ps, prefix + ".wo", dim, dim, rng);
}

Eigen::MatrixXd attention_forward(const ParamStore& ps, const std::string& prefix, int heads,
                                  const Eigen::MatrixXd& q_in, const Eigen::MatrixXd& kv_in,
                                  const Mask& key_mask, bool causal, AttentionCache* cache) {
    const Eigen::Index d = q_in.cols();
    if (d % heads != 0) throw DimensionError("attention: d_model not divisible by heads");
    if (!key_mask.empty() && static_cast<Eigen::Index>(key_mask.size()) != kv_in.rows())
        throw DimensionError("attention: key mask length mismatch");
    const Eigen::Index dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    AttentionCache local;
    AttentionCache& c = cache ? *cache : local;
    c.heads = heads;
    c.q = linear_forward(ps, prefix + ".wq", q_in, &c.q_cache);
    c.k = linear_forward(ps, prefix + ".wk", kv_in, &c.k_cache);
    c.v = linear_forward(ps, prefix + ".wv", kv_in, &c.v_cache);

    const Eigen::Index tq = q_in.rows(), tk = kv_in.rows();
    Eigen::MatrixXd concat(tq, d);
    c.weights.assign(static_cast<std::size_t>(heads), Eigen::MatrixXd());
    for (int h = 0; h < heads; ++h) {
        const auto qh = c.q.middleCols(h * dh, dh);
        const auto kh = c.k.middleCols(h * dh, dh);
        const auto vh = c.v.middleCols(h * dh, dh);
        Eigen::MatrixXd scores = qh * kh.transpose() * scale;

        constexpr double neg_inf = -std::numeric_limits<double>::infinity();
        if (!key_mask.empty()) {
            for (Eigen::Index j = 0; j < tk; ++j)
                if (!key_mask[static_cast<std::size_t>(j)]) scores.col(j).setConstant(neg_inf);
        }
        if (causal) {
            for (Eigen::Index i = 0; i < tq; ++i)
                for (Eigen::Index j = i + 1; j < tk; ++j) scores(i, j) = neg_inf;
        }

        Eigen::MatrixXd a(tq, tk);
        for (Eigen::Index i = 0; i < tq; ++i) {
            const double m = scores.row(i).maxCoeff();
            if (m == neg_inf)
                throw DataError("attention: query row " + std::to_string(i) +
                                " has no visible key (all-masked input)");
            const Eigen::ArrayXd e = (scores.row(i).array() - m).exp();
            a.row(i) = (e / e.sum()).matrix().transpose();
        }
        c.weights[static_cast<std::size_t>(h)] = a;
        concat.middleCols(h * dh, dh).noalias() = a * vh;
    }
    return linear_forward(ps, prefix + ".wo", concat, &c.o_cache);
}

Eigen::MatrixXd attention_backward(ParamStore& ps, const AttentionCache& c,
                                   const Eigen::MatrixXd& dy, Eigen::MatrixXd* dkv) {
    const Eigen::Index d = c.q.cols();
    const int heads = c.heads;
    const Eigen::Index dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    const Eigen::MatrixXd dconcat = linear_backward(ps, c.o_cache, dy);

    Eigen::MatrixXd dq(c.q.rows(), d), dk(c.k.rows(), d), dv(c.v.rows(), d);
    for (int h = 0; h < heads; ++h) {
        const auto qh = c.q.middleCols(h * dh, dh);
        const auto kh = c.k.middleCols(h * dh, dh);
        const auto vh = c.v.middleCols(h * dh, dh);
        const Eigen::MatrixXd& a = c.weights[static_cast<std::size_t>(h)];
        const auto doh = dconcat.middleCols(h * dh, dh);

        const Eigen::MatrixXd da = doh * vh.transpose();
        dv.middleCols(h * dh, dh).noalias() = a.transpose() * doh;

        // softmax backward; masked keys have a == 0, so ds == 0 there
        Eigen::MatrixXd ds(a.rows(), a.cols());
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            const double dot = a.row(i).dot(da.row(i));
            ds.row(i) = a.row(i).cwiseProduct(da.row(i).array().matrix() -
                                              Eigen::RowVectorXd::Constant(a.cols(), dot));
        }
        dq.middleCols(h * dh, dh).noalias() = ds * kh * scale;
        dk.middleCols(h * dh, dh).noalias() = ds.transpose() * qh * scale;
    }

    const Eigen::MatrixXd dq_in = linear_backward(ps, c.q_cache, dq);
    Eigen::MatrixXd dkv_total = linear_backward(ps, c.k_cache, dk);
    dkv_total += linear_backward(ps, c.v_cache, dv);
    if (dkv) *dkv = std::move(dkv_total);
    return dq_in;
}

// ---- dropout ----

Eigen::MatrixXd dropout_forward(const Eigen::MatrixXd& x, double p, bool training,
                                std::mt19937_64& rng, DropoutCache* cache) {
    if (!training || p <= 0.0) {
        if (cache) cache->active = false;
        return x;
    }
    std::bernoulli_distribution keep(1.0 - p);
    Eigen::ArrayXXd mask(x.rows(), x.cols());
    const double inv_keep = 1.0 / (1.0 - p);
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < x.cols(); ++j) mask(i, j) = keep(rng) ? inv_keep : 0.0;
    if (cache) {
        cache->mask = mask;
        cache->active = true;
    }
    return (x.array() * mask).matrix();
}

Eigen::MatrixXd dropout_backward(const DropoutCache& cache, const Eigen::MatrixXd& dy) {
    if (!cache.active) return dy;
    return (dy.array() * cache.mask).matrix();
}

// ---- positional encoding ----

Eigen::MatrixXd positional_encoding(Eigen::Index length, Eigen::Index dim) {
    Eigen::MatrixXd pe(length, dim);
    for (Eigen::Index pos = 0; pos < length; ++pos) {
        for (Eigen::Index i = 0; i < dim; i += 2) {
            const double angle =
                static_cast<double>(pos) /
                std::pow(10000.0, static_cast<double>(i) / static_cast<double>(dim));
            pe(pos, i) = std::sin(angle);
            if (i + 1 < dim) pe(pos, i + 1) = std::cos(angle);
        }
    }
    return pe;
}

// ---- softmax cross entropy ----

double softmax_xent_forward(const Eigen::MatrixXd& logits,
                            const std::vector<std::int64_t>& targets, SoftmaxXentCache* cache) {
    if (static_cast<Eigen::Index>(targets.size()) != logits.rows())
        throw DimensionError("softmax_xent: target count mismatch");
    if (logits.rows() == 0) throw DataError("softmax_xent: empty batch");

    Eigen::MatrixXd probs(logits.rows(), logits.cols());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const std::int64_t t = targets[static_cast<std::size_t>(i)];
        if (t < 0 || t >= logits.cols()) throw DataError("softmax_xent: target out of range");
        const double m = logits.row(i).maxCoeff();
        const Eigen::ArrayXd e = (logits.row(i).array() - m).exp();
        const double z = e.sum();
        probs.row(i) = (e / z).matrix().transpose();
        loss -= logits(i, t) - m - std::log(z);
    }
    if (cache) {
        cache->probs = probs;
        cache->targets = targets;
    }
    return loss / static_cast<double>(logits.rows());
}

Eigen::MatrixXd softmax_xent_backward(const SoftmaxXentCache& cache, double dloss) {
    Eigen::MatrixXd dlogits = cache.probs;
    const double inv_n = 1.0 / static_cast<double>(dlogits.rows());
    for (Eigen::Index i = 0; i < dlogits.rows(); ++i)
        dlogits(i, cache.targets[static_cast<std::size_t>(i)]) -= 1.0;
    return dlogits * (dloss * inv_n);
}

}  // namespace dsu::ops
