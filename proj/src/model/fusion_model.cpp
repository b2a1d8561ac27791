#include "dsu/model/fusion_model.hpp"

#include "dsu/errors.hpp"
#include "dsu/model/ctc.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>

namespace dsu {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void fill_normal(Eigen::MatrixXd& m, double std_dev, std::mt19937_64& rng) {
    std::normal_distribution<double> d(0.0, std_dev);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = d(rng);
}

nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"d_emb", c.d_emb},
            {"d_model", c.d_model},
            {"encoder_layers", c.encoder_layers},
            {"decoder_layers", c.decoder_layers},
            {"heads", c.heads},
            {"ffn_dim", c.ffn_dim},
            {"adapter_bottleneck", c.adapter_bottleneck},
            {"dropout", c.dropout},
            {"ctc_weight", c.ctc_weight},
            {"primary_vocab", c.primary_vocab},
            {"secondary_vocabs", c.secondary_vocabs},
            {"char_vocab", c.char_vocab},
            {"max_src_len", c.max_src_len},
            {"max_tgt_len", c.max_tgt_len},
            {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d_emb = j.at("d_emb").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.encoder_layers = j.at("encoder_layers").get<int>();
    c.decoder_layers = j.at("decoder_layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.adapter_bottleneck = j.at("adapter_bottleneck").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.ctc_weight = j.at("ctc_weight").get<double>();
    c.primary_vocab = j.at("primary_vocab").get<std::int64_t>();
    c.secondary_vocabs = j.at("secondary_vocabs").get<std::vector<std::int64_t>>();
    c.char_vocab = j.at("char_vocab").get<std::int64_t>();
    c.max_src_len = j.at("max_src_len").get<int>();
    c.max_tgt_len = j.at("max_tgt_len").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

}  // namespace

void ModelConfig::validate() const {
    if (d_emb < 1 || d_model < 1 || ffn_dim < 1 || adapter_bottleneck < 1)
        throw ConfigError("model dims must be >= 1");
    if (encoder_layers < 0 || decoder_layers < 1)
        throw ConfigError("encoder layers must be >= 0 and decoder layers >= 1");
    if (heads < 1 || d_model % heads != 0)
        throw ConfigError("d_model must be divisible by heads");
    if (ctc_weight < 0.0 || ctc_weight > 1.0) throw ConfigError("ctc_weight must lie in [0, 1]");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    if (primary_vocab < 1 || char_vocab < 1)
        throw ConfigError("vocab sizes must be >= 1");
    for (std::int64_t v : secondary_vocabs)
        if (v < 1) throw ConfigError("secondary vocab sizes must be >= 1");
}

// ------------------------------------------------------------------ caches

struct FusionModel::EncCaches {
    ops::LinearCache prim_reduce;
    ops::DropoutCache prim_drop;
    std::vector<ops::LinearCache> sec_reduce;
    std::vector<ops::DropoutCache> sec_drop;
    std::vector<Eigen::MatrixXd> sec_embedded;

    struct Layer {
        ops::LayerNormCache ln1;
        ops::AttentionCache self;
        std::vector<ops::LinearCache> adp_down;
        std::vector<Eigen::MatrixXd> adp_pre;
        std::vector<ops::LinearCache> adp_up;
        std::vector<ops::AttentionCache> cross;
        Eigen::MatrixXd sa;
        std::vector<Eigen::MatrixXd> ca;
        bool cross_skipped = false;
        bool gate_learned = false;  // whether the gate gradient applies
        double alpha = 1.0;
        Eigen::RowVectorXd gate_w;  // softmax weights for M >= 2
        ops::DropoutCache drop1;
        ops::LayerNormCache ln2;
        ops::LinearCache ffn1;
        Eigen::MatrixXd ffn_pre;
        ops::LinearCache ffn2;
        ops::DropoutCache drop2;
    };
    std::vector<Layer> layers;
    ops::LayerNormCache final_norm;
};

struct FusionModel::DecCaches {
    std::vector<std::int64_t> tokens;
    ops::DropoutCache emb_drop;
    struct Layer {
        ops::LayerNormCache ln1;
        ops::AttentionCache self;
        ops::DropoutCache drop1;
        ops::LayerNormCache ln2;
        ops::AttentionCache cross;
        ops::DropoutCache drop2;
        ops::LayerNormCache ln3;
        ops::LinearCache ffn1;
        Eigen::MatrixXd ffn_pre;
        ops::LinearCache ffn2;
        ops::DropoutCache drop3;
    };
    std::vector<Layer> layers;
    ops::LayerNormCache final_norm;
    ops::LinearCache out;
};

// ------------------------------------------------------------- construction

FusionModel::FusionModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);

    auto init_stream = [&](const std::string& prefix, std::int64_t vocab) {
        Eigen::MatrixXd& table = params_.add(prefix + ".table", vocab, cfg_.d_emb);
        fill_normal(table, 1.0 / std::sqrt(static_cast<double>(cfg_.d_emb)), rng);
        ops::linear_init(params_, prefix + ".reduce", cfg_.d_emb, cfg_.d_model, rng);
    };
    init_stream("emb.primary", cfg_.primary_vocab);
    for (std::size_t s = 0; s < cfg_.num_secondary(); ++s)
        init_stream("emb.sec" + std::to_string(s), cfg_.secondary_vocabs[s]);

    for (int l = 0; l < cfg_.encoder_layers; ++l) {
        const std::string p = "enc.l" + std::to_string(l);
        ops::layer_norm_init(params_, p + ".norm1", cfg_.d_model);
        ops::attention_init(params_, p + ".self", cfg_.d_model, rng);
        for (std::size_t s = 0; s < cfg_.num_secondary(); ++s) {
            const std::string sp = std::to_string(s);
            ops::linear_init(params_, p + ".adapter" + sp + ".down", cfg_.d_model,
                             cfg_.adapter_bottleneck, rng);
            ops::linear_init(params_, p + ".adapter" + sp + ".up", cfg_.adapter_bottleneck,
                             cfg_.d_model, rng);
            ops::attention_init(params_, p + ".cross" + sp, cfg_.d_model, rng);
        }
        if (cfg_.num_secondary() == 1) {
            params_.add(p + ".gate", 1, 1);  // a = 0 -> alpha = 0.5
        } else if (cfg_.num_secondary() >= 2) {
            params_.add(p + ".gate", 1, static_cast<Eigen::Index>(cfg_.num_secondary()) + 1);
        }
        ops::layer_norm_init(params_, p + ".norm2", cfg_.d_model);
        ops::linear_init(params_, p + ".ffn.f1", cfg_.d_model, cfg_.ffn_dim, rng);
        ops::linear_init(params_, p + ".ffn.f2", cfg_.ffn_dim, cfg_.d_model, rng);
    }
    ops::layer_norm_init(params_, "enc.final_norm", cfg_.d_model);

    Eigen::MatrixXd& dec_table = params_.add("dec.table", cfg_.decoder_vocab(), cfg_.d_model);
    fill_normal(dec_table, 1.0 / std::sqrt(static_cast<double>(cfg_.d_model)), rng);
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
        const std::string p = "dec.l" + std::to_string(l);
        ops::layer_norm_init(params_, p + ".norm1", cfg_.d_model);
        ops::attention_init(params_, p + ".self", cfg_.d_model, rng);
        ops::layer_norm_init(params_, p + ".norm2", cfg_.d_model);
        ops::attention_init(params_, p + ".cross", cfg_.d_model, rng);
        ops::layer_norm_init(params_, p + ".norm3", cfg_.d_model);
        ops::linear_init(params_, p + ".ffn.f1", cfg_.d_model, cfg_.ffn_dim, rng);
        ops::linear_init(params_, p + ".ffn.f2", cfg_.ffn_dim, cfg_.d_model, rng);
    }
    ops::layer_norm_init(params_, "dec.final_norm", cfg_.d_model);
    ops::linear_init(params_, "dec.out", cfg_.d_model, cfg_.decoder_vocab(), rng);
    ops::linear_init(params_, "ctc.out", cfg_.d_model, cfg_.ctc_classes(), rng);
}

void FusionModel::set_gate_override(std::optional<double> v) {
    if (v && cfg_.num_secondary() >= 2 && *v != 1.0)
        throw ConfigError("gate override other than 1.0 requires a single secondary stream");
    gate_override_ = v;
}

double FusionModel::gate_alpha(int layer) const {
    if (cfg_.num_secondary() != 1)
        throw ConfigError("gate_alpha is defined for single-secondary models");
    return sigmoid(params_.value("enc.l" + std::to_string(layer) + ".gate")(0, 0));
}

std::string FusionModel::stream_prefix(int stream) const {
    if (stream < 0) return "emb.primary";
    if (static_cast<std::size_t>(stream) >= cfg_.num_secondary())
        throw ConfigError("secondary stream index out of range");
    return "emb.sec" + std::to_string(stream);
}

// ---------------------------------------------------------------- embedding

Eigen::MatrixXd FusionModel::embed_impl(const std::vector<std::int64_t>& tokens,
                                        const std::string& table, const std::string& reduce,
                                        std::int64_t vocab, bool training, std::mt19937_64* rng,
                                        ops::LinearCache* reduce_cache,
                                        ops::DropoutCache* drop_cache) const {
    if (static_cast<int>(tokens.size()) > cfg_.max_src_len)
        throw ConfigError("input sequence exceeds max_src_len");
    const Eigen::MatrixXd& tab = params_.value(table);
    Eigen::MatrixXd rows(static_cast<Eigen::Index>(tokens.size()), tab.cols());
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t] < 0 || tokens[t] >= vocab)
            throw DataError("token id out of vocab in " + table);
        rows.row(static_cast<Eigen::Index>(t)) = tab.row(tokens[t]);
    }
    Eigen::MatrixXd x = ops::linear_forward(params_, reduce, rows, reduce_cache);
    x += ops::positional_encoding(x.rows(), x.cols());
    if (training && rng)
        x = ops::dropout_forward(x, cfg_.dropout, true, *rng, drop_cache);
    else if (drop_cache)
        drop_cache->active = false;
    return x;
}

void FusionModel::embed_backward(const std::vector<std::int64_t>& tokens,
                                 const std::string& table, const ops::LinearCache& reduce_cache,
                                 const ops::DropoutCache& drop_cache, const Eigen::MatrixXd& dy) {
    const Eigen::MatrixXd d_post = ops::dropout_backward(drop_cache, dy);
    const Eigen::MatrixXd d_rows = ops::linear_backward(params_, reduce_cache, d_post);
    Eigen::MatrixXd& tab_grad = params_.grad(table);
    for (std::size_t t = 0; t < tokens.size(); ++t)
        tab_grad.row(tokens[t]) += d_rows.row(static_cast<Eigen::Index>(t));
}

Eigen::MatrixXd FusionModel::embed(const std::vector<std::int64_t>& tokens, int stream) const {
    const std::string p = stream_prefix(stream);
    const std::int64_t vocab =
        stream < 0 ? cfg_.primary_vocab : cfg_.secondary_vocabs[static_cast<std::size_t>(stream)];
    return embed_impl(tokens, p + ".table", p + ".reduce", vocab, false, nullptr, nullptr,
                      nullptr);
}

// ------------------------------------------------------------------ adapter

Eigen::MatrixXd FusionModel::adapter_apply(const Eigen::MatrixXd& e2, int layer,
                                           int stream) const {
    if (layer < 0 || layer >= cfg_.encoder_layers) throw ConfigError("layer index out of range");
    const std::string p =
        "enc.l" + std::to_string(layer) + ".adapter" + std::to_string(stream);
    const Eigen::MatrixXd pre = ops::linear_forward(params_, p + ".down", e2);
    return ops::linear_forward(params_, p + ".up", ops::gelu(pre));
}

// ------------------------------------------------------------ encoder layer

Eigen::MatrixXd FusionModel::encoder_layer_forward(int layer, const Eigen::MatrixXd& x,
                                                   const ops::Mask& mask1,
                                                   const std::vector<Eigen::MatrixXd>& sec,
                                                   const std::vector<ops::Mask>& mask2,
                                                   bool training, std::mt19937_64* rng,
                                                   EncCaches* caches) const {
    const std::string p = "enc.l" + std::to_string(layer);
    const std::size_t m = sec.size();

    EncCaches::Layer local;
    EncCaches::Layer& c = caches ? caches->layers[static_cast<std::size_t>(layer)] : local;

    const Eigen::MatrixXd n1 = ops::layer_norm_forward(params_, p + ".norm1", x, &c.ln1);
    c.sa = ops::attention_forward(params_, p + ".self", cfg_.heads, n1, n1, mask1, false,
                                  &c.self);

    const bool skip_cross = m == 0 || (gate_override_ && *gate_override_ == 1.0);
    Eigen::MatrixXd mix;
    if (skip_cross) {
        c.cross_skipped = true;
        mix = c.sa;
    } else {
        c.adp_down.resize(m);
        c.adp_pre.resize(m);
        c.adp_up.resize(m);
        c.cross.resize(m);
        c.ca.resize(m);
        for (std::size_t s = 0; s < m; ++s) {
            const std::string ap = p + ".adapter" + std::to_string(s);
            c.adp_pre[s] = ops::linear_forward(params_, ap + ".down", sec[s], &c.adp_down[s]);
            const Eigen::MatrixXd adapted =
                ops::linear_forward(params_, ap + ".up", ops::gelu(c.adp_pre[s]), &c.adp_up[s]);
            c.ca[s] = ops::attention_forward(params_, p + ".cross" + std::to_string(s),
                                             cfg_.heads, n1, adapted, mask2[s], false,
                                             &c.cross[s]);
        }
        if (m == 1) {
            if (gate_override_) {
                c.alpha = *gate_override_;
                c.gate_learned = false;
            } else {
                c.alpha = sigmoid(params_.value(p + ".gate")(0, 0));
                c.gate_learned = true;
            }
            mix = c.alpha * c.sa + (1.0 - c.alpha) * c.ca[0];
        } else {
            // scalable variant: softmax over M+1 gate logits
            const Eigen::RowVectorXd g = params_.value(p + ".gate").row(0);
            const Eigen::ArrayXd e = (g.array() - g.maxCoeff()).exp();
            c.gate_w = (e / e.sum()).matrix().transpose();
            c.gate_learned = true;
            mix = c.gate_w(0) * c.sa;
            for (std::size_t s = 0; s < m; ++s)
                mix += c.gate_w(static_cast<Eigen::Index>(s) + 1) * c.ca[s];
        }
    }

    Eigen::MatrixXd out = x;
    if (training && rng)
        out += ops::dropout_forward(mix, cfg_.dropout, true, *rng, &c.drop1);
    else
        out += mix;

    const Eigen::MatrixXd n2 = ops::layer_norm_forward(params_, p + ".norm2", out, &c.ln2);
    c.ffn_pre = ops::linear_forward(params_, p + ".ffn.f1", n2, &c.ffn1);
    const Eigen::MatrixXd f =
        ops::linear_forward(params_, p + ".ffn.f2", ops::gelu(c.ffn_pre), &c.ffn2);
    if (training && rng)
        out += ops::dropout_forward(f, cfg_.dropout, true, *rng, &c.drop2);
    else
        out += f;
    return out;
}

Eigen::MatrixXd FusionModel::fusion_encoder_layer(const Eigen::MatrixXd& e1,
                                                  const ops::Mask& mask1,
                                                  const std::vector<Eigen::MatrixXd>& e2,
                                                  const std::vector<ops::Mask>& mask2,
                                                  int layer) const {
    if (layer < 0 || layer >= cfg_.encoder_layers) throw ConfigError("layer index out of range");
    if (e2.size() != mask2.size()) throw DimensionError("secondary stream/mask count mismatch");
    return encoder_layer_forward(layer, e1, mask1, e2, mask2, false, nullptr, nullptr);
}

// ----------------------------------------------------------------- encoder

Eigen::MatrixXd FusionModel::encode_impl(const FusionBatchItem& item, bool training,
                                         std::mt19937_64* rng, EncCaches* caches) const {
    if (item.secondaries.size() != cfg_.num_secondary())
        throw DataError("batch item secondary stream count does not match the model config");

    EncCaches local;
    EncCaches& cc = caches ? *caches : local;
    cc.layers.resize(static_cast<std::size_t>(cfg_.encoder_layers));
    cc.sec_reduce.resize(cfg_.num_secondary());
    cc.sec_drop.resize(cfg_.num_secondary());
    cc.sec_embedded.resize(cfg_.num_secondary());

    Eigen::MatrixXd x = embed_impl(item.primary.tokens, "emb.primary.table",
                                   "emb.primary.reduce", cfg_.primary_vocab, training, rng,
                                   &cc.prim_reduce, &cc.prim_drop);
    std::vector<ops::Mask> mask2;
    for (std::size_t s = 0; s < cfg_.num_secondary(); ++s) {
        const std::string p = "emb.sec" + std::to_string(s);
        cc.sec_embedded[s] =
            embed_impl(item.secondaries[s].tokens, p + ".table", p + ".reduce",
                       cfg_.secondary_vocabs[s], training, rng, &cc.sec_reduce[s],
                       &cc.sec_drop[s]);
        mask2.push_back(item.secondaries[s].mask);
    }

    for (int l = 0; l < cfg_.encoder_layers; ++l)
        x = encoder_layer_forward(l, x, item.primary.mask, cc.sec_embedded, mask2, training, rng,
                                  &cc);
    return ops::layer_norm_forward(params_, "enc.final_norm", x, &cc.final_norm);
}

Eigen::MatrixXd FusionModel::encode(const FusionBatchItem& item) const {
    return encode_impl(item, false, nullptr, nullptr);
}

Eigen::MatrixXd FusionModel::encode_backward(const FusionBatchItem& item, EncCaches& cc,
                                             const Eigen::MatrixXd& denc) {
    Eigen::MatrixXd dx = ops::layer_norm_backward(params_, cc.final_norm, denc);
    std::vector<Eigen::MatrixXd> dsec(cfg_.num_secondary());
    for (std::size_t s = 0; s < cfg_.num_secondary(); ++s)
        dsec[s].setZero(cc.sec_embedded[s].rows(), cc.sec_embedded[s].cols());

    for (int l = cfg_.encoder_layers - 1; l >= 0; --l) {
        EncCaches::Layer& c = cc.layers[static_cast<std::size_t>(l)];

        // FFN block
        const Eigen::MatrixXd df = ops::dropout_backward(c.drop2, dx);
        const Eigen::MatrixXd dg = ops::linear_backward(params_, c.ffn2, df);
        const Eigen::MatrixXd dpre = ops::gelu_backward(c.ffn_pre, dg);
        const Eigen::MatrixXd dn2 = ops::linear_backward(params_, c.ffn1, dpre);
        dx += ops::layer_norm_backward(params_, c.ln2, dn2);

        // gate mixing
        const Eigen::MatrixXd dmix = ops::dropout_backward(c.drop1, dx);
        Eigen::MatrixXd dsa;
        std::vector<Eigen::MatrixXd> dca(c.ca.size());
        if (c.cross_skipped) {
            dsa = dmix;
        } else if (c.ca.size() == 1) {
            dsa = c.alpha * dmix;
            dca[0] = (1.0 - c.alpha) * dmix;
            if (c.gate_learned) {
                const double dalpha = (dmix.array() * (c.sa - c.ca[0]).array()).sum();
                params_.grad("enc.l" + std::to_string(l) + ".gate")(0, 0) +=
                    dalpha * c.alpha * (1.0 - c.alpha);
            }
        } else {
            dsa = c.gate_w(0) * dmix;
            Eigen::RowVectorXd dw(c.gate_w.size());
            dw(0) = (dmix.array() * c.sa.array()).sum();
            for (std::size_t s = 0; s < c.ca.size(); ++s) {
                const Eigen::Index gi = static_cast<Eigen::Index>(s) + 1;
                dca[s] = c.gate_w(gi) * dmix;
                dw(gi) = (dmix.array() * c.ca[s].array()).sum();
            }
            const double dot = c.gate_w.dot(dw);
            params_.grad("enc.l" + std::to_string(l) + ".gate").row(0) +=
                c.gate_w.cwiseProduct(dw - Eigen::RowVectorXd::Constant(dw.size(), dot));
        }

        // attention branches back to n1
        Eigen::MatrixXd dn1_kv;
        Eigen::MatrixXd dn1 = ops::attention_backward(params_, c.self, dsa, &dn1_kv);
        dn1 += dn1_kv;
        if (!c.cross_skipped) {
            for (std::size_t s = 0; s < c.ca.size(); ++s) {
                Eigen::MatrixXd dadapted;
                dn1 += ops::attention_backward(params_, c.cross[s], dca[s], &dadapted);
                const Eigen::MatrixXd dgelu = ops::linear_backward(params_, c.adp_up[s], dadapted);
                const Eigen::MatrixXd dapre = ops::gelu_backward(c.adp_pre[s], dgelu);
                dsec[s] += ops::linear_backward(params_, c.adp_down[s], dapre);
            }
        }
        dx += ops::layer_norm_backward(params_, c.ln1, dn1);
    }

    embed_backward(item.primary.tokens, "emb.primary.table", cc.prim_reduce, cc.prim_drop, dx);
    for (std::size_t s = 0; s < cfg_.num_secondary(); ++s)
        embed_backward(item.secondaries[s].tokens, "emb.sec" + std::to_string(s) + ".table",
                       cc.sec_reduce[s], cc.sec_drop[s], dsec[s]);
    return dx;
}

// ----------------------------------------------------------------- decoder

Eigen::MatrixXd FusionModel::decoder_forward(const Eigen::MatrixXd& enc,
                                             const ops::Mask& enc_mask,
                                             const std::vector<std::int64_t>& dec_input,
                                             bool training, std::mt19937_64* rng,
                                             DecCaches* caches) const {
    if (static_cast<int>(dec_input.size()) > cfg_.max_tgt_len + 1)
        throw ConfigError("decoder input exceeds max_tgt_len");
    DecCaches local;
    DecCaches& cc = caches ? *caches : local;
    cc.tokens = dec_input;
    cc.layers.resize(static_cast<std::size_t>(cfg_.decoder_layers));

    const Eigen::MatrixXd& tab = params_.value("dec.table");
    Eigen::MatrixXd x(static_cast<Eigen::Index>(dec_input.size()), cfg_.d_model);
    for (std::size_t t = 0; t < dec_input.size(); ++t) {
        if (dec_input[t] < 0 || dec_input[t] >= cfg_.decoder_vocab())
            throw DataError("decoder token id out of range");
        x.row(static_cast<Eigen::Index>(t)) = tab.row(dec_input[t]);
    }
    x += ops::positional_encoding(x.rows(), x.cols());
    if (training && rng) x = ops::dropout_forward(x, cfg_.dropout, true, *rng, &cc.emb_drop);

    for (int l = 0; l < cfg_.decoder_layers; ++l) {
        const std::string p = "dec.l" + std::to_string(l);
        DecCaches::Layer& c = cc.layers[static_cast<std::size_t>(l)];

        const Eigen::MatrixXd n1 = ops::layer_norm_forward(params_, p + ".norm1", x, &c.ln1);
        Eigen::MatrixXd sa =
            ops::attention_forward(params_, p + ".self", cfg_.heads, n1, n1, {}, true, &c.self);
        if (training && rng) sa = ops::dropout_forward(sa, cfg_.dropout, true, *rng, &c.drop1);
        x += sa;

        const Eigen::MatrixXd n2 = ops::layer_norm_forward(params_, p + ".norm2", x, &c.ln2);
        Eigen::MatrixXd ca = ops::attention_forward(params_, p + ".cross", cfg_.heads, n2, enc,
                                                    enc_mask, false, &c.cross);
        if (training && rng) ca = ops::dropout_forward(ca, cfg_.dropout, true, *rng, &c.drop2);
        x += ca;

        const Eigen::MatrixXd n3 = ops::layer_norm_forward(params_, p + ".norm3", x, &c.ln3);
        c.ffn_pre = ops::linear_forward(params_, p + ".ffn.f1", n3, &c.ffn1);
        Eigen::MatrixXd f =
            ops::linear_forward(params_, p + ".ffn.f2", ops::gelu(c.ffn_pre), &c.ffn2);
        if (training && rng) f = ops::dropout_forward(f, cfg_.dropout, true, *rng, &c.drop3);
        x += f;
    }
    x = ops::layer_norm_forward(params_, "dec.final_norm", x, &cc.final_norm);
    return ops::linear_forward(params_, "dec.out", x, &cc.out);
}

Eigen::MatrixXd FusionModel::decoder_backward(DecCaches& cc, const Eigen::MatrixXd& dlogits) {
    Eigen::MatrixXd dx = ops::linear_backward(params_, cc.out, dlogits);
    dx = ops::layer_norm_backward(params_, cc.final_norm, dx);

    Eigen::MatrixXd denc;
    for (int l = cfg_.decoder_layers - 1; l >= 0; --l) {
        DecCaches::Layer& c = cc.layers[static_cast<std::size_t>(l)];

        const Eigen::MatrixXd df = ops::dropout_backward(c.drop3, dx);
        const Eigen::MatrixXd dg = ops::linear_backward(params_, c.ffn2, df);
        const Eigen::MatrixXd dpre = ops::gelu_backward(c.ffn_pre, dg);
        const Eigen::MatrixXd dn3 = ops::linear_backward(params_, c.ffn1, dpre);
        dx += ops::layer_norm_backward(params_, c.ln3, dn3);

        const Eigen::MatrixXd dca = ops::dropout_backward(c.drop2, dx);
        Eigen::MatrixXd denc_l;
        const Eigen::MatrixXd dn2 = ops::attention_backward(params_, c.cross, dca, &denc_l);
        if (denc.size() == 0)
            denc = denc_l;
        else
            denc += denc_l;
        dx += ops::layer_norm_backward(params_, c.ln2, dn2);

        const Eigen::MatrixXd dsa = ops::dropout_backward(c.drop1, dx);
        Eigen::MatrixXd dn1_kv;
        Eigen::MatrixXd dn1 = ops::attention_backward(params_, c.self, dsa, &dn1_kv);
        dn1 += dn1_kv;
        dx += ops::layer_norm_backward(params_, c.ln1, dn1);
    }

    dx = ops::dropout_backward(cc.emb_drop, dx);
    Eigen::MatrixXd& tab_grad = params_.grad("dec.table");
    for (std::size_t t = 0; t < cc.tokens.size(); ++t)
        tab_grad.row(cc.tokens[t]) += dx.row(static_cast<Eigen::Index>(t));
    return denc;
}

// ------------------------------------------------------------------ losses

namespace {

std::vector<Eigen::Index> valid_rows(const ops::Mask& mask, Eigen::Index n) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = 0; i < n; ++i)
        if (mask.empty() || mask[static_cast<std::size_t>(i)]) idx.push_back(i);
    return idx;
}

}  // namespace

Eigen::MatrixXd FusionModel::ctc_logits(const Eigen::MatrixXd& enc) const {
    return ops::linear_forward(params_, "ctc.out", enc);
}

double FusionModel::ctc_loss_on(const Eigen::MatrixXd& enc, const ops::Mask& enc_mask,
                                const std::vector<std::int64_t>& target) const {
    const auto idx = valid_rows(enc_mask, enc.rows());
    Eigen::MatrixXd rows(static_cast<Eigen::Index>(idx.size()), enc.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) rows.row(static_cast<Eigen::Index>(i)) = enc.row(idx[i]);
    std::vector<std::int64_t> classes;
    classes.reserve(target.size());
    for (std::int64_t c : target) classes.push_back(c + 1);
    return dsu::ctc_loss(ctc_logits(rows), classes, nullptr);
}

double FusionModel::attention_loss(const Eigen::MatrixXd& enc, const ops::Mask& enc_mask,
                                   const std::vector<std::int64_t>& target) const {
    if (target.empty()) throw DataError("attention loss needs a non-empty target");
    if (static_cast<int>(target.size()) > cfg_.max_tgt_len)
        throw ConfigError("target exceeds max_tgt_len");
    std::vector<std::int64_t> dec_input = {cfg_.sos_id()};
    dec_input.insert(dec_input.end(), target.begin(), target.end());
    std::vector<std::int64_t> dec_target(target.begin(), target.end());
    dec_target.push_back(cfg_.eos_id());
    const Eigen::MatrixXd logits =
        decoder_forward(enc, enc_mask, dec_input, false, nullptr, nullptr);
    return ops::softmax_xent_forward(logits, dec_target, nullptr);
}

LossBreakdown FusionModel::eval_loss(const FusionBatchItem& item) const {
    const Eigen::MatrixXd enc = encode(item);
    LossBreakdown lb;
    lb.ctc = ctc_loss_on(enc, item.primary.mask, item.target);
    lb.attention = attention_loss(enc, item.primary.mask, item.target);
    lb.joint = cfg_.ctc_weight * lb.ctc + (1.0 - cfg_.ctc_weight) * lb.attention;
    return lb;
}

LossBreakdown FusionModel::joint_loss(const FusionBatch& batch, bool accumulate_grads,
                                      std::mt19937_64* dropout_rng) {
    if (batch.empty()) throw DataError("joint_loss: empty batch");
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    const double lambda = cfg_.ctc_weight;
    const bool training = dropout_rng != nullptr;

    LossBreakdown total;
    for (const FusionBatchItem& item : batch) {
        if (item.target.empty()) throw DataError("joint_loss: empty target");
        if (static_cast<int>(item.target.size()) > cfg_.max_tgt_len)
            throw ConfigError("target exceeds max_tgt_len");
        for (std::int64_t c : item.target)
            if (c < 0 || c >= cfg_.char_vocab) throw DataError("target char id out of range");

        EncCaches enc_caches;
        const Eigen::MatrixXd enc =
            encode_impl(item, training, dropout_rng, accumulate_grads ? &enc_caches : nullptr);

        // CTC over unpadded frames
        const auto idx = valid_rows(item.primary.mask, enc.rows());
        Eigen::MatrixXd ctc_in(static_cast<Eigen::Index>(idx.size()), enc.cols());
        for (std::size_t i = 0; i < idx.size(); ++i)
            ctc_in.row(static_cast<Eigen::Index>(i)) = enc.row(idx[i]);
        ops::LinearCache ctc_cache;
        const Eigen::MatrixXd ctc_out =
            ops::linear_forward(params_, "ctc.out", ctc_in, &ctc_cache);
        std::vector<std::int64_t> classes;
        for (std::int64_t c : item.target) classes.push_back(c + 1);
        Eigen::MatrixXd dctc;
        const double l_ctc =
            dsu::ctc_loss(ctc_out, classes, accumulate_grads ? &dctc : nullptr);

        // teacher-forced decoder
        std::vector<std::int64_t> dec_input = {cfg_.sos_id()};
        dec_input.insert(dec_input.end(), item.target.begin(), item.target.end());
        std::vector<std::int64_t> dec_target(item.target.begin(), item.target.end());
        dec_target.push_back(cfg_.eos_id());
        DecCaches dec_caches;
        const Eigen::MatrixXd logits =
            decoder_forward(enc, item.primary.mask, dec_input, training, dropout_rng,
                            accumulate_grads ? &dec_caches : nullptr);
        ops::SoftmaxXentCache xent;
        const double l_att = ops::softmax_xent_forward(logits, dec_target, &xent);

        total.ctc += l_ctc * inv_b;
        total.attention += l_att * inv_b;
        total.joint += (lambda * l_ctc + (1.0 - lambda) * l_att) * inv_b;

        if (accumulate_grads) {
            Eigen::MatrixXd denc = Eigen::MatrixXd::Zero(enc.rows(), enc.cols());
            if (lambda > 0.0) {
                const Eigen::MatrixXd denc_ctc =
                    ops::linear_backward(params_, ctc_cache, dctc * (lambda * inv_b));
                for (std::size_t i = 0; i < idx.size(); ++i)
                    denc.row(idx[i]) += denc_ctc.row(static_cast<Eigen::Index>(i));
            }
            if (lambda < 1.0) {
                const Eigen::MatrixXd dlogits =
                    ops::softmax_xent_backward(xent, (1.0 - lambda) * inv_b);
                denc += decoder_backward(dec_caches, dlogits);
            }
            encode_backward(item, enc_caches, denc);
        }
    }
    if (!std::isfinite(total.joint))
        throw NumericalError("joint_loss: non-finite loss");
    return total;
}

Eigen::RowVectorXd FusionModel::decoder_step_logits(const Eigen::MatrixXd& enc,
                                                    const ops::Mask& enc_mask,
                                                    const std::vector<std::int64_t>& prefix) const {
    std::vector<std::int64_t> dec_input = {cfg_.sos_id()};
    dec_input.insert(dec_input.end(), prefix.begin(), prefix.end());
    const Eigen::MatrixXd logits =
        decoder_forward(enc, enc_mask, dec_input, false, nullptr, nullptr);
    return logits.row(logits.rows() - 1);
}

// -------------------------------------------------------------- checkpoints

void FusionModel::save_checkpoint(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint: " + path);
    nlohmann::json j;
    j["version"] = 1;
    j["config"] = config_to_json(cfg_);
    j["tensors"] = params_.names();
    const std::string header = j.dump();

    os.write("DSUC", 4);
    const std::uint32_t version = 1;
    os.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t hlen = header.size();
    os.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& [name, entry] : params_.entries()) {
        const std::uint64_t rows = static_cast<std::uint64_t>(entry.value.rows());
        const std::uint64_t cols = static_cast<std::uint64_t>(entry.value.cols());
        os.write(reinterpret_cast<const char*>(&rows), sizeof(rows));
        os.write(reinterpret_cast<const char*>(&cols), sizeof(cols));
        Eigen::RowVectorXd row(entry.value.cols());
        for (Eigen::Index i = 0; i < entry.value.rows(); ++i) {
            row = entry.value.row(i);
            os.write(reinterpret_cast<const char*>(row.data()),
                     static_cast<std::streamsize>(cols * sizeof(double)));
        }
    }
    if (!os) throw IoError("short write on checkpoint: " + path);
}

FusionModel FusionModel::load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DSUC", 4) != 0)
        throw FormatError("bad checkpoint magic in " + path);
    std::uint32_t version = 0;
    is.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (!is || version != 1) throw FormatError("unsupported checkpoint version in " + path);
    std::uint64_t hlen = 0;
    is.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string header(hlen, '\0');
    is.read(header.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw FormatError("truncated checkpoint header in " + path);

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad checkpoint header JSON: ") + e.what());
    }
    FusionModel model(config_from_json(j.at("config")));
    const auto names = j.at("tensors").get<std::vector<std::string>>();
    if (names != model.params_.names())
        throw FormatError("checkpoint tensor list does not match the model schema");

    for (const std::string& name : names) {
        std::uint64_t rows = 0, cols = 0;
        is.read(reinterpret_cast<char*>(&rows), sizeof(rows));
        is.read(reinterpret_cast<char*>(&cols), sizeof(cols));
        Eigen::MatrixXd& v = model.params_.value(name);
        if (!is || rows != static_cast<std::uint64_t>(v.rows()) ||
            cols != static_cast<std::uint64_t>(v.cols()))
            throw FormatError("checkpoint tensor shape mismatch for " + name);
        std::vector<double> row(cols);
        for (std::uint64_t i = 0; i < rows; ++i) {
            is.read(reinterpret_cast<char*>(row.data()),
                    static_cast<std::streamsize>(cols * sizeof(double)));
            if (!is) throw FormatError("truncated checkpoint payload in " + path);
            for (std::uint64_t c = 0; c < cols; ++c)
                v(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = row[c];
        }
    }
    return model;
}

}  // namespace dsu
