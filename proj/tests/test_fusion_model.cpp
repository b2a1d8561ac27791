#include "dsu/model/fusion_model.hpp"

#include "dsu/errors.hpp"
#include "dsu/model/grad_check.hpp"
#include "dsu/model/ops.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

using namespace dsu;

namespace {

ModelConfig toy_config(std::int64_t primary_vocab = 11, bool with_secondary = true) {
    ModelConfig cfg;
    cfg.d_emb = 12;
    cfg.d_model = 8;
    cfg.encoder_layers = 2;
    cfg.decoder_layers = 1;
    cfg.heads = 2;
    cfg.ffn_dim = 16;
    cfg.adapter_bottleneck = 4;
    cfg.primary_vocab = primary_vocab;
    if (with_secondary) cfg.secondary_vocabs = {7};
    cfg.char_vocab = 5;
    cfg.seed = 3;
    return cfg;
}

FusionBatchItem toy_item() {
    FusionBatchItem item;
    item.primary.tokens = {1, 4, 2, 9, 0, 3};
    item.secondaries.resize(1);
    item.secondaries[0].tokens = {2, 6, 1, 0};
    item.target = {0, 2, 1};
    item.utterance_id = "u1";
    return item;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig cfg = toy_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.heads = 3;  // 8 % 3 != 0
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = toy_config();
    cfg.ctc_weight = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = toy_config();
    cfg.primary_vocab = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = toy_config();
    cfg.decoder_layers = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("initialization is deterministic and named as expected") {
    FusionModel a(toy_config()), b(toy_config());
    CHECK(a.params().names() == b.params().names());
    for (const std::string& name : a.params().names())
        CHECK(a.params().value(name) == b.params().value(name));

    CHECK(a.params().has("emb.primary.table"));
    CHECK(a.params().has("emb.sec0.table"));
    CHECK(a.params().has("enc.l0.gate"));
    CHECK(a.params().has("enc.l1.adapter0.down.w"));
    CHECK(a.params().has("enc.l1.cross0.wq.w"));
    CHECK(a.params().has("dec.l0.cross.wo.b"));
    CHECK(a.params().has("ctc.out.w"));
    // single-secondary gate starts at alpha = 0.5
    CHECK(a.gate_alpha(0) == doctest::Approx(0.5));
    CHECK(a.gate_alpha(1) == doctest::Approx(0.5));
}

TEST_CASE("embed is table lookup, reduction, and positional encoding") {
    FusionModel m(toy_config());
    const std::vector<std::int64_t> tokens = {3, 3, 7};
    const Eigen::MatrixXd e = m.embed(tokens, -1);
    CHECK(e.rows() == 3);
    CHECK(e.cols() == 8);
    // identical tokens differ only by the positional term
    const Eigen::MatrixXd pe = ops::positional_encoding(3, 8);
    CHECK(((e.row(0) - pe.row(0)) - (e.row(1) - pe.row(1))).cwiseAbs().maxCoeff() < 1e-12);

    CHECK_THROWS_AS(m.embed({99}, -1), DataError);
    CHECK_THROWS_AS(m.embed({0}, 3), ConfigError);
}

TEST_CASE("adapter matches a hand computation") {
    FusionModel m(toy_config());
    std::mt19937_64 rng(5);
    std::normal_distribution<double> d(0.0, 1.0);
    Eigen::MatrixXd e2(3, 8);
    for (Eigen::Index i = 0; i < e2.size(); ++i) e2(i) = d(rng);

    const Eigen::MatrixXd got = m.adapter_apply(e2, 1, 0);
    const auto& ps = m.params();
    Eigen::MatrixXd pre = (e2 * ps.value("enc.l1.adapter0.down.w")).rowwise() +
                          ps.value("enc.l1.adapter0.down.b").row(0);
    pre = pre.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); });
    const Eigen::MatrixXd expect = (pre * ps.value("enc.l1.adapter0.up.w")).rowwise() +
                                   ps.value("enc.l1.adapter0.up.b").row(0);
    CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gate override 1.0 reduces to the plain encoder bit for bit") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        ModelConfig fcfg = toy_config();
        fcfg.seed = seed;
        FusionModel fusion(fcfg);

        ModelConfig pcfg = fcfg;
        pcfg.secondary_vocabs.clear();
        FusionModel plain(pcfg);
        for (const std::string& name : plain.params().names())
            plain.params().value(name) = fusion.params().value(name);

        fusion.set_gate_override(1.0);
        const FusionBatchItem item = toy_item();
        FusionBatchItem plain_item = item;
        plain_item.secondaries.clear();

        const Eigen::MatrixXd a = fusion.encode(item);
        const Eigen::MatrixXd b = plain.encode(plain_item);
        CHECK(a == b);  // bitwise
    }
}

TEST_CASE("the mixing gate is a convex combination of the two branches") {
    // zero the FFN output projection so one layer is exactly x + mix(alpha)
    ModelConfig cfg = toy_config();
    cfg.encoder_layers = 1;
    FusionModel m(cfg);
    m.params().value("enc.l0.ffn.f2.w").setZero();
    m.params().value("enc.l0.ffn.f2.b").setZero();

    const FusionBatchItem item = toy_item();
    const Eigen::MatrixXd e1 = m.embed(item.primary.tokens, -1);
    const Eigen::MatrixXd e2 = m.embed(item.secondaries[0].tokens, 0);
    auto layer = [&](double alpha) {
        m.set_gate_override(alpha);
        return m.fusion_encoder_layer(e1, {}, {e2}, {{}}, 0);
    };
    const Eigen::MatrixXd y0 = layer(0.0);
    const Eigen::MatrixXd y1 = layer(1.0);
    const Eigen::MatrixXd mid = layer(0.3);
    CHECK((mid - (0.3 * y1 + 0.7 * y0)).cwiseAbs().maxCoeff() < 1e-9);
    // a second probe pair on the same segment
    const Eigen::MatrixXd a = layer(0.2);
    const Eigen::MatrixXd b = layer(0.8);
    CHECK(((a - b) - 0.6 * (y0 - y1)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("gate alpha stays in (0,1) and moves with the pre-activation") {
    FusionModel m(toy_config());
    m.params().value("enc.l0.gate")(0, 0) = 30.0;
    m.params().value("enc.l1.gate")(0, 0) = -30.0;
    CHECK(m.gate_alpha(0) > 0.0);
    CHECK(m.gate_alpha(0) < 1.0);
    CHECK(m.gate_alpha(1) > 0.0);
    CHECK(m.gate_alpha(1) < 1.0);
    CHECK(m.gate_alpha(0) > 0.999);
    CHECK(m.gate_alpha(1) < 0.001);
}

TEST_CASE("padding content cannot leak into valid positions") {
    FusionModel m(toy_config());
    FusionBatchItem item = toy_item();
    const Eigen::MatrixXd base = m.encode(item);

    FusionBatchItem padded = item;
    padded.primary.tokens.push_back(5);
    padded.primary.tokens.push_back(8);
    padded.primary.mask = {1, 1, 1, 1, 1, 1, 0, 0};
    padded.secondaries[0].tokens.push_back(3);
    padded.secondaries[0].mask = {1, 1, 1, 1, 0};

    const Eigen::MatrixXd out1 = m.encode(padded);
    padded.primary.tokens[6] = 1;
    padded.primary.tokens[7] = 0;
    padded.secondaries[0].tokens[4] = 6;
    const Eigen::MatrixXd out2 = m.encode(padded);

    CHECK((out1.topRows(6) - out2.topRows(6)).cwiseAbs().maxCoeff() < 1e-10);
    // valid rows also match the unpadded encoding
    CHECK((out1.topRows(6) - base).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("joint loss composes ctc and attention terms") {
    const FusionBatchItem item = toy_item();

    ModelConfig cfg = toy_config();
    cfg.ctc_weight = 0.0;
    FusionModel m0(cfg);
    const LossBreakdown l0 = m0.eval_loss(item);
    CHECK(l0.joint == doctest::Approx(l0.attention).epsilon(1e-15));

    cfg.ctc_weight = 1.0;
    FusionModel m1(cfg);
    const LossBreakdown l1 = m1.eval_loss(item);
    CHECK(l1.joint == doctest::Approx(l1.ctc).epsilon(1e-15));

    cfg.ctc_weight = 0.3;
    FusionModel m3(cfg);
    const LossBreakdown l3 = m3.eval_loss(item);
    CHECK(l3.joint == doctest::Approx(0.3 * l3.ctc + 0.7 * l3.attention).epsilon(1e-12));

    // batch version agrees with the per-item evaluation
    FusionModel m3b(cfg);
    const LossBreakdown batch = m3b.joint_loss({item});
    CHECK(batch.joint == doctest::Approx(l3.joint).epsilon(1e-12));
}

TEST_CASE("degenerate batches are rejected") {
    FusionModel m(toy_config());
    CHECK_THROWS_AS(m.joint_loss({}), DataError);
    FusionBatchItem item = toy_item();
    item.target.clear();
    CHECK_THROWS_AS(m.joint_loss({item}), DataError);
    item = toy_item();
    item.secondaries.clear();
    CHECK_THROWS_AS(m.joint_loss({item}), DataError);
    item = toy_item();
    item.target = {0, 1, 0, 1, 0, 1, 0};  // needs more frames than provided
    CHECK_THROWS_AS(m.joint_loss({item}), DataError);
}

TEST_CASE("analytic gradients match finite differences") {
    FusionModel m(toy_config());
    FusionBatchItem second = toy_item();
    second.primary.tokens = {0, 5, 5, 2, 7};
    second.secondaries[0].tokens = {1, 1, 4};
    second.target = {3, 0};
    second.utterance_id = "u2";

    GradCheckOptions opts;
    opts.sample_size = 250;
    const double err = grad_check(m, {toy_item(), second}, opts);
    CHECK(err < 1e-4);
}

TEST_CASE("grad check rejects a non-positive epsilon") {
    FusionModel m(toy_config());
    GradCheckOptions opts;
    opts.epsilon = 0.0;
    CHECK_THROWS_AS(grad_check(m, {toy_item()}, opts), ConfigError);
}

TEST_CASE("two secondary streams use a softmax gate and still check out") {
    ModelConfig cfg = toy_config();
    cfg.secondary_vocabs = {7, 9};
    cfg.encoder_layers = 1;
    FusionModel m(cfg);
    CHECK(m.params().value("enc.l0.gate").cols() == 3);

    FusionBatchItem item = toy_item();
    item.secondaries.resize(2);
    item.secondaries[1].tokens = {8, 0, 2, 3};
    CHECK_NOTHROW(m.eval_loss(item));

    GradCheckOptions opts;
    opts.sample_size = 200;
    CHECK(grad_check(m, {item}, opts) < 1e-4);

    // overriding a softmax gate with anything but the 1.0 corner is an error
    CHECK_THROWS_AS(m.set_gate_override(0.5), ConfigError);
    CHECK_NOTHROW(m.set_gate_override(1.0));
}

TEST_CASE("zero encoder layers leaves the normalized embedding") {
    ModelConfig cfg = toy_config(11, false);
    cfg.encoder_layers = 0;
    FusionModel m(cfg);
    FusionBatchItem item = toy_item();
    item.secondaries.clear();
    const Eigen::MatrixXd enc = m.encode(item);
    const Eigen::MatrixXd emb = m.embed(item.primary.tokens, -1);
    const Eigen::MatrixXd expect =
        ops::layer_norm_forward(m.params(), "enc.final_norm", emb);
    CHECK(enc == expect);
}

TEST_CASE("checkpoint round trip preserves evaluation bit for bit") {
    const std::string path = temp_path("dsu_test_ckpt.bin");
    FusionModel m(toy_config());
    m.params().value("enc.l0.gate")(0, 0) = 0.37;  // move off the defaults
    m.save_checkpoint(path);

    const FusionModel loaded = FusionModel::load_checkpoint(path);
    const FusionBatchItem item = toy_item();
    CHECK(m.encode(item) == loaded.encode(item));
    const LossBreakdown a = m.eval_loss(item);
    const LossBreakdown b = loaded.eval_loss(item);
    CHECK(a.joint == b.joint);
    std::remove(path.c_str());
}

TEST_CASE("corrupt checkpoints are format errors") {
    const std::string path = temp_path("dsu_test_ckpt_bad.bin");
    {
        std::FILE* f = std::fopen(path.c_str(), "wb");
        REQUIRE(f);
        std::fwrite("NOPE", 1, 4, f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(FusionModel::load_checkpoint(path), FormatError);
    CHECK_THROWS_AS(FusionModel::load_checkpoint(temp_path("dsu_missing_ckpt.bin")), IoError);

    // truncated payload
    FusionModel m(toy_config());
    m.save_checkpoint(path);
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size / 2);
    CHECK_THROWS_AS(FusionModel::load_checkpoint(path), FormatError);
    std::remove(path.c_str());
}
