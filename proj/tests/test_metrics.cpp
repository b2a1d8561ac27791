#include <doctest.h>

#include "dsu/errors.hpp"
#include "dsu/features.hpp"
#include "dsu/metrics.hpp"

#include <algorithm>
#include <filesystem>
#include <random>

using namespace dsu;

namespace {

// Plain edit-distance DP without backtrace, used as an independent oracle.
std::int64_t edit_distance_oracle(const std::string& a, const std::string& b) {
    std::vector<std::int64_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<std::int64_t>(j);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = static_cast<std::int64_t>(i);
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = std::min({prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1), cur[j - 1] + 1,
                               prev[j] + 1});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

std::string random_string(std::mt19937& rng, std::size_t max_len, int alphabet = 4) {
    std::uniform_int_distribution<std::size_t> len(0, max_len);
    std::uniform_int_distribution<int> ch(0, alphabet - 1);
    std::string s;
    const std::size_t n = len(rng);
    for (std::size_t i = 0; i < n; ++i) s.push_back(static_cast<char>('a' + ch(rng)));
    return s;
}

}  // namespace

TEST_CASE("bitrate: continuous baseline is exactly 2,048,000 bits/s") {
    // 1280 dims of fp32 at 50 frames/s, modeled as 1280 streams with V = 2^32
    std::vector<StreamStats> streams(1280);
    for (auto& s : streams) {
        s.total_tokens = 50;
        s.vocab_size = 1LL << 32;
    }
    CHECK(bitrate(streams, 1.0) == 2048000.0);
}

TEST_CASE("bitrate: 50 units/s with V=2000") {
    CHECK(bitrate({{50, 2000, "a"}}, 1.0) == doctest::Approx(548.29).epsilon(0.0001));
}

TEST_CASE("bitrate: additive over streams") {
    const double one = bitrate({{123, 500, "a"}}, 2.5);
    const double two = bitrate({{123, 500, "a"}, {123, 500, "b"}}, 2.5);
    CHECK(two == doctest::Approx(2.0 * one).epsilon(1e-12));
}

TEST_CASE("bitrate: errors") {
    CHECK_THROWS_AS(bitrate({{10, 100, ""}}, 0.0), ConfigError);
    CHECK_THROWS_AS(bitrate({{10, 0, ""}}, 1.0), DataError);
}

TEST_CASE("bitrate: strictly increasing in vocab size") {
    CHECK(bitrate({{10, 101, ""}}, 1.0) > bitrate({{10, 100, ""}}, 1.0));
}

TEST_CASE("cer: identity and single substitution") {
    const CerReport same = cer("abc", "abc");
    CHECK(same.cer == 0.0);
    CHECK(same.edits() == 0);

    const CerReport sub = cer("abd", "abc");
    CHECK(sub.substitutions == 1);
    CHECK(sub.insertions == 0);
    CHECK(sub.deletions == 0);
    CHECK(sub.cer == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("cer: empty reference flagged undefined with insertions counted") {
    const CerReport r = cer("xyz", "");
    CHECK_FALSE(r.rate_defined);
    CHECK(r.insertions == 3);
    CHECK(r.ref_chars == 0);
}

TEST_CASE("cer: distance matches plain DP oracle on random pairs") {
    std::mt19937 rng(5);
    for (int i = 0; i < 1000; ++i) {
        const std::string ref = random_string(rng, 20);
        const std::string hyp = random_string(rng, 20);
        if (ref.empty()) continue;
        const CerReport r = cer(hyp, ref);
        CHECK(r.edits() == edit_distance_oracle(ref, hyp));
    }
}

TEST_CASE("cer: edit count symmetric, split need not be") {
    std::mt19937 rng(6);
    for (int i = 0; i < 300; ++i) {
        const std::string a = random_string(rng, 15);
        const std::string b = random_string(rng, 15);
        if (a.empty() || b.empty()) continue;
        CHECK(cer(a, b).edits() == cer(b, a).edits());
    }
}

TEST_CASE("cer: triangle inequality on edit distance") {
    std::mt19937 rng(7);
    for (int i = 0; i < 300; ++i) {
        const std::string a = random_string(rng, 12);
        const std::string b = random_string(rng, 12);
        const std::string c = random_string(rng, 12);
        CHECK(edit_distance_oracle(a, c) <=
              edit_distance_oracle(a, b) + edit_distance_oracle(b, c));
    }
}

TEST_CASE("micro_average_cer: pooled semantics") {
    CerReport r1;
    r1.substitutions = 1;
    r1.ref_chars = 10;
    CerReport r2;
    r2.deletions = 3;
    r2.ref_chars = 10;
    CHECK(micro_average_cer({r1, r2}) == doctest::Approx(0.2));

    r1.cer = 0.1;
    CHECK(micro_average_cer({r1}) == doctest::Approx(0.1));

    // pooled, not mean-of-rates: sizes 1 and 99, edits 1 and 0
    CerReport small;
    small.substitutions = 1;
    small.ref_chars = 1;
    CerReport big;
    big.ref_chars = 99;
    CHECK(micro_average_cer({small, big}) == doctest::Approx(0.01));

    CHECK_THROWS_AS(micro_average_cer({}), DataError);
}

TEST_CASE("cer_diff: hand-computed reference points") {
    CHECK(cer_diff(10.87, 14.32) == doctest::Approx(-0.2409).epsilon(1e-3));
    CHECK(cer_diff(1.89, 2.32) == doctest::Approx(-0.1853).epsilon(1e-3));
    CHECK(cer_diff(3.3, 3.3) == 0.0);
    CHECK_THROWS_AS(cer_diff(1.0, 0.0), DataError);
}

TEST_CASE("robustness_buckets: one per bucket") {
    const BucketCounts b =
        robustness_buckets({{"a", 0.10}, {"b", 0.00}, {"c", -0.10}}, 0.05);
    CHECK(b.decline == 1);
    CHECK(b.comparable == 1);
    CHECK(b.improved == 1);
    CHECK(b.std_defined);
}

TEST_CASE("robustness_buckets: closed interval at the threshold") {
    const BucketCounts b = robustness_buckets({{"a", 0.05}, {"b", -0.05}}, 0.05);
    CHECK(b.comparable == 2);
    CHECK(b.decline == 0);
    CHECK(b.improved == 0);
}

TEST_CASE("robustness_buckets: empty map") {
    const BucketCounts b = robustness_buckets({});
    CHECK(b.decline + b.comparable + b.improved == 0);
    CHECK_FALSE(b.std_defined);
}

TEST_CASE("robustness_buckets: counts sum and threshold monotonicity") {
    std::mt19937 rng(8);
    std::uniform_real_distribution<double> d(-0.5, 0.5);
    std::map<std::string, double> diffs;
    for (int i = 0; i < 50; ++i) diffs["lang" + std::to_string(i)] = d(rng);
    const BucketCounts wide = robustness_buckets(diffs, 0.10);
    const BucketCounts narrow = robustness_buckets(diffs, 0.02);
    CHECK(wide.decline + wide.comparable + wide.improved == 50);
    CHECK(narrow.decline + narrow.comparable + narrow.improved == 50);
    CHECK(narrow.comparable <= wide.comparable);
}

namespace {

std::vector<std::pair<std::string, std::size_t>> lengths_with_mean(double mean, std::size_t n,
                                                                   const std::string& prefix) {
    // integer lengths summing to round(mean * n)
    const auto total = static_cast<std::size_t>(std::llround(mean * static_cast<double>(n)));
    std::vector<std::pair<std::string, std::size_t>> out;
    const std::size_t base = total / n;
    std::size_t rem = total - base * n;
    for (std::size_t i = 0; i < n; ++i) {
        out.emplace_back(prefix + std::to_string(i), base + (i < rem ? 1 : 0));
    }
    return out;
}

}  // namespace

TEST_CASE("length_stats: reproduces the reference reduction percentages") {
    auto orig = lengths_with_mean(393.26, 100, "u");
    auto dd = lengths_with_mean(272.31, 100, "u");
    auto bpe = lengths_with_mean(202.92, 100, "u");
    const LengthStats st = length_stats(orig, dd, bpe);
    CHECK(st.mean_original == doctest::Approx(393.26));
    CHECK(st.dedup_reduction_pct == 31);
    CHECK(st.dedup_bpe_reduction_pct == 48);

    auto orig2 = lengths_with_mean(333.01, 100, "u");
    auto dd2 = lengths_with_mean(226.30, 100, "u");
    const LengthStats st2 = length_stats(orig2, dd2, dd2);
    CHECK(st2.dedup_reduction_pct == 32);
}

TEST_CASE("length_stats: identical corpora give zero reduction") {
    auto c = lengths_with_mean(100.0, 10, "u");
    const LengthStats st = length_stats(c, c, c);
    CHECK(st.dedup_reduction == 0.0);
    CHECK(st.dedup_bpe_reduction_pct == 0);
}

TEST_CASE("length_stats: id mismatch is a data error") {
    auto a = lengths_with_mean(10.0, 3, "u");
    auto b = lengths_with_mean(10.0, 3, "v");
    CHECK_THROWS_AS(length_stats(a, b, b), DataError);
}

TEST_CASE("packed_unit_width") {
    CHECK(packed_unit_width(2) == 1);
    CHECK(packed_unit_width(256) == 1);
    CHECK(packed_unit_width(257) == 2);
    CHECK(packed_unit_width(2000) == 2);
    CHECK(packed_unit_width(65536) == 2);
    CHECK(packed_unit_width(65537) == 4);
}

TEST_CASE("storage_stats: ratio close to the format arithmetic") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "dsu_storage_test";
    fs::create_directories(dir);
    FeatureMatrix f;
    f.frames = Eigen::MatrixXd::Zero(100, 1280);
    f.frame_rate = 50.0;
    f.utterance_id = "u0";
    const auto path = (dir / "u0.feat").string();
    save_features(f, path);

    const StorageStats st = storage_stats({path}, {{100, 2000}});
    CHECK(st.ratio_defined);
    // u16 per frame vs 1280 f32 per frame, header amortized away
    CHECK(st.ratio == doctest::Approx(2.0 / (1280.0 * 4.0)).epsilon(1e-3));

    // linearity: doubling the corpus doubles both sides
    const StorageStats dbl = storage_stats({path, path}, {{100, 2000}, {100, 2000}});
    CHECK(dbl.continuous_bytes == 2 * st.continuous_bytes);
    CHECK(dbl.discrete_bytes == 2 * st.discrete_bytes);
    CHECK(dbl.ratio == doctest::Approx(st.ratio));

    const StorageStats empty = storage_stats({}, {});
    CHECK_FALSE(empty.ratio_defined);
    CHECK(empty.continuous_bytes == 0);

    CHECK_THROWS_AS(storage_stats({(dir / "missing.feat").string()}, {}), IoError);
    fs::remove_all(dir);
}
