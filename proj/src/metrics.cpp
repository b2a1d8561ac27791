#include "dsu/metrics.hpp"

#include "dsu/errors.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <unordered_map>

namespace dsu {

double bitrate(const std::vector<StreamStats>& streams, double total_seconds) {
    if (!(total_seconds > 0.0)) throw ConfigError("bitrate: total seconds must be positive");
    double bps = 0.0;
    for (const auto& s : streams) {
        if (s.vocab_size < 1) throw DataError("bitrate: stream vocab size must be >= 1");
        if (s.total_tokens < 0) throw DataError("bitrate: negative token count");
        bps += (static_cast<double>(s.total_tokens) / total_seconds) *
               std::log2(static_cast<double>(s.vocab_size));
    }
    return bps;
}

CerReport cer(const std::string& hyp, const std::string& ref) {
    const std::size_t n_ref = ref.size(), n_hyp = hyp.size();
    CerReport rep;
    rep.ref_chars = static_cast<std::int64_t>(n_ref);

    if (n_ref == 0) {
        rep.insertions = static_cast<std::int64_t>(n_hyp);
        rep.rate_defined = false;
        rep.cer = std::numeric_limits<double>::quiet_NaN();
        return rep;
    }

    // dp[i][j]: distance between ref[0..i) and hyp[0..j)
    std::vector<std::vector<std::int32_t>> dp(n_ref + 1,
                                              std::vector<std::int32_t>(n_hyp + 1, 0));
    for (std::size_t i = 0; i <= n_ref; ++i) dp[i][0] = static_cast<std::int32_t>(i);
    for (std::size_t j = 0; j <= n_hyp; ++j) dp[0][j] = static_cast<std::int32_t>(j);
    for (std::size_t i = 1; i <= n_ref; ++i) {
        for (std::size_t j = 1; j <= n_hyp; ++j) {
            const std::int32_t sub = dp[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            const std::int32_t ins = dp[i][j - 1] + 1;
            const std::int32_t del = dp[i - 1][j] + 1;
            dp[i][j] = std::min({sub, ins, del});
        }
    }

    // Backtrace, preferring substitution over insertion over deletion.
    std::size_t i = n_ref, j = n_hyp;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0 && ref[i - 1] == hyp[j - 1] && dp[i][j] == dp[i - 1][j - 1]) {
            --i;
            --j;
        } else if (i > 0 && j > 0 && dp[i][j] == dp[i - 1][j - 1] + 1) {
            ++rep.substitutions;
            --i;
            --j;
        } else if (j > 0 && dp[i][j] == dp[i][j - 1] + 1) {
            ++rep.insertions;
            --j;
        } else {
            ++rep.deletions;
            --i;
        }
    }
    rep.cer = static_cast<double>(rep.edits()) / static_cast<double>(n_ref);
    return rep;
}

double micro_average_cer(const std::vector<CerReport>& reports) {
    std::int64_t edits = 0, chars = 0;
    for (const auto& r : reports) {
        edits += r.edits();
        chars += r.ref_chars;
    }
    if (chars <= 0) throw DataError("micro_average_cer: zero pooled reference characters");
    return static_cast<double>(edits) / static_cast<double>(chars);
}

double cer_diff(double cer_f, double cer_b) {
    if (!(cer_b > 0.0)) throw DataError("cer_diff: baseline CER must be positive");
    return (cer_f - cer_b) / cer_b;
}

BucketCounts robustness_buckets(const std::map<std::string, double>& diffs, double threshold) {
    if (!(threshold > 0.0)) throw ConfigError("robustness_buckets: threshold must be positive");
    BucketCounts b;
    double sum = 0.0, sum_sq = 0.0;
    for (const auto& [lang, diff] : diffs) {
        (void)lang;
        if (diff > threshold)
            ++b.decline;
        else if (diff < -threshold)
            ++b.improved;
        else
            ++b.comparable;
        sum += diff;
        sum_sq += diff * diff;
    }
    if (!diffs.empty()) {
        const double n = static_cast<double>(diffs.size());
        const double mean = sum / n;
        b.diff_std = std::sqrt(std::max(0.0, sum_sq / n - mean * mean));
        b.std_defined = true;
    }
    return b;
}

namespace {

double aligned_mean(const std::vector<std::pair<std::string, std::size_t>>& ref_ids,
                    const std::vector<std::pair<std::string, std::size_t>>& stage) {
    if (stage.size() != ref_ids.size())
        throw DataError("length_stats: corpora differ in utterance count");
    std::unordered_map<std::string, std::size_t> by_id;
    for (const auto& [id, len] : stage) {
        if (!by_id.emplace(id, len).second)
            throw DataError("length_stats: duplicate utterance id " + id);
    }
    double total = 0.0;
    for (const auto& [id, len] : ref_ids) {
        (void)len;
        auto it = by_id.find(id);
        if (it == by_id.end()) throw DataError("length_stats: utterance id mismatch: " + id);
        total += static_cast<double>(it->second);
    }
    return ref_ids.empty() ? 0.0 : total / static_cast<double>(ref_ids.size());
}

}  // namespace

LengthStats length_stats(const std::vector<std::pair<std::string, std::size_t>>& original,
                         const std::vector<std::pair<std::string, std::size_t>>& dedup,
                         const std::vector<std::pair<std::string, std::size_t>>& dedup_bpe) {
    LengthStats st;
    double total = 0.0;
    for (const auto& [id, len] : original) {
        (void)id;
        total += static_cast<double>(len);
    }
    st.mean_original = original.empty() ? 0.0 : total / static_cast<double>(original.size());
    st.mean_dedup = aligned_mean(original, dedup);
    st.mean_dedup_bpe = aligned_mean(original, dedup_bpe);
    if (st.mean_original > 0.0) {
        st.dedup_reduction = 1.0 - st.mean_dedup / st.mean_original;
        st.dedup_bpe_reduction = 1.0 - st.mean_dedup_bpe / st.mean_original;
    }
    st.dedup_reduction_pct = static_cast<int>(std::lround(st.dedup_reduction * 100.0));
    st.dedup_bpe_reduction_pct = static_cast<int>(std::lround(st.dedup_bpe_reduction * 100.0));
    return st;
}

int packed_unit_width(std::int64_t vocab_size) {
    if (vocab_size < 1) throw DataError("packed_unit_width: vocab size must be >= 1");
    const std::int64_t max_value = vocab_size - 1;
    if (max_value <= 0xFF) return 1;
    if (max_value <= 0xFFFF) return 2;
    if (max_value <= 0xFFFFFFFFLL) return 4;
    return 8;
}

StorageStats storage_stats(
    const std::vector<std::string>& continuous_paths,
    const std::vector<std::pair<std::size_t, std::int64_t>>& discrete_streams) {
    StorageStats st;
    for (const auto& p : continuous_paths) {
        std::error_code ec;
        const auto sz = std::filesystem::file_size(p, ec);
        if (ec) throw IoError("storage_stats: cannot stat " + p);
        st.continuous_bytes += sz;
    }
    for (const auto& [count, vocab] : discrete_streams)
        st.discrete_bytes +=
            static_cast<std::uint64_t>(count) * static_cast<std::uint64_t>(packed_unit_width(vocab));
    if (st.continuous_bytes > 0) {
        st.ratio = static_cast<double>(st.discrete_bytes) / static_cast<double>(st.continuous_bytes);
        st.ratio_defined = true;
    }
    return st;
}

}  // namespace dsu
