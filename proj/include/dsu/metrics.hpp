#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace dsu {

struct StreamStats {
    std::int64_t total_tokens = 0;  // T_i
    std::int64_t vocab_size = 0;    // V_i
    std::string stream_tag;
};

/// Bits per second: sum_i (T_i / N) * log2(V_i).
double bitrate(const std::vector<StreamStats>& streams, double total_seconds);

struct CerReport {
    std::int64_t substitutions = 0;
    std::int64_t insertions = 0;
    std::int64_t deletions = 0;
    std::int64_t ref_chars = 0;
    double cer = 0.0;
    bool rate_defined = true;  // false when ref is empty

    std::int64_t edits() const { return substitutions + insertions + deletions; }
};

/// Levenshtein distance with unit costs, S/I/D split via backtrace
/// (tie preference: substitution, then insertion, then deletion).
CerReport cer(const std::string& hyp, const std::string& ref);

/// Pooled CER: (sum edits) / (sum ref chars), not a mean of rates.
double micro_average_cer(const std::vector<CerReport>& reports);

/// Relative CER difference (cer_f - cer_b) / cer_b.
double cer_diff(double cer_f, double cer_b);

struct BucketCounts {
    std::int64_t decline = 0;
    std::int64_t comparable = 0;
    std::int64_t improved = 0;
    double diff_std = 0.0;      // population std of the diffs
    bool std_defined = false;   // false for an empty input
};

/// diff > +threshold -> Decline; |diff| <= threshold -> Comparable
/// (closed interval); diff < -threshold -> Improved.
BucketCounts robustness_buckets(const std::map<std::string, double>& diffs,
                                double threshold = 0.05);

struct LengthStats {
    double mean_original = 0.0;
    double mean_dedup = 0.0;
    double mean_dedup_bpe = 0.0;
    double dedup_reduction = 0.0;      // fraction vs original
    double dedup_bpe_reduction = 0.0;  // fraction vs original
    int dedup_reduction_pct = 0;       // rounded to report precision
    int dedup_bpe_reduction_pct = 0;
};

/// Per-stage mean lengths and reductions; corpora must be aligned by
/// utterance id (same ids, same order after matching).
LengthStats length_stats(const std::vector<std::pair<std::string, std::size_t>>& original,
                         const std::vector<std::pair<std::string, std::size_t>>& dedup,
                         const std::vector<std::pair<std::string, std::size_t>>& dedup_bpe);

struct StorageStats {
    std::uint64_t continuous_bytes = 0;
    std::uint64_t discrete_bytes = 0;
    double ratio = 0.0;         // discrete / continuous
    bool ratio_defined = false;
};

/// On-disk bytes of continuous feature files vs the discrete streams
/// packed at the smallest unsigned width holding V-1.
StorageStats storage_stats(const std::vector<std::string>& continuous_paths,
                           const std::vector<std::pair<std::size_t, std::int64_t>>&
                               discrete_streams /* (token count, vocab size) */);

/// Smallest of {1,2,4,8} bytes that can hold values up to vocab_size-1.
int packed_unit_width(std::int64_t vocab_size);

}  // namespace dsu
