#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace dsu {

/// Frame-level feature matrix. Rows are time frames, columns are feature
/// dimensions. Stored single-precision on disk, held double-precision in
/// memory. Immutable by convention after construction.
struct FeatureMatrix {
    Eigen::MatrixXd frames;        // T x D
    double frame_rate = 50.0;      // frames per second
    std::string utterance_id;

    std::int64_t num_frames() const { return frames.rows(); }
    std::int64_t dim() const { return frames.cols(); }
};

/// Validates invariants: D >= 1, finite entries, frame_rate > 0.
void validate_feature_matrix(const FeatureMatrix& f);

// Binary feature file: magic "UFFT", version u32=1, T u64, D u64,
// frame_rate f64, then T*D little-endian f32 row-major.
FeatureMatrix load_features(const std::string& path);
void save_features(const FeatureMatrix& f, const std::string& path);

struct ManifestEntry {
    std::string utterance_id;
    std::string relative_path;
    std::string transcript;
};

// Corpus manifest: one "utterance_id<TAB>relative_path<TAB>transcript"
// per line, UTF-8, LF-terminated.
std::vector<ManifestEntry> load_manifest(const std::string& path);
void save_manifest(const std::vector<ManifestEntry>& entries, const std::string& path);

/// Synthetic stand-in for SSL features: two complementary streams per
/// utterance whose clean per-character codes jointly identify the
/// character, with the information split controlled by info_split.
struct SynthCorpusSpec {
    std::size_t num_utterances = 0;
    std::string vocab;             // transcript alphabet, one char per symbol
    double frames_per_char = 2.0;  // mean frames per character segment
    std::int64_t feature_dim = 8;  // D, must be even
    double noise_std = 0.0;
    double info_split = 0.5;       // fraction of the latent code carried by stream A
    std::uint64_t seed = 0;
    double frame_rate = 50.0;
    std::size_t min_chars = 8;     // transcript length range
    std::size_t max_chars = 16;
};

struct SynthUtterance {
    FeatureMatrix stream_a;
    FeatureMatrix stream_b;
    std::string transcript;
};

/// Clean (noise-free) per-character codes used by the generator; exposed
/// so tests can run nearest-centroid oracles against them.
struct SynthCodes {
    Eigen::MatrixXd stream_a;  // |vocab| x D, row c = clean code of vocab[c]
    Eigen::MatrixXd stream_b;
};

SynthCodes synth_codes(const SynthCorpusSpec& spec);
std::vector<SynthUtterance> synth_corpus(const SynthCorpusSpec& spec);

/// (T, D) -> (2T, D/2): row 2i holds the first D/2 dims of input row i,
/// row 2i+1 the rest. Frame rate doubles. Lossless.
FeatureMatrix reshape_split(const FeatureMatrix& f);

/// Inverse of reshape_split: re-pairs consecutive rows.
FeatureMatrix reshape_merge(const FeatureMatrix& f);

/// Regression-slope delta with symmetric window and edge replication:
/// out_t = sum_{n=-M..M} n*f_{t+n} / sum_{n=-M..M} n^2, M = (width-1)/2.
FeatureMatrix delta(const FeatureMatrix& f, int width = 9);

}  // namespace dsu
