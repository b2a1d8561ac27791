#include "dsu/features.hpp"

#include "dsu/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace dsu {

namespace {

constexpr char kMagic[4] = {'U', 'F', 'F', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool read_pod(std::istream& is, T& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return static_cast<bool>(is);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    // splitmix64 finalizer over seed ^ salt
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace

void validate_feature_matrix(const FeatureMatrix& f) {
    if (f.dim() < 1) throw DimensionError("feature matrix needs D >= 1");
    if (!(f.frame_rate > 0.0)) throw DataError("frame_rate must be positive");
    if (!f.frames.allFinite()) throw DataError("non-finite feature entries in " + f.utterance_id);
}

FeatureMatrix load_features(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open feature file: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("bad magic in feature file: " + path);
    std::uint32_t version = 0;
    std::uint64_t t = 0, d = 0;
    double rate = 0.0;
    if (!read_pod(is, version) || version != kVersion)
        throw FormatError("unsupported feature file version in " + path);
    if (!read_pod(is, t) || !read_pod(is, d) || !read_pod(is, rate))
        throw FormatError("truncated feature header in " + path);
    if (d < 1) throw FormatError("feature file declares D < 1: " + path);
    if (!(rate > 0.0)) throw FormatError("feature file declares non-positive frame rate: " + path);

    FeatureMatrix f;
    f.frame_rate = rate;
    f.frames.resize(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(d));
    std::vector<float> row(d);
    for (std::uint64_t i = 0; i < t; ++i) {
        is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(d * sizeof(float)));
        if (!is) throw FormatError("payload shorter than T*D*4 bytes in " + path);
        for (std::uint64_t j = 0; j < d; ++j)
            f.frames(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
    }
    if (!f.frames.allFinite()) throw DataError("non-finite entries in feature file: " + path);
    return f;
}

void save_features(const FeatureMatrix& f, const std::string& path) {
    validate_feature_matrix(f);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write feature file: " + path);
    os.write(kMagic, 4);
    write_pod(os, kVersion);
    write_pod(os, static_cast<std::uint64_t>(f.num_frames()));
    write_pod(os, static_cast<std::uint64_t>(f.dim()));
    write_pod(os, f.frame_rate);
    std::vector<float> row(static_cast<std::size_t>(f.dim()));
    for (Eigen::Index i = 0; i < f.num_frames(); ++i) {
        for (Eigen::Index j = 0; j < f.dim(); ++j)
            row[static_cast<std::size_t>(j)] = static_cast<float>(f.frames(i, j));
        os.write(reinterpret_cast<const char*>(row.data()),
                 static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
    if (!os) throw IoError("short write on feature file: " + path);
}

std::vector<ManifestEntry> load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open manifest: " + path);
    std::vector<ManifestEntry> entries;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto tab1 = line.find('\t');
        auto tab2 = tab1 == std::string::npos ? std::string::npos : line.find('\t', tab1 + 1);
        if (tab1 == std::string::npos || tab2 == std::string::npos)
            throw FormatError("manifest line missing tabs: " + line);
        entries.push_back({line.substr(0, tab1), line.substr(tab1 + 1, tab2 - tab1 - 1),
                           line.substr(tab2 + 1)});
    }
    return entries;
}

void save_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write manifest: " + path);
    for (const auto& e : entries)
        os << e.utterance_id << '\t' << e.relative_path << '\t' << e.transcript << '\n';
}

SynthCodes synth_codes(const SynthCorpusSpec& spec) {
    if (spec.vocab.empty()) throw ConfigError("synth corpus vocab is empty");
    if (spec.feature_dim < 2 || spec.feature_dim % 2 != 0)
        throw ConfigError("synth feature_dim must be a positive even integer");
    if (spec.info_split < 0.0 || spec.info_split > 1.0)
        throw ConfigError("info_split must lie in [0, 1]");

    const auto vocab_size = static_cast<std::int64_t>(spec.vocab.size());
    const std::int64_t half = spec.feature_dim / 2;
    const auto digit_base =
        static_cast<std::int64_t>(std::ceil(std::sqrt(static_cast<double>(vocab_size))));
    const std::int64_t num_groups = (vocab_size + digit_base - 1) / digit_base;

    // Each character index c decomposes into two digits (u, v). Digit codes
    // are unit-norm gaussian vectors; which digits each stream carries is
    // governed by info_split. At 0.5 stream A sees only u and stream B only
    // v, so neither alone identifies the character.
    std::mt19937_64 rng(mix_seed(spec.seed, 0xC0DEULL));
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto draw_unit = [&](std::int64_t n) {
        Eigen::MatrixXd m(n, half);
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = gauss(rng);
            double norm = m.row(i).norm();
            if (norm > 0) m.row(i) /= norm;
        }
        return m;
    };
    Eigen::MatrixXd group_codes = draw_unit(num_groups);
    Eigen::MatrixXd digit_codes = draw_unit(digit_base);

    const double s = spec.info_split;
    const double wa1 = std::sqrt(std::min(2.0 * s, 1.0));
    const double wa2 = std::sqrt(std::max(2.0 * s - 1.0, 0.0));
    const double wb1 = std::sqrt(std::max(1.0 - 2.0 * s, 0.0));
    const double wb2 = std::sqrt(std::min(2.0 - 2.0 * s, 1.0));

    SynthCodes codes;
    codes.stream_a.resize(vocab_size, spec.feature_dim);
    codes.stream_b.resize(vocab_size, spec.feature_dim);
    for (std::int64_t c = 0; c < vocab_size; ++c) {
        const std::int64_t u = c / digit_base;
        const std::int64_t v = c % digit_base;
        codes.stream_a.row(c).head(half) = wa1 * group_codes.row(u);
        codes.stream_a.row(c).tail(half) = wa2 * digit_codes.row(v);
        codes.stream_b.row(c).head(half) = wb1 * group_codes.row(u);
        codes.stream_b.row(c).tail(half) = wb2 * digit_codes.row(v);
    }
    return codes;
}

std::vector<SynthUtterance> synth_corpus(const SynthCorpusSpec& spec) {
    if (spec.noise_std < 0.0) throw ConfigError("noise_std must be non-negative");
    if (spec.frames_per_char < 1.0) throw ConfigError("frames_per_char must be >= 1");
    if (spec.min_chars < 1 || spec.max_chars < spec.min_chars)
        throw ConfigError("bad transcript length range");
    const SynthCodes codes = synth_codes(spec);
    const auto vocab_size = static_cast<std::int64_t>(spec.vocab.size());

    std::vector<SynthUtterance> corpus;
    corpus.reserve(spec.num_utterances);
    for (std::size_t idx = 0; idx < spec.num_utterances; ++idx) {
        // per-utterance RNG stream: deterministic under parallel generation
        std::mt19937_64 rng(mix_seed(spec.seed, idx));
        std::uniform_int_distribution<std::size_t> len_dist(spec.min_chars, spec.max_chars);
        std::uniform_int_distribution<std::int64_t> char_dist(0, vocab_size - 1);
        std::poisson_distribution<int> extra_frames(spec.frames_per_char - 1.0);
        std::normal_distribution<double> noise(0.0, 1.0);

        const std::size_t n_chars = len_dist(rng);
        std::string transcript;
        std::vector<std::int64_t> char_ids;
        std::vector<int> run_lengths;
        std::int64_t total_frames = 0;
        for (std::size_t i = 0; i < n_chars; ++i) {
            const std::int64_t c = char_dist(rng);
            transcript.push_back(spec.vocab[static_cast<std::size_t>(c)]);
            char_ids.push_back(c);
            const int run = 1 + extra_frames(rng);
            run_lengths.push_back(run);
            total_frames += run;
        }

        SynthUtterance utt;
        utt.transcript = transcript;
        char id_buf[32];
        std::snprintf(id_buf, sizeof(id_buf), "utt%06zu", idx);
        utt.stream_a.utterance_id = id_buf;
        utt.stream_b.utterance_id = id_buf;
        utt.stream_a.frame_rate = spec.frame_rate;
        utt.stream_b.frame_rate = spec.frame_rate;
        utt.stream_a.frames.resize(total_frames, spec.feature_dim);
        utt.stream_b.frames.resize(total_frames, spec.feature_dim);

        Eigen::Index t = 0;
        for (std::size_t i = 0; i < n_chars; ++i) {
            for (int r = 0; r < run_lengths[i]; ++r, ++t) {
                utt.stream_a.frames.row(t) = codes.stream_a.row(char_ids[i]);
                utt.stream_b.frames.row(t) = codes.stream_b.row(char_ids[i]);
                if (spec.noise_std > 0.0) {
                    for (Eigen::Index j = 0; j < spec.feature_dim; ++j)
                        utt.stream_a.frames(t, j) += spec.noise_std * noise(rng);
                    for (Eigen::Index j = 0; j < spec.feature_dim; ++j)
                        utt.stream_b.frames(t, j) += spec.noise_std * noise(rng);
                }
            }
        }
        corpus.push_back(std::move(utt));
    }
    return corpus;
}

FeatureMatrix reshape_split(const FeatureMatrix& f) {
    if (f.dim() % 2 != 0) throw DimensionError("reshape_split needs an even feature dimension");
    const Eigen::Index half = f.dim() / 2;
    FeatureMatrix out;
    out.utterance_id = f.utterance_id;
    out.frame_rate = f.frame_rate * 2.0;
    out.frames.resize(f.num_frames() * 2, half);
    for (Eigen::Index i = 0; i < f.num_frames(); ++i) {
        out.frames.row(2 * i) = f.frames.row(i).head(half);
        out.frames.row(2 * i + 1) = f.frames.row(i).tail(half);
    }
    return out;
}

FeatureMatrix reshape_merge(const FeatureMatrix& f) {
    if (f.num_frames() % 2 != 0) throw DimensionError("reshape_merge needs an even frame count");
    FeatureMatrix out;
    out.utterance_id = f.utterance_id;
    out.frame_rate = f.frame_rate / 2.0;
    out.frames.resize(f.num_frames() / 2, f.dim() * 2);
    for (Eigen::Index i = 0; i < out.frames.rows(); ++i) {
        out.frames.row(i).head(f.dim()) = f.frames.row(2 * i);
        out.frames.row(i).tail(f.dim()) = f.frames.row(2 * i + 1);
    }
    return out;
}

FeatureMatrix delta(const FeatureMatrix& f, int width) {
    if (width < 3 || width % 2 == 0) throw ConfigError("delta width must be odd and >= 3");
    const int m = (width - 1) / 2;
    double denom = 0.0;
    for (int n = 1; n <= m; ++n) denom += 2.0 * n * n;

    FeatureMatrix out;
    out.utterance_id = f.utterance_id;
    out.frame_rate = f.frame_rate;
    out.frames.setZero(f.num_frames(), f.dim());
    const Eigen::Index t_max = f.num_frames() - 1;
    for (Eigen::Index t = 0; t < f.num_frames(); ++t) {
        Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(f.dim());
        for (int n = 1; n <= m; ++n) {
            const Eigen::Index lo = std::clamp<Eigen::Index>(t - n, 0, t_max);
            const Eigen::Index hi = std::clamp<Eigen::Index>(t + n, 0, t_max);
            acc += static_cast<double>(n) * (f.frames.row(hi) - f.frames.row(lo));
        }
        out.frames.row(t) = acc / denom;
    }
    return out;
}

}  // namespace dsu
