#pragma once

#include "dsu/tokenizer_types.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace dsu {

/// Greedy pair-merge subword model over unit ids. Base units keep their
/// ids [0, base_vocab_size); each merge appends one new token id.
struct BpeModel {
    std::vector<std::pair<std::int64_t, std::int64_t>> merges;  // training order
    std::int64_t base_vocab_size = 0;
    std::int64_t target_vocab_size = 0;
    std::string model_id;

    std::int64_t vocab_size() const {
        return base_vocab_size + static_cast<std::int64_t>(merges.size());
    }
    /// Token spelling: decimal unit ids joined by '_' (e.g. "17_4").
    std::string spelling(std::int64_t token) const;
    /// Expands a token into its base-unit string.
    std::vector<std::int64_t> expand(std::int64_t token) const;
};

/// Collapses runs of identical adjacent units, keeping first occurrences.
UnitSequence dedup(const UnitSequence& s);

/// Greedy BPE training: merge the most frequent adjacent pair (count >= 2,
/// ties to the lexicographically smallest pair) until the vocab reaches
/// target_vocab_size or no pair qualifies.
BpeModel bpe_train(const std::vector<UnitSequence>& corpus, std::int64_t target_vocab_size);

TokenSequence bpe_encode(const BpeModel& m, const UnitSequence& s);
UnitSequence bpe_decode(const BpeModel& m, const TokenSequence& t);

void save_bpe_model(const BpeModel& m, const std::string& path);
BpeModel load_bpe_model(const std::string& path);

// Sequence text format: "utterance_id<TAB>space-separated integers" per line.
void save_unit_sequences(const std::vector<UnitSequence>& seqs, const std::string& path);
std::vector<UnitSequence> load_unit_sequences(const std::string& path, std::int64_t vocab_size,
                                              const std::string& stream_tag = "");
void save_token_sequences(const std::vector<TokenSequence>& seqs, const std::string& path);
std::vector<TokenSequence> load_token_sequences(const std::string& path,
                                                const std::string& model_id = "");

}  // namespace dsu
