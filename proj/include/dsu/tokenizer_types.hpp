#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dsu {

/// Discrete unit stream for one utterance (pre-BPE).
struct UnitSequence {
    std::vector<std::int64_t> units;
    std::int64_t vocab_size = 0;
    std::string utterance_id;
    std::string stream_tag;

    std::size_t size() const { return units.size(); }
};

/// Post-BPE token stream for one utterance.
struct TokenSequence {
    std::vector<std::int64_t> tokens;
    std::string model_id;
    std::string utterance_id;

    std::size_t size() const { return tokens.size(); }
};

}  // namespace dsu
