#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dsu {

/// Transformer fusion model hyperparameters. Defaults are desk-scale;
/// production runs would use much larger dims and stacks.
struct ModelConfig {
    int d_emb = 64;             // embedding dim before reduction
    int d_model = 32;           // post-reduction model dim
    int encoder_layers = 2;
    int decoder_layers = 1;
    int heads = 4;
    int ffn_dim = 64;
    int adapter_bottleneck = 16;
    double dropout = 0.0;
    double ctc_weight = 0.3;    // joint loss lambda

    std::int64_t primary_vocab = 0;
    std::vector<std::int64_t> secondary_vocabs;  // empty = plain (non-fusion) encoder
    std::int64_t char_vocab = 0;                 // output characters C

    int max_src_len = 2048;
    int max_tgt_len = 256;
    std::uint64_t seed = 0;

    // Decoder symbol layout: chars are 0..C-1, then start and end symbols.
    std::int64_t sos_id() const { return char_vocab; }
    std::int64_t eos_id() const { return char_vocab + 1; }
    std::int64_t decoder_vocab() const { return char_vocab + 2; }
    // CTC layout: blank is class 0, char c maps to class c+1.
    std::int64_t ctc_classes() const { return char_vocab + 1; }

    std::size_t num_secondary() const { return secondary_vocabs.size(); }

    void validate() const;
};

}  // namespace dsu
