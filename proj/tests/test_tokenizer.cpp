#include <doctest.h>

#include "dsu/errors.hpp"
#include "dsu/tokenizer.hpp"

#include <filesystem>
#include <random>

using namespace dsu;

namespace {

UnitSequence make_seq(std::vector<std::int64_t> units, std::int64_t vocab) {
    UnitSequence s;
    s.units = std::move(units);
    s.vocab_size = vocab;
    s.utterance_id = "u";
    return s;
}

UnitSequence random_seq(std::mt19937& rng, std::int64_t vocab, std::size_t max_len) {
    std::uniform_int_distribution<std::size_t> len(0, max_len);
    std::uniform_int_distribution<std::int64_t> unit(0, vocab - 1);
    UnitSequence s;
    s.vocab_size = vocab;
    const std::size_t n = len(rng);
    for (std::size_t i = 0; i < n; ++i) s.units.push_back(unit(rng));
    return s;
}

}  // namespace

TEST_CASE("dedup: basic cases") {
    CHECK(dedup(make_seq({}, 4)).units.empty());
    CHECK(dedup(make_seq({3, 3, 3}, 4)).units == std::vector<std::int64_t>{3});
    CHECK(dedup(make_seq({1, 1, 2, 2, 2, 1}, 4)).units == std::vector<std::int64_t>{1, 2, 1});
}

TEST_CASE("dedup: idempotence and length properties") {
    std::mt19937 rng(17);
    for (int it = 0; it < 200; ++it) {
        const UnitSequence s = random_seq(rng, 5, 40);
        const UnitSequence d = dedup(s);
        CHECK(dedup(d).units == d.units);
        CHECK(d.units.size() <= s.units.size());
        bool has_repeat = false;
        for (std::size_t i = 0; i + 1 < s.units.size(); ++i)
            if (s.units[i] == s.units[i + 1]) has_repeat = true;
        CHECK((d.units.size() == s.units.size()) == !has_repeat);
        for (std::size_t i = 0; i + 1 < d.units.size(); ++i)
            CHECK(d.units[i] != d.units[i + 1]);
    }
}

TEST_CASE("bpe_train: single merge on a repeating pair corpus") {
    // (1,2) occurs 3x, (2,1) occurs 2x
    const BpeModel m = bpe_train({make_seq({1, 2, 1, 2, 1, 2}, 3)}, 4);
    REQUIRE(m.merges.size() == 1);
    CHECK(m.merges[0] == std::pair<std::int64_t, std::int64_t>{1, 2});
}

TEST_CASE("bpe_train: target equal to base vocab means zero merges") {
    const BpeModel m = bpe_train({make_seq({0, 1, 0, 1}, 2)}, 2);
    CHECK(m.merges.empty());
    const TokenSequence t = bpe_encode(m, make_seq({0, 1, 1, 0}, 2));
    CHECK(t.tokens == std::vector<std::int64_t>{0, 1, 1, 0});
}

TEST_CASE("bpe_train: no repeated pair means training stops") {
    const BpeModel m = bpe_train({make_seq({0, 1, 2}, 8), make_seq({3, 4, 5}, 8)}, 100);
    CHECK(m.merges.empty());
}

TEST_CASE("bpe_train: errors") {
    CHECK_THROWS_AS(bpe_train({}, 10), DataError);
    CHECK_THROWS_AS(bpe_train({make_seq({0, 1}, 4)}, 3), ConfigError);
}

TEST_CASE("bpe_train: deterministic tie-break by smallest pair") {
    // (0,1) and (1,0) both occur twice; (0,1) is lexicographically smaller
    const BpeModel m = bpe_train({make_seq({0, 1, 0, 1, 0}, 2)}, 3);
    REQUIRE(m.merges.size() == 1);
    CHECK(m.merges[0] == std::pair<std::int64_t, std::int64_t>{0, 1});
}

TEST_CASE("bpe_encode: single merge applied") {
    BpeModel m;
    m.base_vocab_size = 4;
    m.target_vocab_size = 5;
    m.merges = {{1, 2}};
    const TokenSequence t = bpe_encode(m, make_seq({1, 2, 3}, 4));
    CHECK(t.tokens == std::vector<std::int64_t>{4, 3});

    CHECK(bpe_encode(m, make_seq({}, 4)).tokens.empty());
    CHECK(bpe_encode(m, make_seq({3, 2, 1}, 4)).tokens == std::vector<std::int64_t>{3, 2, 1});
}

TEST_CASE("bpe_decode: expansion and errors") {
    BpeModel m;
    m.base_vocab_size = 4;
    m.merges = {{1, 2}};
    TokenSequence t;
    t.tokens = {4, 3};
    CHECK(bpe_decode(m, t).units == std::vector<std::int64_t>{1, 2, 3});
    t.tokens = {};
    CHECK(bpe_decode(m, t).units.empty());
    t.tokens = {5};
    CHECK_THROWS_AS(bpe_decode(m, t), DataError);
}

TEST_CASE("bpe: round trip lossless over 1000 random sequences") {
    std::mt19937 rng(23);
    std::vector<UnitSequence> corpus;
    for (int i = 0; i < 50; ++i) corpus.push_back(random_seq(rng, 6, 60));
    // avoid all-empty corpora
    corpus.push_back(make_seq({0, 1, 0, 1, 2, 0, 1}, 6));
    const BpeModel m = bpe_train(corpus, 20);

    for (int i = 0; i < 1000; ++i) {
        const UnitSequence s = random_seq(rng, 6, 50);
        const TokenSequence t = bpe_encode(m, s);
        CHECK(bpe_decode(m, t).units == s.units);
        CHECK(t.tokens.size() <= s.units.size());
    }
}

TEST_CASE("bpe: pipeline order, dedup before encode never longer on average") {
    std::mt19937 rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<UnitSequence> corpus, dd_corpus;
        for (int i = 0; i < 30; ++i) {
            UnitSequence s = random_seq(rng, 5, 80);
            dd_corpus.push_back(dedup(s));
            corpus.push_back(std::move(s));
        }
        const BpeModel m = bpe_train(dd_corpus, 5 + 12);
        double len_pipeline = 0, len_raw = 0;
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            len_pipeline += static_cast<double>(bpe_encode(m, dd_corpus[i]).tokens.size());
            len_raw += static_cast<double>(bpe_encode(m, corpus[i]).tokens.size());
        }
        CHECK(len_pipeline <= len_raw);
    }
}

TEST_CASE("bpe model: save/load round trip") {
    std::mt19937 rng(41);
    std::vector<UnitSequence> corpus;
    for (int i = 0; i < 20; ++i) corpus.push_back(random_seq(rng, 8, 40));
    corpus.push_back(make_seq({1, 2, 1, 2, 1, 2, 3, 4, 3, 4}, 8));
    const BpeModel m = bpe_train(corpus, 16);

    const auto path = (std::filesystem::temp_directory_path() / "dsu_bpe.json").string();
    save_bpe_model(m, path);
    const BpeModel loaded = load_bpe_model(path);
    CHECK(loaded.base_vocab_size == m.base_vocab_size);
    CHECK(loaded.merges == m.merges);
    std::filesystem::remove(path);

    const UnitSequence s = make_seq({1, 2, 3, 4, 1, 2}, 8);
    CHECK(bpe_encode(loaded, s).tokens == bpe_encode(m, s).tokens);
}

TEST_CASE("sequence text files: round trip") {
    std::vector<UnitSequence> seqs = {make_seq({1, 2, 3}, 5), make_seq({}, 5)};
    seqs[0].utterance_id = "a";
    seqs[1].utterance_id = "b";
    const auto path = (std::filesystem::temp_directory_path() / "dsu_units.tsv").string();
    save_unit_sequences(seqs, path);
    const auto loaded = load_unit_sequences(path, 5, "tag");
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].units == seqs[0].units);
    CHECK(loaded[1].units.empty());
    CHECK(loaded[0].stream_tag == "tag");
    std::filesystem::remove(path);
}
