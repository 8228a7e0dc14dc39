#include "patchkit/corruption.hpp"
#include "patchkit/errors.hpp"
#include "patchkit/model.hpp"

#include "helpers.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace patchkit;
using testutil::fixture_vocab;
using testutil::toy_model;

namespace {

TokenSequence ioi_seq() {
    const Vocab& vocab = fixture_vocab();
    TokenSequence seq =
        encode("When Mary and John went to the store, John gave a drink to", vocab);
    seq.spans["IO"] = locate_span(seq, vocab, " Mary", 1);
    seq.spans["S1"] = locate_span(seq, vocab, " John", 1);
    seq.spans["S2"] = locate_span(seq, vocab, " John", 2);
    return seq;
}

// A model with a hand-set embedding table, for noise-scale arithmetic.
Model tiny_model_with_embeddings(std::vector<std::vector<float>> rows) {
    Model m;
    m.config.n_layers = 1;
    m.config.n_heads = 1;
    m.config.d_model = static_cast<int>(rows[0].size());
    m.config.d_mlp = 4;
    m.config.vocab_size = static_cast<int>(rows.size());
    m.config.max_positions = 8;
    m.weights.token_embedding = Matrix(m.config.vocab_size, m.config.d_model);
    for (size_t r = 0; r < rows.size(); ++r)
        for (size_t c = 0; c < rows[r].size(); ++c)
            m.weights.token_embedding.at(static_cast<int>(r), static_cast<int>(c)) = rows[r][c];
    m.weights.position_embedding = Matrix(m.config.max_positions, m.config.d_model);
    return m;
}

} // namespace

TEST_SUITE("corruption") {

TEST_CASE("noise scale: constant embedding gives zero, known values check out") {
    const Model m = tiny_model_with_embeddings({{2, 2}, {1, 3}});

    TokenSequence constant;
    constant.ids = {0};
    CHECK(embedding_noise_scale({constant}, m, 3.0) == doctest::Approx(0.0));

    // Tokens {0, 1}: entries {2, 2, 1, 3}, mean 2, population variance 1/2.
    TokenSequence both;
    both.ids = {0, 1};
    CHECK(embedding_noise_scale({both}, m, 3.0) ==
          doctest::Approx(3.0 * std::sqrt(0.5)).epsilon(1e-9));

    // Occurrences are weighted: {0, 0, 1} counts token 0 twice.
    TokenSequence weighted;
    weighted.ids = {0, 0, 1};
    const double mean = (2 + 2 + 2 + 2 + 1 + 3) / 6.0;
    double var = 0;
    for (const double v : {2.0, 2.0, 2.0, 2.0, 1.0, 3.0}) var += (v - mean) * (v - mean);
    var /= 6.0;
    CHECK(embedding_noise_scale({weighted}, m, 3.0) ==
          doctest::Approx(3.0 * std::sqrt(var)).epsilon(1e-9));

    CHECK_THROWS_AS(embedding_noise_scale({}, m, 3.0), ConfigError);
}

TEST_CASE("corrupt_gn is deterministic under the seed") {
    const Model& m = toy_model();
    const TokenSequence seq = ioi_seq();
    const EmbeddingOverride a = corrupt_gn(seq, {"S2"}, 1.5, m, 7);
    const EmbeddingOverride b = corrupt_gn(seq, {"S2"}, 1.5, m, 7);
    CHECK(a.positions == b.positions);
    CHECK(a.rows.data == b.rows.data);
    const EmbeddingOverride c = corrupt_gn(seq, {"S2"}, 1.5, m, 8);
    CHECK(a.rows.data != c.rows.data);
}

TEST_CASE("corrupt_gn touches exactly the target positions") {
    const Model& m = toy_model();
    const TokenSequence seq = ioi_seq();
    const EmbeddingOverride ov = corrupt_gn(seq, {"S1", "IO"}, 1.0, m, 3);
    std::set<int> want;
    for (const std::string label : {"S1", "IO"}) {
        const Span s = seq.span(label);
        for (int p = s.begin; p < s.end; ++p) want.insert(p);
    }
    CHECK(std::set<int>(ov.positions.begin(), ov.positions.end()) == want);
}

TEST_CASE("corrupt_gn with an unresolved span is a span error") {
    const Model& m = toy_model();
    CHECK_THROWS_AS(corrupt_gn(ioi_seq(), {"YY"}, 1.0, m, 0), SpanError);
}

TEST_CASE("nu = 0 leaves the forward pass untouched") {
    const Model& m = toy_model();
    const TokenSequence seq = ioi_seq();
    const EmbeddingOverride ov = corrupt_gn(seq, {"S2"}, 0.0, m, 11);

    const ForwardRecord plain = forward(m, seq.ids);
    ForwardOptions opt;
    opt.embed_override = &ov;
    const ForwardRecord with_override = forward(m, seq.ids, opt);
    for (size_t i = 0; i < plain.logits.data.size(); ++i)
        CHECK(plain.logits.data[i] == with_override.logits.data[i]);
}

TEST_CASE("replace_span validates lengths and boundary merges") {
    const Vocab& vocab = fixture_vocab();
    const TokenSequence seq = ioi_seq();

    // Length mismatch.
    const std::vector<int> two = {seq.ids[0], seq.ids[1]};
    CHECK_THROWS_AS(replace_span(seq, "S2", two, vocab), AlignmentError);

    // Valid swap keeps length and updates the text.
    const Span io = seq.span("IO");
    const std::vector<int> repl(seq.ids.begin() + io.begin, seq.ids.begin() + io.end);
    const TokenSequence swapped = replace_span(seq, "S2", repl, vocab);
    CHECK(swapped.length() == seq.length());
    CHECK(swapped.text != seq.text);
    CHECK(decode(swapped.ids, vocab) == swapped.text);

    // A replacement that merges across the splice boundary must throw:
    // "17 45" -> replace the middle " " with "1" -> "17145" re-encodes as
    // [17][14][5], not [17][1][45].
    TokenSequence digits = encode("17 45", vocab);
    REQUIRE(digits.length() == 3);
    digits.spans["mid"] = Span{1, 2};
    const std::vector<int> one = {vocab.id_of("1")};
    REQUIRE(one[0] >= 0);
    CHECK_THROWS_AS(replace_span(digits, "mid", one, vocab), AlignmentError);
}

TEST_CASE("corrupt_str draws a length-matched replacement from the pool") {
    const Vocab& vocab = fixture_vocab();
    const TokenSequence seq = ioi_seq();

    CorruptionSpec spec;
    spec.method = CorruptionMethod::STR;
    spec.targets = {"S2"};
    spec.replacement_pool = {" Alice", " Bob", " Carol"};

    Rng rng(5);
    const TokenSequence corrupted = corrupt_str(seq, spec, vocab, rng);
    CHECK(corrupted.length() == seq.length());
    const Span s2 = corrupted.span("S2");
    const std::string got =
        decode(std::vector<int>(corrupted.ids.begin() + s2.begin, corrupted.ids.begin() + s2.end),
               vocab);
    CHECK((got == " Alice" || got == " Bob" || got == " Carol"));
    CHECK(got != " John");

    Rng rng2(5);
    const TokenSequence again = corrupt_str(seq, spec, vocab, rng2);
    CHECK(again.ids == corrupted.ids);

    CorruptionSpec empty = spec;
    empty.replacement_pool.clear();
    Rng rng3(0);
    CHECK_THROWS_AS(corrupt_str(seq, empty, vocab, rng3), ConfigError);

    CorruptionSpec misfit = spec;
    misfit.replacement_pool = {"totally unrelated multi token junk"};
    Rng rng4(0);
    CHECK_THROWS_AS(corrupt_str(seq, misfit, vocab, rng4), AlignmentError);
}

TEST_CASE("corrupt_abc replaces all three names with fresh distinct ones") {
    const Vocab& vocab = fixture_vocab();
    const TokenSequence seq = ioi_seq();

    CorruptionSpec spec;
    spec.method = CorruptionMethod::ABC;
    spec.replacement_pool = {" Alice", " Bob", " Carol", " David", " Emma"};

    Rng rng(9);
    const TokenSequence abc = corrupt_abc(seq, spec, vocab, rng);
    CHECK(abc.length() == seq.length());

    std::set<std::string> fresh;
    for (const std::string label : {"S1", "S2", "IO"}) {
        const Span s = abc.span(label);
        const std::string name = decode(
            std::vector<int>(abc.ids.begin() + s.begin, abc.ids.begin() + s.end), vocab);
        CHECK(name != " John");
        CHECK(name != " Mary");
        fresh.insert(name);
    }
    CHECK(fresh.size() == 3); // three distinct names

    // Degenerate pool of exactly three usable names is deterministic.
    CorruptionSpec tight = spec;
    tight.replacement_pool = {" Alice", " Bob", " Carol"};
    Rng rng_a(3), rng_b(3);
    CHECK(corrupt_abc(seq, tight, vocab, rng_a).ids == corrupt_abc(seq, tight, vocab, rng_b).ids);

    // Pool that cannot provide three fresh names fails loudly.
    CorruptionSpec starved = spec;
    starved.replacement_pool = {" Alice", " Bob", " John"};
    Rng rng_c(1);
    CHECK_THROWS_AS(corrupt_abc(seq, starved, vocab, rng_c), ConfigError);
}

} // TEST_SUITE
