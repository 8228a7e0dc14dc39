#include "patchkit/errors.hpp"
#include "patchkit/rng.hpp"
#include "patchkit/tokenizer.hpp"

#include "helpers.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <fstream>

using namespace patchkit;
using testutil::fixture_vocab;

TEST_SUITE("tokenizer") {

TEST_CASE("encode matches the reference tokenizer on the frozen cases") {
    const Vocab& vocab = fixture_vocab();
    std::ifstream in(testutil::test_data("bpe_cases.json"));
    REQUIRE(in.good());
    nlohmann::json cases;
    in >> cases;
    REQUIRE(cases.size() > 10);

    for (const auto& c : cases) {
        const std::string text = c.at("text").get<std::string>();
        const std::vector<int> want = c.at("ids").get<std::vector<int>>();
        CAPTURE(text);
        const TokenSequence seq = encode(text, vocab);
        CHECK(seq.ids == want);
        CHECK(decode(seq.ids, vocab) == text);
    }
}

TEST_CASE("empty input") {
    const Vocab& vocab = fixture_vocab();
    CHECK(encode("", vocab).ids.empty());
    CHECK(decode(std::vector<int>{}, vocab).empty());
}

TEST_CASE("round trip holds for arbitrary UTF-8") {
    const Vocab& vocab = fixture_vocab();
    Rng rng(17);
    const std::vector<uint32_t> pool = {'a', 'Z', '0', '9', ' ', '\n', '\t', '\'', '!', ',',
                                        0xE9, 0x3B1, 0x4E16, 0x1F600, 0x2615};
    for (int trial = 0; trial < 200; ++trial) {
        std::string text;
        const int len = static_cast<int>(rng.uniform(20));
        for (int i = 0; i < len; ++i) {
            const uint32_t cp = pool[rng.uniform(pool.size())];
            if (cp < 0x80) {
                text.push_back(static_cast<char>(cp));
            } else if (cp < 0x800) {
                text.push_back(static_cast<char>(0xC0 | (cp >> 6)));
                text.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
            } else if (cp < 0x10000) {
                text.push_back(static_cast<char>(0xE0 | (cp >> 12)));
                text.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
                text.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
            } else {
                text.push_back(static_cast<char>(0xF0 | (cp >> 18)));
                text.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
                text.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
                text.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
            }
        }
        CAPTURE(text);
        CHECK(decode(encode(text, vocab).ids, vocab) == text);
    }
}

TEST_CASE("decode rejects out-of-range ids") {
    const Vocab& vocab = fixture_vocab();
    const std::vector<int> ids = {vocab.size()};
    CHECK_THROWS_AS(decode(ids, vocab), VocabError);
    const std::vector<int> neg = {-1};
    CHECK_THROWS_AS(decode(neg, vocab), VocabError);
}

TEST_CASE("locate_span finds the requested occurrence") {
    const Vocab& vocab = fixture_vocab();
    const TokenSequence seq =
        encode("When Mary and John went to the store, John gave a drink to Mary", vocab);

    const Span s2 = locate_span(seq, vocab, " John", 2);
    CHECK(s2.size() == 1);
    CHECK(decode(std::vector<int>{seq.ids[static_cast<size_t>(s2.begin)]}, vocab) == " John");

    const Span first = locate_span(seq, vocab, " John", 1);
    CHECK(first.begin < s2.begin);

    CHECK_THROWS_AS(locate_span(seq, vocab, " John", 3), SpanError);
    CHECK_THROWS_AS(locate_span(seq, vocab, " Zelda", 1), SpanError);
}

TEST_CASE("locate_span signals misaligned surfaces") {
    const Vocab& vocab = fixture_vocab();
    const TokenSequence seq = encode("When Mary and John went to the store", vocab);
    // "ohn" sits inside the " John" token.
    CHECK_THROWS_AS(locate_span(seq, vocab, "ohn", 1), AlignmentError);
}

TEST_CASE("locate_span on the year digits") {
    const Vocab& vocab = fixture_vocab();
    const TokenSequence seq = encode("The war lasted from the year 1745 to the year 17", vocab);
    const Span yy = locate_span(seq, vocab, "45", 1);
    CHECK(yy.size() == 1);
    CHECK(decode(std::vector<int>{seq.ids[static_cast<size_t>(yy.begin)]}, vocab) == "45");
}

TEST_CASE("locate_span covers a multi-token subject") {
    const Vocab& vocab = fixture_vocab();
    const TokenSequence seq = encode("The Eiffel Tower is in", vocab);
    const Span subject = locate_span(seq, vocab, "The Eiffel Tower", 1);
    CHECK(subject.begin == 0);
    CHECK(subject.size() > 1);
    const std::vector<int> ids(seq.ids.begin() + subject.begin, seq.ids.begin() + subject.end);
    CHECK(decode(ids, vocab) == "The Eiffel Tower");
}

TEST_CASE("vocab loader rejects malformed inputs") {
    testutil::TempDir tmp("vocab");
    // Non-dense ids.
    testutil::write_file(tmp.file("vocab.json"), R"({"a": 0, "b": 2})");
    testutil::write_file(tmp.file("merges.txt"), "#version: 0.2\n");
    CHECK_THROWS_AS(Vocab::load(tmp.file("vocab.json"), tmp.file("merges.txt")), LoadError);

    // Merge references a token missing from the vocab.
    testutil::write_file(tmp.file("vocab2.json"), R"({"a": 0, "b": 1, "ab": 2})");
    testutil::write_file(tmp.file("merges2.txt"), "#version: 0.2\na c\n");
    CHECK_THROWS_AS(Vocab::load(tmp.file("vocab2.json"), tmp.file("merges2.txt")), LoadError);

    CHECK_THROWS_AS(Vocab::load(tmp.file("absent.json"), tmp.file("merges.txt")), LoadError);
}

TEST_CASE("encode is deterministic") {
    const Vocab& vocab = fixture_vocab();
    const std::string text = "Then, Alice and Bob went to the office. Alice gave a book to";
    const TokenSequence a = encode(text, vocab);
    const TokenSequence b = encode(text, vocab);
    CHECK(a.ids == b.ids);
    CHECK(a.spans.at("last").begin == a.length() - 1);
}

} // TEST_SUITE
