#include "patchkit/corruption.hpp"
#include "patchkit/errors.hpp"
#include "patchkit/intervention.hpp"

#include "helpers.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <map>

using namespace patchkit;
using testutil::fixture_vocab;
using testutil::toy_model;

namespace {

// A small STR-style pair: S2 replaced by IO.
PromptPair make_ioi_pair() {
    const Vocab& vocab = fixture_vocab();
    TokenSequence clean =
        encode("When Mary and John went to the store, John gave a drink to", vocab);
    clean.spans["IO"] = locate_span(clean, vocab, " Mary", 1);
    clean.spans["S1"] = locate_span(clean, vocab, " John", 1);
    clean.spans["S2"] = locate_span(clean, vocab, " John", 2);

    PromptPair pair;
    pair.r = clean.ids[static_cast<size_t>(clean.span("IO").begin)];
    pair.r_prime = clean.ids[static_cast<size_t>(clean.span("S1").begin)];
    const Span io = clean.span("IO");
    const std::vector<int> repl(clean.ids.begin() + io.begin, clean.ids.begin() + io.end);
    pair.corrupt = replace_span(clean, "S2", repl, vocab);
    pair.clean = std::move(clean);
    return pair;
}

} // namespace

TEST_SUITE("intervention") {

TEST_CASE("empty patch template: patched equals corrupted") {
    const PromptPair pair = make_ioi_pair();
    const RunTriple triple = run_triple(toy_model(), pair, PatchTemplate{});
    CHECK(triple.patched.logits.data == triple.corrupted.logits.data);
}

TEST_CASE("patching every site restores the clean run") {
    const Model& m = toy_model();
    const PromptPair pair = make_ioi_pair();

    PatchTemplate all;
    for (const SiteKey& key : all_sites(m.config).keys)
        all.sites.push_back({key.kind, key.layer, key.head, PositionSel::all()});

    const RunTriple triple = run_triple(m, pair, all);
    REQUIRE(triple.patched.logits.data.size() == triple.clean.logits.data.size());
    double worst = 0.0;
    for (size_t i = 0; i < triple.patched.logits.data.size(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(triple.patched.logits.data[i]) -
                                         triple.clean.logits.data[i]));
    CHECK(worst <= 1e-5);
}

TEST_CASE("patched run reuses the identical corrupted input") {
    // For GN pairs the corrupted tokens are the clean tokens plus an
    // embedding override; corrupted and patched runs must agree bit-for-bit
    // wherever nothing is patched.
    const Model& m = toy_model();
    PromptPair pair = make_ioi_pair();
    pair.corrupt = pair.clean;
    pair.override_rows = corrupt_gn(pair.clean, {"S2"}, 0.5, m, 42);

    const RunTriple triple = run_triple(m, pair, PatchTemplate{});
    CHECK(triple.patched.logits.data == triple.corrupted.logits.data);
}

TEST_CASE("length mismatch is an alignment error") {
    const Vocab& vocab = fixture_vocab();
    PromptPair pair;
    pair.clean = encode("hello world", vocab);
    pair.corrupt = encode("hello", vocab);
    pair.r = 0;
    pair.r_prime = 1;
    CHECK_THROWS_AS(run_triple(toy_model(), pair, PatchTemplate{}), AlignmentError);
}

TEST_CASE("patch effects are local to downstream layers") {
    const Model& m = toy_model();
    const PromptPair pair = make_ioi_pair();

    PatchTemplate patch;
    patch.sites.push_back({SiteKind::MlpOut, 1, -1, PositionSel::all()});
    CaptureSet extra;
    extra.add(SiteKind::ResidPost, 0);
    extra.add(SiteKind::AttnSublayerOut, 1);

    const RunTriple triple = run_triple(m, pair, patch, extra);
    const Matrix& corrupted_r0 = triple.corrupted.cache->at({SiteKind::ResidPost, 0, -1});
    const Matrix& patched_r0 = triple.patched.cache->at({SiteKind::ResidPost, 0, -1});
    CHECK(corrupted_r0.data == patched_r0.data);
    const Matrix& corrupted_a1 = triple.corrupted.cache->at({SiteKind::AttnSublayerOut, 1, -1});
    const Matrix& patched_a1 = triple.patched.cache->at({SiteKind::AttnSublayerOut, 1, -1});
    CHECK(corrupted_a1.data == patched_a1.data);
}

TEST_CASE("resolving the same patch twice gives identical runs") {
    const Model& m = toy_model();
    const PromptPair pair = make_ioi_pair();
    const PatchTemplate patch = head_out_patch(1, 1);
    const RunTriple a = run_triple(m, pair, patch);
    const RunTriple b = run_triple(m, pair, patch);
    CHECK(a.patched.logits.data == b.patched.logits.data);
}

TEST_CASE("attention mass over all positions is one") {
    const Model& m = toy_model();
    const PromptPair pair = make_ioi_pair();

    CaptureSet extra;
    extra.add(SiteKind::AttnPattern, 0, 0);
    const RunTriple triple = run_triple(m, pair, PatchTemplate{}, extra);

    const int n = pair.clean.length();
    const double total = attention_to_span(triple.clean, 0, 0, n - 1, Span{0, n});
    CHECK(total == doctest::Approx(1.0).epsilon(1e-5));

    // Also valid on the corrupted and patched records.
    CHECK(attention_to_span(triple.corrupted, 0, 0, n - 1, Span{0, n}) ==
          doctest::Approx(1.0).epsilon(1e-5));
    CHECK(attention_to_span(triple.patched, 0, 0, n - 1, Span{0, n}) ==
          doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("attention_to_span needs a captured pattern") {
    const Model& m = toy_model();
    const PromptPair pair = make_ioi_pair();
    const RunTriple triple = run_triple(m, pair, PatchTemplate{});
    CHECK_THROWS_AS(attention_to_span(triple.clean, 0, 0, 1, Span{0, 1}), CacheMissError);
}

TEST_CASE("value_patch_spec selects attn_value sites at all positions") {
    const PatchTemplate t = value_patch_spec({{7, 3}, {8, 6}});
    REQUIRE(t.sites.size() == 2);
    CHECK(t.sites[0].kind == SiteKind::AttnValue);
    CHECK(t.sites[0].layer == 7);
    CHECK(t.sites[0].head == 3);
    CHECK(t.sites[1].layer == 8);
    CHECK(t.sites[1].head == 6);
    CHECK(t.sites[0].positions.kind == PositionSel::Kind::All);

    // Empty head list is a no-op patch.
    const PromptPair pair = make_ioi_pair();
    const RunTriple triple = run_triple(toy_model(), pair, value_patch_spec({}));
    CHECK(triple.patched.logits.data == triple.corrupted.logits.data);
}

TEST_CASE("value patching changes the patched run only") {
    const Model& m = toy_model();
    const PromptPair pair = make_ioi_pair();
    const RunTriple triple = run_triple(m, pair, value_patch_spec({{0, 0}, {1, 1}}));
    CHECK(triple.patched.logits.data != triple.corrupted.logits.data);
    CHECK(triple.clean.logits.data != triple.patched.logits.data);
}

TEST_CASE("patching a head's output equals patching its slice of the sublayer output") {
    // The output projection is linear per head, so restoring z at (l, h)
    // moves the sublayer output by (z_clean - z_corrupt) W_O(h); patching
    // the sublayer output with that synthesized value must give the same
    // logits.
    const Model& m = toy_model();
    const PromptPair pair = make_ioi_pair();
    const int layer = 1, head = 0;

    CaptureSet capture;
    capture.add(SiteKind::HeadOut, layer, head);
    capture.add(SiteKind::AttnSublayerOut, layer);

    ForwardOptions copt;
    copt.capture = &capture;
    const ForwardRecord clean = forward(m, pair.clean.ids, copt);
    const ForwardRecord corrupted = forward(m, pair.corrupt.ids, copt);

    // Route 1: patch head_out from the clean cache.
    PatchSpec patch_z;
    patch_z.source = clean.cache.get();
    patch_z.sites = {HookSite{SiteKind::HeadOut, layer, head, {}}};
    ForwardOptions popt1;
    popt1.patches = &patch_z;
    const ForwardRecord via_z = forward(m, pair.corrupt.ids, popt1);

    // Route 2: patch the sublayer output with corrupt + (z_cl - z_*) W_O.
    const Matrix& z_clean = clean.cache->at({SiteKind::HeadOut, layer, head});
    const Matrix& z_corrupt = corrupted.cache->at({SiteKind::HeadOut, layer, head});
    Matrix z_diff = z_clean;
    for (size_t i = 0; i < z_diff.data.size(); ++i) z_diff.data[i] -= z_corrupt.data[i];
    const Matrix delta = head_residual_delta(m, z_diff, layer, head);

    ActivationCache synth;
    synth.seq_len = pair.corrupt.length();
    Matrix sublayer = corrupted.cache->at({SiteKind::AttnSublayerOut, layer, -1});
    for (size_t i = 0; i < sublayer.data.size(); ++i) sublayer.data[i] += delta.data[i];
    synth.entries[{SiteKind::AttnSublayerOut, layer, -1}] = std::move(sublayer);

    PatchSpec patch_sub;
    patch_sub.source = &synth;
    patch_sub.sites = {HookSite{SiteKind::AttnSublayerOut, layer, -1, {}}};
    ForwardOptions popt2;
    popt2.patches = &patch_sub;
    const ForwardRecord via_sublayer = forward(m, pair.corrupt.ids, popt2);

    REQUIRE(via_z.logits.data.size() == via_sublayer.logits.data.size());
    for (size_t i = 0; i < via_z.logits.data.size(); ++i)
        CHECK(via_z.logits.data[i] ==
              doctest::Approx(via_sublayer.logits.data[i]).epsilon(1e-4).scale(1.0));
}

TEST_CASE("patched runs match the reference hook implementation") {
    // tests/data/toy/patch_cases.json holds final-position logits of patched
    // runs computed by an independent hook-based implementation on the same
    // checkpoint; every site kind must reproduce them.
    std::ifstream in(testutil::test_data("toy/patch_cases.json"));
    REQUIRE(in.good());
    nlohmann::json spec;
    in >> spec;

    const Model& m = toy_model();
    const std::vector<int> clean_ids = spec.at("clean_ids").get<std::vector<int>>();
    const std::vector<int> corrupt_ids = spec.at("corrupt_ids").get<std::vector<int>>();

    static const std::map<std::string, SiteKind> kKinds = {
        {"embed_out", SiteKind::EmbedOut},
        {"attn_pattern", SiteKind::AttnPattern},
        {"attn_value", SiteKind::AttnValue},
        {"head_out", SiteKind::HeadOut},
        {"attn_sublayer_out", SiteKind::AttnSublayerOut},
        {"mlp_out", SiteKind::MlpOut},
        {"resid_post", SiteKind::ResidPost},
    };

    CaptureSet capture;
    for (const auto& c : spec.at("cases"))
        capture.add(kKinds.at(c.at("kind").get<std::string>()), c.at("layer").get<int>(),
                    c.at("head").get<int>());
    ForwardOptions clean_opt;
    clean_opt.capture = &capture;
    const ForwardRecord clean = forward(m, clean_ids, clean_opt);

    for (const auto& c : spec.at("cases")) {
        const std::string kind = c.at("kind").get<std::string>();
        CAPTURE(kind);
        PatchSpec patch;
        patch.source = clean.cache.get();
        patch.sites = {HookSite{kKinds.at(kind), c.at("layer").get<int>(),
                                c.at("head").get<int>(),
                                c.at("positions").get<std::vector<int>>()}};
        ForwardOptions popt;
        popt.patches = &patch;
        const ForwardRecord patched = forward(m, corrupt_ids, popt);

        const auto want = c.at("final_logits").get<std::vector<double>>();
        const auto got = patched.final_logits();
        REQUIRE(got.size() == want.size());
        double worst = 0.0;
        for (size_t i = 0; i < got.size(); ++i)
            worst = std::max(worst, std::abs(static_cast<double>(got[i]) - want[i]));
        CHECK(worst < 2e-4);
    }
}

TEST_CASE("position selectors resolve against the prompt") {
    const PromptPair pair = make_ioi_pair();
    CHECK(PositionSel::all().resolve(pair.clean).empty());
    CHECK(PositionSel::fixed(3).resolve(pair.clean) == std::vector<int>{3});
    CHECK_THROWS_AS(PositionSel::fixed(1000).resolve(pair.clean), PatchError);
    const Span s2 = pair.clean.span("S2");
    CHECK(PositionSel::span_last("S2").resolve(pair.clean) == std::vector<int>{s2.end - 1});
    CHECK_THROWS_AS(PositionSel::span_last("XX").resolve(pair.clean), SpanError);
    const auto all_s2 = PositionSel::span_all("S2").resolve(pair.clean);
    CHECK(static_cast<int>(all_s2.size()) == s2.size());
}

} // TEST_SUITE
