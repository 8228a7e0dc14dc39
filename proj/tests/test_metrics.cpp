#include "patchkit/errors.hpp"
#include "patchkit/metrics.hpp"
#include "patchkit/rng.hpp"

#include <doctest.h>

#include <cmath>

using namespace patchkit;

namespace {

std::vector<float> logits_from_probs(const std::vector<double>& probs) {
    std::vector<float> out;
    out.reserve(probs.size());
    for (const double p : probs) out.push_back(static_cast<float>(std::log(p)));
    return out;
}

std::vector<float> random_logits(Rng& rng, int n, double scale = 5.0) {
    std::vector<float> out(static_cast<size_t>(n));
    for (float& v : out) v = static_cast<float>((rng.next_double() * 2 - 1) * scale);
    return out;
}

TripleView make_view(const std::vector<float>& clean, const std::vector<float>& corrupt,
                     const std::vector<float>& patched, int r, int rp) {
    TripleView v;
    v.clean_logits = clean;
    v.corrupt_logits = corrupt;
    v.patched_logits = patched;
    v.r = r;
    v.r_prime = rp;
    return v;
}

// Independent oracle: explicit softmax probabilities, then sum p*log(p/q).
double kl_oracle(const std::vector<float>& p_logits, const std::vector<float>& q_logits) {
    const auto probs = [](const std::vector<float>& logits) {
        double maxv = logits[0];
        for (const float v : logits) maxv = std::max(maxv, static_cast<double>(v));
        std::vector<double> out;
        double sum = 0;
        for (const float v : logits) {
            out.push_back(std::exp(v - maxv));
            sum += out.back();
        }
        for (double& v : out) v /= sum;
        return out;
    };
    const auto p = probs(p_logits), q = probs(q_logits);
    double kl = 0;
    for (size_t i = 0; i < p.size(); ++i) kl += p[i] * std::log(p[i] / q[i]);
    return kl;
}

} // namespace

TEST_SUITE("metrics") {

TEST_CASE("probability effect: zero at baseline, bounded by the corrupted mass") {
    Rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        const auto clean = random_logits(rng, 12);
        const auto corrupt = random_logits(rng, 12);
        const auto patched = random_logits(rng, 12);
        const int r = static_cast<int>(rng.uniform(12));

        const TripleView self = make_view(clean, corrupt, corrupt, r, (r + 1) % 12);
        CHECK(effect_prob(self) == doctest::Approx(0.0));

        const TripleView v = make_view(clean, corrupt, patched, r, (r + 1) % 12);
        const double p_star = softmax_prob(corrupt, r);
        const double e = effect_prob(v);
        CHECK(e >= -p_star - 1e-12);
        CHECK(e <= 1.0 - p_star + 1e-12);
    }
}

TEST_CASE("normalized logit difference: 1 at clean, 0 at corrupted") {
    Rng rng(32);
    const auto clean = random_logits(rng, 8);
    const auto corrupt = random_logits(rng, 8);
    const TripleView at_clean = make_view(clean, corrupt, clean, 2, 5);
    CHECK(effect_logit_diff(at_clean).value() == doctest::Approx(1.0));
    const TripleView at_corrupt = make_view(clean, corrupt, corrupt, 2, 5);
    CHECK(effect_logit_diff(at_corrupt).value() == doctest::Approx(0.0));
}

TEST_CASE("normalized logit difference is shift invariant") {
    Rng rng(33);
    auto clean = random_logits(rng, 10);
    auto corrupt = random_logits(rng, 10);
    auto patched = random_logits(rng, 10);
    const double base = effect_logit_diff(make_view(clean, corrupt, patched, 1, 7)).value();

    for (float& v : clean) v += 3.25f;
    for (float& v : corrupt) v -= 1.5f;
    for (float& v : patched) v += 0.625f;
    const double shifted = effect_logit_diff(make_view(clean, corrupt, patched, 1, 7)).value();
    CHECK(shifted == doctest::Approx(base).epsilon(1e-4));
}

TEST_CASE("degenerate normalization is excluded, not computed") {
    const std::vector<float> same = {1.0f, 2.0f, 3.0f};
    CHECK_FALSE(effect_logit_diff(make_view(same, same, same, 0, 1)).has_value());
}

TEST_CASE("KL effect: exact zero at the corrupted baseline, nonnegative first term") {
    Rng rng(34);
    const auto clean = random_logits(rng, 30);
    const auto corrupt = random_logits(rng, 30);
    const TripleView at_corrupt = make_view(clean, corrupt, corrupt, 0, 1);
    CHECK(effect_kl(at_corrupt) == doctest::Approx(0.0));

    // Self-patch triple (patched == clean): effect = KL(cl || corrupted) >= 0.
    const TripleView at_clean = make_view(clean, corrupt, clean, 0, 1);
    CHECK(effect_kl(at_clean) >= 0.0);
    CHECK(effect_kl(at_clean) == doctest::Approx(kl_oracle(clean, corrupt)).epsilon(1e-9));
}

TEST_CASE("KL effect matches the direct-summation oracle on random rows") {
    Rng rng(35);
    for (int trial = 0; trial < 50; ++trial) {
        const auto clean = random_logits(rng, 25);
        const auto corrupt = random_logits(rng, 25);
        const auto patched = random_logits(rng, 25);
        const double want = kl_oracle(clean, corrupt) - kl_oracle(clean, patched);
        const double got = effect_kl(make_view(clean, corrupt, patched, 0, 1));
        CHECK(got == doctest::Approx(want).epsilon(1e-9));
    }
}

TEST_CASE("relative-probability metric: baseline zero and the doubled-probability case") {
    const auto corrupt = logits_from_probs({0.1, 0.3, 0.6});
    const auto clean = logits_from_probs({0.5, 0.2, 0.3});

    CHECK(effect_stolfo(make_view(clean, corrupt, corrupt, 0, 1)).value() ==
          doctest::Approx(0.0));

    // P_pt(r) = 2 P_*(r), P_pt(r') = P_*(r')  ->  1/2 * (1 + 0) = 0.5.
    const auto patched = logits_from_probs({0.2, 0.3, 0.5});
    CHECK(effect_stolfo(make_view(clean, corrupt, patched, 0, 1)).value() ==
          doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("relative-probability metric refuses tiny denominators") {
    // P_*(r) below the guard: excluded.
    std::vector<float> corrupt = {-40.0f, 5.0f, 5.0f};
    std::vector<float> ok = {0.0f, 0.0f, 0.0f};
    CHECK_FALSE(effect_stolfo(make_view(ok, corrupt, ok, 0, 1)).has_value());
    // P_pt(r') below the guard: excluded.
    std::vector<float> patched = {5.0f, -40.0f, 5.0f};
    CHECK_FALSE(effect_stolfo(make_view(ok, ok, patched, 0, 1)).has_value());
}

TEST_CASE("answer-set metrics") {
    Rng rng(36);
    const auto clean = random_logits(rng, 10);
    const auto corrupt = random_logits(rng, 10);
    const std::vector<int> greater = {5, 6, 7};
    const std::vector<int> less = {1, 2};

    TripleView v = make_view(clean, corrupt, clean, -1, -1);
    v.greater_set = greater;
    v.less_set = less;
    CHECK(effect_answer_set(v, AnswerSetVariant::LogitDiff).value() == doctest::Approx(1.0));

    TripleView at_corrupt = make_view(clean, corrupt, corrupt, -1, -1);
    at_corrupt.greater_set = greater;
    at_corrupt.less_set = less;
    CHECK(effect_answer_set(at_corrupt, AnswerSetVariant::Prob).value() == doctest::Approx(0.0));
    CHECK(effect_answer_set(at_corrupt, AnswerSetVariant::LogitDiff).value() ==
          doctest::Approx(0.0));

    // Empty greater set (the YY = 99 boundary) is an error.
    TripleView empty = make_view(clean, corrupt, clean, -1, -1);
    empty.less_set = less;
    CHECK_THROWS_AS(effect_answer_set(empty, AnswerSetVariant::Prob), ConfigError);
}

TEST_CASE("detection: 2-SD rule with planted outliers") {
    EffectMatrix mx;
    mx.metrics = {Metric::Prob};
    const int n = 144;
    for (int i = 0; i < n; ++i) {
        TargetDesc d;
        d.layer = i / 12;
        d.head = i % 12;
        mx.targets.push_back(d);
        mx.effects.push_back({0.01});
    }
    // Plant a strong positive at 9.9 and a strong negative at 10.7.
    mx.effects[static_cast<size_t>(9 * 12 + 9)][0] = 0.9;
    mx.effects[static_cast<size_t>(10 * 12 + 7)][0] = -0.9;
    mx.excluded_prompts = {0};
    mx.excluded_cells = {0};
    mx.finalize_stats();

    const Detection det = detect(mx, Metric::Prob);
    REQUIRE(det.positive.size() == 1);
    REQUIRE(det.negative.size() == 1);
    CHECK(mx.targets[static_cast<size_t>(det.positive[0])].label() == "9.9");
    CHECK(mx.targets[static_cast<size_t>(det.negative[0])].label() == "10.7");
}

TEST_CASE("detection: equal effects detect nothing") {
    EffectMatrix mx;
    mx.metrics = {Metric::Prob};
    for (int i = 0; i < 10; ++i) {
        TargetDesc d;
        d.layer = i;
        d.head = 0;
        mx.targets.push_back(d);
        mx.effects.push_back({0.25});
    }
    mx.excluded_prompts = {0};
    mx.excluded_cells = {0};
    mx.finalize_stats();
    const Detection det = detect(mx, Metric::Prob);
    CHECK(det.positive.empty());
    CHECK(det.negative.empty());
    CHECK(det.sd == doctest::Approx(0.0));
}

TEST_CASE("detection is invariant under affine rescaling of the column") {
    Rng rng(37);
    EffectMatrix mx;
    mx.metrics = {Metric::Kl};
    for (int i = 0; i < 60; ++i) {
        TargetDesc d;
        d.layer = i;
        mx.targets.push_back(d);
        mx.effects.push_back({rng.next_double()});
    }
    mx.effects[7][0] += 40.0;
    mx.effects[13][0] -= 40.0;
    mx.excluded_prompts = {0};
    mx.excluded_cells = {0};
    mx.finalize_stats();
    const Detection base = detect(mx, Metric::Kl);

    EffectMatrix scaled = mx;
    for (auto& row : scaled.effects) row[0] = row[0] * -2.5 + 17.0;
    scaled.finalize_stats();
    const Detection after = detect(scaled, Metric::Kl);

    // Negative scaling flips the sign groups but preserves the sets.
    CHECK(after.positive == base.negative);
    CHECK(after.negative == base.positive);
}

TEST_CASE("detection requires at least two targets") {
    EffectMatrix mx;
    mx.metrics = {Metric::Prob};
    TargetDesc d;
    d.layer = 0;
    mx.targets.push_back(d);
    mx.effects.push_back({0.0});
    CHECK_THROWS_AS(detect(mx, Metric::Prob), ConfigError);
}

TEST_CASE("metric names round-trip") {
    for (const Metric m : {Metric::Prob, Metric::LogitDiffNorm, Metric::Kl, Metric::StolfoRel,
                           Metric::AnswerSetProb, Metric::AnswerSetLogitDiff})
        CHECK(parse_metric(to_string(m)) == m);
    CHECK_THROWS_AS(parse_metric("nope"), ConfigError);
}

} // TEST_SUITE
