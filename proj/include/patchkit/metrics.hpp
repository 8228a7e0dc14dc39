#pragma once

#include "patchkit/intervention.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace patchkit {

enum class Metric {
    Prob,               // P_pt(r) - P_*(r)
    LogitDiffNorm,      // (LD_pt - LD_*) / (LD_cl - LD_*)
    Kl,                 // KL(P_cl||P_*) - KL(P_cl||P_pt)
    StolfoRel,          // two-term relative probability change
    AnswerSetProb,      // sum_{y > YY} P(y), patched minus corrupted
    AnswerSetLogitDiff, // set logit difference, normalized like LogitDiffNorm
};

Metric parse_metric(const std::string& s);
const char* to_string(Metric m);

// Normalization guard for logit-difference denominators.
inline constexpr double kNormEps = 1e-6;
// Divergence guard for the relative-probability metric's denominators.
inline constexpr double kDivEps = 1e-9;

// Final-position logit rows of the three runs plus the answers; the
// lightweight view the metric functions consume.
struct TripleView {
    std::span<const float> clean_logits;
    std::span<const float> corrupt_logits;
    std::span<const float> patched_logits;
    int r = -1;
    int r_prime = -1;
    std::span<const int> greater_set;
    std::span<const int> less_set;
};

TripleView view_of(const RunTriple& triple);

// Softmax probability of `id` within a logits row (float64 internally).
double softmax_prob(std::span<const float> logits, int id);

double effect_prob(const TripleView& v);

// nullopt when |LD_cl - LD_*| <= kNormEps (degenerate prompt, excluded and
// counted by the caller).
std::optional<double> effect_logit_diff(const TripleView& v);

double effect_kl(const TripleView& v);

// nullopt when a denominator is <= kDivEps.
std::optional<double> effect_stolfo(const TripleView& v);

enum class AnswerSetVariant { Prob, LogitDiff };

// Throws ConfigError when a set is empty; Prob variant always has a value.
std::optional<double> effect_answer_set(const TripleView& v, AnswerSetVariant variant);

// Dispatch by metric enum.
std::optional<double> metric_effect(Metric m, const TripleView& v);

// One patch target of a sweep.
struct TargetDesc {
    int layer = -1;
    int head = -1;
    int position = -1;
    int window_center = -1;

    std::string label() const;
    bool operator==(const TargetDesc&) const = default;
};

// Patching-effect values indexed by target and metric: mean of per-prompt
// effects, with per-metric sweep statistics for the detection rule.
struct EffectMatrix {
    std::vector<TargetDesc> targets;
    std::vector<Metric> metrics;
    std::vector<std::vector<double>> effects; // [target][metric]
    long n_prompts = 0;
    std::vector<long> excluded_prompts; // [metric], prompts degenerate for every target
    std::vector<long> excluded_cells;   // [metric], per-(target,prompt) denominator failures

    struct Stats {
        double mean = 0.0;
        double sd = 0.0;
    };
    std::vector<Stats> stats; // [metric], across targets

    int metric_index(Metric m) const;
    void finalize_stats(); // population SD across targets per metric
};

// Targets whose mean effect lies more than 2 SD from the sweep mean.
struct Detection {
    std::vector<int> positive; // indices into EffectMatrix::targets
    std::vector<int> negative;
    double mean = 0.0;
    double sd = 0.0;
};

Detection detect(const EffectMatrix& matrix, Metric metric);

} // namespace patchkit
