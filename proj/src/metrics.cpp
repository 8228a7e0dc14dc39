#include "patchkit/metrics.hpp"

#include "patchkit/errors.hpp"

#include <algorithm>
#include <cmath>

namespace patchkit {

Metric parse_metric(const std::string& s) {
    if (s == "prob") return Metric::Prob;
    if (s == "logit_diff_norm") return Metric::LogitDiffNorm;
    if (s == "kl") return Metric::Kl;
    if (s == "stolfo_rel") return Metric::StolfoRel;
    if (s == "answer_set_prob") return Metric::AnswerSetProb;
    if (s == "answer_set_logit_diff") return Metric::AnswerSetLogitDiff;
    throw ConfigError("unknown metric '" + s + "'");
}

const char* to_string(Metric m) {
    switch (m) {
        case Metric::Prob: return "prob";
        case Metric::LogitDiffNorm: return "logit_diff_norm";
        case Metric::Kl: return "kl";
        case Metric::StolfoRel: return "stolfo_rel";
        case Metric::AnswerSetProb: return "answer_set_prob";
        case Metric::AnswerSetLogitDiff: return "answer_set_logit_diff";
    }
    return "?";
}

TripleView view_of(const RunTriple& triple) {
    TripleView v;
    v.clean_logits = triple.clean.final_logits();
    v.corrupt_logits = triple.corrupted.final_logits();
    v.patched_logits = triple.patched.final_logits();
    if (triple.pair != nullptr) {
        v.r = triple.pair->r;
        v.r_prime = triple.pair->r_prime;
        v.greater_set = triple.pair->greater_set;
        v.less_set = triple.pair->less_set;
    }
    return v;
}

namespace {

double log_sum_exp(std::span<const float> logits) {
    double maxv = logits[0];
    for (const float v : logits) maxv = std::max(maxv, static_cast<double>(v));
    double sum = 0.0;
    for (const float v : logits) sum += std::exp(static_cast<double>(v) - maxv);
    return maxv + std::log(sum);
}

} // namespace

double softmax_prob(std::span<const float> logits, int id) {
    return std::exp(static_cast<double>(logits[static_cast<size_t>(id)]) - log_sum_exp(logits));
}

double effect_prob(const TripleView& v) {
    return softmax_prob(v.patched_logits, v.r) - softmax_prob(v.corrupt_logits, v.r);
}

std::optional<double> effect_logit_diff(const TripleView& v) {
    const auto ld = [&](std::span<const float> row) {
        return static_cast<double>(row[static_cast<size_t>(v.r)]) -
               static_cast<double>(row[static_cast<size_t>(v.r_prime)]);
    };
    const double denom = ld(v.clean_logits) - ld(v.corrupt_logits);
    if (std::abs(denom) <= kNormEps) return std::nullopt;
    return (ld(v.patched_logits) - ld(v.corrupt_logits)) / denom;
}

double effect_kl(const TripleView& v) {
    // KL(P_cl || Q) in the log domain; Q from logits is always positive.
    const double lse_cl = log_sum_exp(v.clean_logits);
    const auto kl_from_clean = [&](std::span<const float> q_logits) {
        const double lse_q = log_sum_exp(q_logits);
        double kl = 0.0;
        for (size_t i = 0; i < v.clean_logits.size(); ++i) {
            const double lp = static_cast<double>(v.clean_logits[i]) - lse_cl;
            const double lq = static_cast<double>(q_logits[i]) - lse_q;
            kl += std::exp(lp) * (lp - lq);
        }
        return kl;
    };
    return kl_from_clean(v.corrupt_logits) - kl_from_clean(v.patched_logits);
}

std::optional<double> effect_stolfo(const TripleView& v) {
    const double p_star_r = softmax_prob(v.corrupt_logits, v.r);
    const double p_pt_rp = softmax_prob(v.patched_logits, v.r_prime);
    if (p_star_r <= kDivEps || p_pt_rp <= kDivEps) return std::nullopt;
    const double p_pt_r = softmax_prob(v.patched_logits, v.r);
    const double p_star_rp = softmax_prob(v.corrupt_logits, v.r_prime);
    return 0.5 * ((p_pt_r - p_star_r) / p_star_r + (p_star_rp - p_pt_rp) / p_pt_rp);
}

std::optional<double> effect_answer_set(const TripleView& v, AnswerSetVariant variant) {
    if (v.greater_set.empty() || v.less_set.empty())
        throw ConfigError("answer-set metric needs non-empty greater and less sets");

    if (variant == AnswerSetVariant::Prob) {
        const auto mass = [&](std::span<const float> row) {
            const double lse = log_sum_exp(row);
            double total = 0.0;
            for (const int id : v.greater_set)
                total += std::exp(static_cast<double>(row[static_cast<size_t>(id)]) - lse);
            return total;
        };
        return mass(v.patched_logits) - mass(v.corrupt_logits);
    }

    const auto set_ld = [&](std::span<const float> row) {
        double greater = 0.0, less = 0.0;
        for (const int id : v.greater_set) greater += row[static_cast<size_t>(id)];
        for (const int id : v.less_set) less += row[static_cast<size_t>(id)];
        return greater - less;
    };
    const double denom = set_ld(v.clean_logits) - set_ld(v.corrupt_logits);
    if (std::abs(denom) <= kNormEps) return std::nullopt;
    return (set_ld(v.patched_logits) - set_ld(v.corrupt_logits)) / denom;
}

std::optional<double> metric_effect(Metric m, const TripleView& v) {
    switch (m) {
        case Metric::Prob: return effect_prob(v);
        case Metric::LogitDiffNorm: return effect_logit_diff(v);
        case Metric::Kl: return effect_kl(v);
        case Metric::StolfoRel: return effect_stolfo(v);
        case Metric::AnswerSetProb: return effect_answer_set(v, AnswerSetVariant::Prob);
        case Metric::AnswerSetLogitDiff: return effect_answer_set(v, AnswerSetVariant::LogitDiff);
    }
    return std::nullopt;
}

std::string TargetDesc::label() const {
    std::string s;
    if (layer >= 0 && head >= 0) {
        s = std::to_string(layer) + "." + std::to_string(head);
    } else if (window_center >= 0) {
        s = "mlp" + std::to_string(window_center);
    } else if (layer >= 0) {
        s = "mlp" + std::to_string(layer);
    }
    if (position >= 0) s += "@" + std::to_string(position);
    return s;
}

int EffectMatrix::metric_index(Metric m) const {
    for (size_t i = 0; i < metrics.size(); ++i)
        if (metrics[i] == m) return static_cast<int>(i);
    throw ConfigError(std::string("metric ") + to_string(m) + " not present in effect matrix");
}

namespace {

EffectMatrix::Stats column_stats(const EffectMatrix& matrix, size_t m) {
    double sum = 0.0;
    for (size_t t = 0; t < matrix.targets.size(); ++t) sum += matrix.effects[t][m];
    const double mean = sum / static_cast<double>(matrix.targets.size());
    double var = 0.0;
    for (size_t t = 0; t < matrix.targets.size(); ++t) {
        const double d = matrix.effects[t][m] - mean;
        var += d * d;
    }
    var /= static_cast<double>(matrix.targets.size());
    return {mean, std::sqrt(var)};
}

} // namespace

void EffectMatrix::finalize_stats() {
    stats.assign(metrics.size(), {});
    if (targets.empty()) return;
    for (size_t m = 0; m < metrics.size(); ++m) stats[m] = column_stats(*this, m);
}

Detection detect(const EffectMatrix& matrix, Metric metric) {
    if (matrix.targets.size() < 2)
        throw ConfigError("detection needs at least 2 targets in the sweep");
    const int m = matrix.metric_index(metric);
    const EffectMatrix::Stats st = column_stats(matrix, static_cast<size_t>(m));

    Detection det;
    det.mean = st.mean;
    det.sd = st.sd;
    for (size_t t = 0; t < matrix.targets.size(); ++t) {
        const double e = matrix.effects[t][static_cast<size_t>(m)];
        // Strict inequalities: an all-equal sweep (SD = 0) detects nothing.
        if (e > st.mean + 2.0 * st.sd) det.positive.push_back(static_cast<int>(t));
        else if (e < st.mean - 2.0 * st.sd) det.negative.push_back(static_cast<int>(t));
    }
    return det;
}

} // namespace patchkit
