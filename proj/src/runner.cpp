#include "patchkit/runner.hpp"

#include "patchkit/errors.hpp"
#include "patchkit/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>

namespace patchkit {

using nlohmann::json;
namespace fs = std::filesystem;

SweepKind parse_sweep_kind(const std::string& s) {
    if (s == "heads_all_pos") return SweepKind::HeadsAllPos;
    if (s == "heads_by_pos") return SweepKind::HeadsByPos;
    if (s == "mlp_last_subject") return SweepKind::MlpLastSubject;
    if (s == "mlp_all_pos") return SweepKind::MlpAllPos;
    throw ConfigError("unknown sweep kind '" + s + "'");
}

const char* to_string(SweepKind k) {
    switch (k) {
        case SweepKind::HeadsAllPos: return "heads_all_pos";
        case SweepKind::HeadsByPos: return "heads_by_pos";
        case SweepKind::MlpLastSubject: return "mlp_last_subject";
        case SweepKind::MlpAllPos: return "mlp_all_pos";
    }
    return "?";
}

Aggregation parse_aggregation(const std::string& s) {
    if (s == "joint_window") return Aggregation::JointWindow;
    if (s == "sum_single") return Aggregation::SumSingle;
    throw ConfigError("unknown aggregation '" + s + "'");
}

const char* to_string(Aggregation a) {
    return a == Aggregation::JointWindow ? "joint_window" : "sum_single";
}

// ---------------------------------------------------------------------------
// Config

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open experiment config: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("bad experiment config JSON in " + path + ": " + e.what());
    }

    ExperimentConfig cfg;
    try {
        cfg.model_config_path = j.at("model").at("config").get<std::string>();
        cfg.weights_path = j.at("model").at("weights").get<std::string>();
        cfg.vocab_path = j.at("tokenizer").at("vocab").get<std::string>();
        cfg.merges_path = j.at("tokenizer").at("merges").get<std::string>();

        const json& t = j.at("task");
        cfg.task.name = t.at("name").get<std::string>();
        cfg.task.names_path = t.value("names", "");
        cfg.task.facts_path = t.value("path", "");
        cfg.task.nouns_path = t.value("nouns", "");
        cfg.task.words_path = t.value("words", "");
        cfg.task.op = t.value("op", "+");
        cfg.task.operand_min = t.value("operand_min", 1);
        cfg.task.operand_max = t.value("operand_max", cfg.task.op == "*" ? 23 : 250);
        cfg.task.filter_model_correct = t.value("filter_model_correct", true);
        cfg.task.century_min = t.value("century_min", 11);
        cfg.task.century_max = t.value("century_max", 17);

        const json& c = j.at("corruption");
        cfg.corruption.method = parse_corruption_method(c.at("method").get<std::string>());
        if (c.contains("targets"))
            cfg.corruption.targets = c.at("targets").get<std::vector<std::string>>();
        cfg.corruption.noise_scale_multiplier = c.value("noise_scale_multiplier", 3.0);
        cfg.corruption.seed = c.value("seed", j.value("seed", uint64_t{0}));
        cfg.corruption_pool_path = c.value("pool", "");

        for (const auto& m : j.at("metrics")) cfg.metrics.push_back(parse_metric(m.get<std::string>()));

        cfg.sweep = parse_sweep_kind(j.at("sweep").get<std::string>());
        cfg.window = j.value("window", 1);
        cfg.aggregation = parse_aggregation(j.value("aggregation", std::string("joint_window")));
        // Default prompt counts per task: 500 IOI, 300 greater-than, 200
        // docstring/arithmetic, both orientations of 145 pairs for facts.
        int default_prompts = 100;
        if (cfg.task.name == "ioi") default_prompts = 500;
        else if (cfg.task.name == "greater_than") default_prompts = 300;
        else if (cfg.task.name == "docstring" || cfg.task.name == "arithmetic")
            default_prompts = 200;
        else if (cfg.task.name == "facts") default_prompts = 290;
        cfg.n_prompts = j.value("n_prompts", default_prompts);
        cfg.seed = j.value("seed", uint64_t{0});
        cfg.batch_size = j.value("batch_size", 16);
        cfg.output_dir = j.value("output_dir", "");
    } catch (const json::exception& e) {
        throw ConfigError("experiment config " + path + " is missing fields: " + e.what());
    }
    cfg.validate();
    return cfg;
}

void ExperimentConfig::validate() const {
    static const std::set<std::string> kTasks = {"ioi", "facts", "greater_than", "docstring",
                                                 "arithmetic"};
    if (kTasks.count(task.name) == 0) throw ConfigError("unknown task '" + task.name + "'");
    if (metrics.empty()) throw ConfigError("no metrics configured");
    if (n_prompts < 1) throw ConfigError("n_prompts must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (window < 1) throw ConfigError("window must be >= 1");

    const bool mlp_sweep = sweep == SweepKind::MlpLastSubject || sweep == SweepKind::MlpAllPos;
    if (!mlp_sweep && window != 1)
        throw ConfigError("window > 1 only applies to MLP sweeps");
    if (!mlp_sweep && aggregation == Aggregation::SumSingle)
        throw ConfigError("sum_single aggregation only applies to MLP sweeps");

    for (const Metric m : metrics) {
        const bool answer_set = m == Metric::AnswerSetProb || m == Metric::AnswerSetLogitDiff;
        if (answer_set && task.name != "greater_than")
            throw ConfigError(std::string(to_string(m)) + " requires the greater_than task");
        if (!answer_set && m != Metric::Kl && task.name == "greater_than")
            throw ConfigError(std::string("greater_than defines answer-set metrics only; '") +
                              to_string(m) + "' has no single answer token");
    }
    if (corruption.method == CorruptionMethod::ABC && task.name != "ioi")
        throw ConfigError("ABC corruption applies to IOI only");
}

std::string ExperimentConfig::to_json_string() const {
    json j;
    j["model"] = {{"config", model_config_path}, {"weights", weights_path}};
    j["tokenizer"] = {{"vocab", vocab_path}, {"merges", merges_path}};
    json t;
    t["name"] = task.name;
    if (!task.names_path.empty()) t["names"] = task.names_path;
    if (!task.facts_path.empty()) t["path"] = task.facts_path;
    if (!task.nouns_path.empty()) t["nouns"] = task.nouns_path;
    if (!task.words_path.empty()) t["words"] = task.words_path;
    if (task.name == "arithmetic") {
        t["op"] = task.op;
        t["operand_min"] = task.operand_min;
        t["operand_max"] = task.operand_max;
        t["filter_model_correct"] = task.filter_model_correct;
    }
    if (task.name == "greater_than") {
        t["century_min"] = task.century_min;
        t["century_max"] = task.century_max;
    }
    j["task"] = t;
    json c;
    c["method"] = to_string(corruption.method);
    c["targets"] = corruption.targets;
    c["noise_scale_multiplier"] = corruption.noise_scale_multiplier;
    c["seed"] = corruption.seed;
    if (!corruption_pool_path.empty()) c["pool"] = corruption_pool_path;
    j["corruption"] = c;
    json ms = json::array();
    for (const Metric m : metrics) ms.push_back(to_string(m));
    j["metrics"] = ms;
    j["sweep"] = to_string(sweep);
    j["window"] = window;
    j["aggregation"] = to_string(aggregation);
    j["n_prompts"] = n_prompts;
    j["seed"] = seed;
    j["batch_size"] = batch_size;
    j["output_dir"] = output_dir;
    return j.dump(2);
}

// ---------------------------------------------------------------------------
// Sweep engine

namespace {

struct SweepTarget {
    TargetDesc desc;
    std::vector<SiteTemplate> sites;
};

// Prompt-level metric guards: denominators that do not depend on the patched
// run. A prompt failing a guard is excluded (and counted) for that metric.
bool prompt_level_ok(Metric m, const PromptPair& pair, std::span<const float> clean_row,
                     std::span<const float> corrupt_row) {
    switch (m) {
        case Metric::LogitDiffNorm: {
            const auto ld = [&](std::span<const float> row) {
                return static_cast<double>(row[static_cast<size_t>(pair.r)]) -
                       static_cast<double>(row[static_cast<size_t>(pair.r_prime)]);
            };
            return std::abs(ld(clean_row) - ld(corrupt_row)) > kNormEps;
        }
        case Metric::AnswerSetLogitDiff: {
            const auto set_ld = [&](std::span<const float> row) {
                double g = 0.0, l = 0.0;
                for (const int id : pair.greater_set) g += row[static_cast<size_t>(id)];
                for (const int id : pair.less_set) l += row[static_cast<size_t>(id)];
                return g - l;
            };
            return std::abs(set_ld(clean_row) - set_ld(corrupt_row)) > kNormEps;
        }
        case Metric::StolfoRel:
            return softmax_prob(corrupt_row, pair.r) > kDivEps;
        default:
            return true;
    }
}

EffectMatrix run_sweep(const Model& model, const std::vector<PromptPair>& pairs,
                       const std::vector<SweepTarget>& targets, const SweepOptions& options) {
    if (pairs.empty()) throw ConfigError("sweep needs at least one prompt");
    if (options.metrics.empty()) throw ConfigError("sweep needs at least one metric");

    const size_t n_targets = targets.size();
    const size_t n_metrics = options.metrics.size();

    EffectMatrix mx;
    mx.metrics = options.metrics;
    mx.targets.reserve(n_targets);
    for (const SweepTarget& t : targets) mx.targets.push_back(t.desc);
    mx.n_prompts = static_cast<long>(pairs.size());
    mx.excluded_prompts.assign(n_metrics, 0);
    mx.excluded_cells.assign(n_metrics, 0);

    // The clean run caches the union of every target's sites once; only the
    // patched run repeats per target.
    CaptureSet capture;
    for (const SweepTarget& t : targets)
        for (const SiteTemplate& s : t.sites) capture.add(s.kind, s.layer, s.head);

    // A patch at layer l cannot change anything below it, so the patched run
    // resumes from the corrupted run's residual stream entering the first
    // patched layer. The corrupted run caches resid_post everywhere for that.
    CaptureSet corrupt_capture;
    for (int l = 0; l < model.config.n_layers; ++l)
        corrupt_capture.add(SiteKind::ResidPost, l);
    const auto resume_layer = [&](const SweepTarget& t) {
        int lo = model.config.n_layers;
        for (const SiteTemplate& s : t.sites) {
            if (s.kind == SiteKind::EmbedOut) return 0;
            if (s.kind == SiteKind::FinalLogits) continue;
            lo = std::min(lo, s.layer);
        }
        return lo;
    };

    std::vector<std::vector<double>> sums(n_targets, std::vector<double>(n_metrics, 0.0));
    std::vector<std::vector<long>> counts(n_targets, std::vector<long>(n_metrics, 0));

    const int batch = std::max(1, options.batch_size);
    const int n_pairs = static_cast<int>(pairs.size());

    for (int batch_start = 0; batch_start < n_pairs; batch_start += batch) {
        const int batch_len = std::min(batch, n_pairs - batch_start);

        struct Base {
            ForwardRecord clean;
            ForwardRecord corrupted;
            std::vector<float> clean_row;
            std::vector<float> corrupt_row;
            std::vector<char> prompt_ok; // per metric
        };
        std::vector<Base> bases(static_cast<size_t>(batch_len));

        parallel_for(batch_len, [&](int b) {
            const PromptPair& pair = pairs[static_cast<size_t>(batch_start + b)];
            Base& base = bases[static_cast<size_t>(b)];

            ForwardOptions clean_opt;
            clean_opt.capture = &capture;
            clean_opt.logits_final_only = true;
            base.clean = forward(model, pair.clean.ids, clean_opt);
            const auto crow = base.clean.final_logits();
            base.clean_row.assign(crow.begin(), crow.end());

            ForwardOptions corrupt_opt;
            corrupt_opt.capture = &corrupt_capture;
            corrupt_opt.logits_final_only = true;
            if (pair.override_rows.has_value()) corrupt_opt.embed_override = &*pair.override_rows;
            base.corrupted = forward(model, pair.corrupt.ids, corrupt_opt);
            const auto xrow = base.corrupted.final_logits();
            base.corrupt_row.assign(xrow.begin(), xrow.end());

            base.prompt_ok.resize(n_metrics);
            for (size_t m = 0; m < n_metrics; ++m)
                base.prompt_ok[m] = prompt_level_ok(options.metrics[m], pair, base.clean_row,
                                                    base.corrupt_row)
                                        ? 1
                                        : 0;
        });

        for (size_t m = 0; m < n_metrics; ++m)
            for (const Base& base : bases)
                if (base.prompt_ok[m] == 0) mx.excluded_prompts[m] += 1;

        // value or NaN per (target, prompt, metric); reduced sequentially.
        std::vector<double> vals(n_targets * static_cast<size_t>(batch_len) * n_metrics,
                                 std::numeric_limits<double>::quiet_NaN());
        const auto val_at = [&](size_t t, size_t b, size_t m) -> double& {
            return vals[(t * static_cast<size_t>(batch_len) + b) * n_metrics + m];
        };

        parallel_for(static_cast<int>(n_targets) * batch_len, [&](int idx) {
            const size_t t = static_cast<size_t>(idx) / static_cast<size_t>(batch_len);
            const size_t b = static_cast<size_t>(idx) % static_cast<size_t>(batch_len);
            const PromptPair& pair = pairs[static_cast<size_t>(batch_start) + b];
            const Base& base = bases[b];

            // A positional target beyond this prompt's length contributes
            // nothing (variable-length MLP position sweeps).
            const TargetDesc& desc = targets[t].desc;
            if (desc.position >= 0 && desc.position >= pair.clean.length()) return;

            PatchTemplate tmpl;
            tmpl.sites = targets[t].sites;
            const PatchSpec spec = tmpl.resolve(*base.clean.cache, pair.clean);

            ForwardOptions patched_opt;
            patched_opt.logits_final_only = true;
            if (pair.override_rows.has_value()) patched_opt.embed_override = &*pair.override_rows;
            patched_opt.patches = &spec;
            const int lo = resume_layer(targets[t]);
            if (lo > 0) {
                patched_opt.start_layer = lo;
                patched_opt.initial_resid = &base.corrupted.cache->at(
                    {SiteKind::ResidPost, static_cast<int16_t>(lo - 1), -1});
            }
            const ForwardRecord patched = forward(model, pair.corrupt.ids, patched_opt);

            TripleView view;
            view.clean_logits = {base.clean_row.data(), base.clean_row.size()};
            view.corrupt_logits = {base.corrupt_row.data(), base.corrupt_row.size()};
            view.patched_logits = patched.final_logits();
            view.r = pair.r;
            view.r_prime = pair.r_prime;
            view.greater_set = pair.greater_set;
            view.less_set = pair.less_set;

            for (size_t m = 0; m < n_metrics; ++m) {
                if (base.prompt_ok[m] == 0) continue;
                const auto effect = metric_effect(options.metrics[m], view);
                if (effect.has_value()) val_at(t, b, m) = *effect;
            }
        });

        for (size_t t = 0; t < n_targets; ++t) {
            for (int b = 0; b < batch_len; ++b) {
                const PromptPair& pair = pairs[static_cast<size_t>(batch_start + b)];
                const bool in_range = targets[t].desc.position < 0 ||
                                      targets[t].desc.position < pair.clean.length();
                for (size_t m = 0; m < n_metrics; ++m) {
                    const double v = val_at(t, static_cast<size_t>(b), m);
                    if (!std::isnan(v)) {
                        sums[t][m] += v;
                        counts[t][m] += 1;
                    } else if (in_range && bases[static_cast<size_t>(b)].prompt_ok[m] != 0) {
                        mx.excluded_cells[m] += 1;
                    }
                }
            }
        }
    }

    mx.effects.assign(n_targets, std::vector<double>(n_metrics, 0.0));
    for (size_t t = 0; t < n_targets; ++t)
        for (size_t m = 0; m < n_metrics; ++m)
            if (counts[t][m] > 0) mx.effects[t][m] = sums[t][m] / static_cast<double>(counts[t][m]);
    mx.finalize_stats();
    return mx;
}

std::vector<int> window_layers(int center, int window, int n_layers) {
    const int lo = center - window / 2;
    std::vector<int> out;
    for (int l = lo; l < lo + window; ++l)
        if (l >= 0 && l < n_layers) out.push_back(l);
    return out;
}

} // namespace

EffectMatrix sweep_heads(const Model& model, const std::vector<PromptPair>& pairs,
                         const SweepOptions& options) {
    std::vector<SweepTarget> targets;
    for (int l = 0; l < model.config.n_layers; ++l) {
        for (int h = 0; h < model.config.n_heads; ++h) {
            SweepTarget t;
            t.desc.layer = l;
            t.desc.head = h;
            t.sites = {{SiteKind::HeadOut, l, h, PositionSel::all()}};
            targets.push_back(std::move(t));
        }
    }
    return run_sweep(model, pairs, targets, options);
}

EffectMatrix sweep_heads_by_position(const Model& model, const std::vector<PromptPair>& pairs,
                                     const SweepOptions& options) {
    if (pairs.empty()) throw ConfigError("sweep needs at least one prompt");
    const int len = pairs.front().clean.length();
    for (const PromptPair& p : pairs)
        if (p.clean.length() != len)
            throw ConfigError("by-position sweeps need fixed-length prompts (got " +
                              std::to_string(p.clean.length()) + " and " + std::to_string(len) +
                              ")");

    std::vector<SweepTarget> targets;
    for (int l = 0; l < model.config.n_layers; ++l)
        for (int h = 0; h < model.config.n_heads; ++h)
            for (int p = 0; p < len; ++p) {
                SweepTarget t;
                t.desc.layer = l;
                t.desc.head = h;
                t.desc.position = p;
                t.sites = {{SiteKind::HeadOut, l, h, PositionSel::fixed(p)}};
                targets.push_back(std::move(t));
            }
    return run_sweep(model, pairs, targets, options);
}

EffectMatrix sweep_mlp_window(const Model& model, const std::vector<PromptPair>& pairs,
                              const SweepOptions& options, int window, MlpPositions positions) {
    if (model.config.attn_only) throw ConfigError("MLP sweeps need a model with MLP sublayers");
    if (window < 1 || window > model.config.n_layers)
        throw ConfigError("window " + std::to_string(window) + " out of range for " +
                          std::to_string(model.config.n_layers) + " layers");
    if (pairs.empty()) throw ConfigError("sweep needs at least one prompt");

    std::vector<SweepTarget> targets;
    if (positions == MlpPositions::LastSubject) {
        // Facts prompts carry a subject span; tasks without one patch the
        // final prompt position instead.
        const std::string label = pairs.front().clean.has_span("subject") ? "subject" : "last";
        for (int c = 0; c < model.config.n_layers; ++c) {
            SweepTarget t;
            t.desc.window_center = c;
            for (const int l : window_layers(c, window, model.config.n_layers))
                t.sites.push_back({SiteKind::MlpOut, l, -1, PositionSel::span_last(label)});
            targets.push_back(std::move(t));
        }
    } else {
        int max_len = 0;
        for (const PromptPair& p : pairs) max_len = std::max(max_len, p.clean.length());
        for (int c = 0; c < model.config.n_layers; ++c)
            for (int pos = 0; pos < max_len; ++pos) {
                SweepTarget t;
                t.desc.window_center = c;
                t.desc.position = pos;
                for (const int l : window_layers(c, window, model.config.n_layers))
                    t.sites.push_back({SiteKind::MlpOut, l, -1, PositionSel::fixed(pos)});
                targets.push_back(std::move(t));
            }
    }
    return run_sweep(model, pairs, targets, options);
}

EffectMatrix aggregate_sum_single(const EffectMatrix& single, int window) {
    int n_layers = 0;
    for (const TargetDesc& t : single.targets) {
        if (t.window_center < 0)
            throw ConfigError("sum_single aggregation needs an MLP sweep matrix");
        n_layers = std::max(n_layers, t.window_center + 1);
    }

    // Index single-layer rows by (center, position).
    std::map<std::pair<int, int>, size_t> index;
    for (size_t i = 0; i < single.targets.size(); ++i)
        index[{single.targets[i].window_center, single.targets[i].position}] = i;

    EffectMatrix out = single;
    for (size_t i = 0; i < out.targets.size(); ++i) {
        const TargetDesc& desc = out.targets[i];
        std::vector<double> total(single.metrics.size(), 0.0);
        for (const int l : window_layers(desc.window_center, window, n_layers)) {
            const auto it = index.find({l, desc.position});
            if (it == index.end()) continue;
            for (size_t m = 0; m < single.metrics.size(); ++m)
                total[m] += single.effects[it->second][m];
        }
        out.effects[i] = std::move(total);
    }
    out.finalize_stats();
    return out;
}

// ---------------------------------------------------------------------------
// Task construction

std::vector<std::string> default_targets(const std::string& task_name) {
    if (task_name == "ioi") return {"S2"};
    if (task_name == "facts") return {"subject"};
    if (task_name == "greater_than") return {"YY"};
    if (task_name == "docstring") return {"C_def"};
    if (task_name == "arithmetic") return {"X3", "Y3"};
    throw ConfigError("unknown task '" + task_name + "'");
}

std::vector<PromptPair> build_task_pairs(const ExperimentConfig& config, const Vocab& vocab,
                                         const Model& model, std::vector<std::string>* warnings) {
    CorruptionSpec corruption = config.corruption;
    if (corruption.targets.empty()) corruption.targets = default_targets(config.task.name);
    if (!config.corruption_pool_path.empty())
        corruption.replacement_pool = load_pool(config.corruption_pool_path);

    const auto warn = [&](const std::string& msg) {
        if (warnings != nullptr) warnings->push_back(msg);
    };

    std::vector<PromptPair> pairs;
    if (config.task.name == "ioi") {
        IOISpec spec;
        if (config.task.names_path.empty()) throw ConfigError("ioi task needs a names pool file");
        spec.names = load_pool(config.task.names_path);
        spec.n_prompts = config.n_prompts;
        spec.seed = config.seed;
        if (corruption.replacement_pool.empty())
            corruption.replacement_pool = filter_single_token(spec.names, vocab);
        pairs = gen_ioi(spec, corruption, vocab);
    } else if (config.task.name == "facts") {
        if (config.task.facts_path.empty()) throw ConfigError("facts task needs a dataset path");
        std::vector<std::string> rejects;
        const std::vector<FactPair> facts =
            load_paired_facts(config.task.facts_path, vocab, &rejects);
        for (const std::string& r : rejects) warn("facts record rejected: " + r);
        if (facts.empty()) throw ConfigError("no usable records in " + config.task.facts_path);
        pairs = fact_prompt_pairs(facts, corruption, vocab);
        if (static_cast<int>(pairs.size()) > config.n_prompts)
            pairs.resize(static_cast<size_t>(config.n_prompts));
    } else if (config.task.name == "greater_than") {
        GreaterThanSpec spec;
        if (config.task.nouns_path.empty())
            throw ConfigError("greater_than task needs a nouns pool file");
        spec.nouns = load_pool(config.task.nouns_path);
        spec.century_min = config.task.century_min;
        spec.century_max = config.task.century_max;
        spec.n_prompts = config.n_prompts;
        spec.seed = config.seed;
        pairs = gen_greater_than(spec, corruption, vocab);
    } else if (config.task.name == "docstring") {
        DocstringSpec spec;
        if (config.task.words_path.empty())
            throw ConfigError("docstring task needs a words pool file");
        spec.words = load_pool(config.task.words_path);
        spec.n_prompts = config.n_prompts;
        spec.seed = config.seed;
        if (corruption.replacement_pool.empty())
            corruption.replacement_pool = filter_single_token(spec.words, vocab);
        pairs = gen_docstring(spec, corruption, vocab);
    } else if (config.task.name == "arithmetic") {
        ArithmeticSpec spec;
        spec.op = config.task.op.empty() ? '+' : config.task.op[0];
        spec.operand_min = config.task.operand_min;
        spec.operand_max = config.task.operand_max;
        spec.n_prompts = config.n_prompts;
        spec.seed = config.seed;
        spec.filter_model_correct = config.task.filter_model_correct;
        pairs = gen_arithmetic(spec, corruption, vocab, model);
        if (static_cast<int>(pairs.size()) < config.n_prompts)
            warn("arithmetic: only " + std::to_string(pairs.size()) + " of " +
                 std::to_string(config.n_prompts) + " prompts survive the model-correctness filter");
        if (pairs.empty()) throw ConfigError("no arithmetic prompts survive filtering");
    }
    return pairs;
}

double attach_gn_overrides(std::vector<PromptPair>& pairs,
                           const std::vector<std::string>& targets, const CorruptionSpec& spec,
                           const Model& model) {
    std::vector<TokenSequence> dataset;
    dataset.reserve(pairs.size());
    for (const PromptPair& p : pairs) dataset.push_back(p.clean);
    const double nu = embedding_noise_scale(dataset, model, spec.noise_scale_multiplier);
    for (size_t i = 0; i < pairs.size(); ++i) {
        pairs[i].override_rows =
            corrupt_gn(pairs[i].clean, targets, nu, model, Rng::mix(spec.seed, i));
    }
    return nu;
}

// ---------------------------------------------------------------------------
// Orchestration

ExperimentResult run_sweep_only(const ExperimentConfig& config, const Model& model,
                                std::vector<PromptPair>& pairs) {
    ExperimentResult result;

    if (config.corruption.method == CorruptionMethod::GN) {
        std::vector<std::string> targets = config.corruption.targets;
        if (targets.empty()) targets = default_targets(config.task.name);
        result.nu = attach_gn_overrides(pairs, targets, config.corruption, model);
    }

    SweepOptions options{config.metrics, config.batch_size};
    switch (config.sweep) {
        case SweepKind::HeadsAllPos:
            result.matrix = sweep_heads(model, pairs, options);
            break;
        case SweepKind::HeadsByPos:
            result.matrix = sweep_heads_by_position(model, pairs, options);
            break;
        case SweepKind::MlpLastSubject:
        case SweepKind::MlpAllPos: {
            const MlpPositions positions = config.sweep == SweepKind::MlpLastSubject
                                               ? MlpPositions::LastSubject
                                               : MlpPositions::All;
            if (config.aggregation == Aggregation::SumSingle) {
                const EffectMatrix single =
                    sweep_mlp_window(model, pairs, options, 1, positions);
                result.matrix = aggregate_sum_single(single, config.window);
            } else {
                result.matrix = sweep_mlp_window(model, pairs, options, config.window, positions);
            }
            break;
        }
    }

    for (const Metric m : config.metrics) result.detections[m] = detect(result.matrix, m);
    return result;
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
    const auto t0 = std::chrono::steady_clock::now();
    if (config.output_dir.empty()) throw ConfigError("run needs an output_dir");

    const Vocab vocab = Vocab::load(config.vocab_path, config.merges_path);
    const Model model = load_model(config.model_config_path, config.weights_path);

    ExperimentResult result;
    std::vector<PromptPair> pairs = build_task_pairs(config, vocab, model, &result.warnings);
    {
        ExperimentResult sweep_result = run_sweep_only(config, model, pairs);
        result.matrix = std::move(sweep_result.matrix);
        result.detections = std::move(sweep_result.detections);
        result.nu = sweep_result.nu;
    }
    result.wall_clock_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                               std::chrono::steady_clock::now() - t0)
                               .count();

    // Everything is computed; now write, removing partial output on failure.
    const fs::path dir(config.output_dir);
    std::vector<fs::path> written;
    try {
        fs::create_directories(dir);

        const fs::path csv = dir / "effects.csv";
        write_effects_csv(result.matrix, csv.string());
        written.push_back(csv);

        const fs::path det = dir / "detections.json";
        write_detections_json(result.matrix, result.detections, det.string());
        written.push_back(det);

        for (const Metric m : config.metrics) {
            const fs::path svg = dir / ("heatmap_" + std::string(to_string(m)) + ".svg");
            std::ofstream out(svg);
            if (!out) throw Error("cannot write " + svg.string());
            out << svg_heatmap(result.matrix, m,
                               config.task.name + " / " + to_string(config.corruption.method) +
                                   " / " + to_string(m));
            written.push_back(svg);
        }

        json manifest;
        manifest["version"] = "patchkit 0.1.0";
        manifest["config"] = json::parse(config.to_json_string());
        manifest["nu"] = result.nu;
        manifest["seed"] = config.seed;
        manifest["corruption_seed"] = config.corruption.seed;
        manifest["threads"] = thread_count();
        manifest["n_prompts"] = result.matrix.n_prompts;
        manifest["wall_clock_ms"] = result.wall_clock_ms;
        json excluded;
        json cells;
        json stats;
        for (size_t m = 0; m < result.matrix.metrics.size(); ++m) {
            const char* name = to_string(result.matrix.metrics[m]);
            excluded[name] = result.matrix.excluded_prompts[m];
            cells[name] = result.matrix.excluded_cells[m];
            stats[name] = {{"mean", result.matrix.stats[m].mean},
                           {"sd", result.matrix.stats[m].sd}};
        }
        manifest["excluded_prompts"] = excluded;
        manifest["excluded_cells"] = cells;
        manifest["stats"] = stats;
        // Normalized metrics divide per prompt, then average across prompts.
        manifest["metric_aggregation"] = "normalize_per_prompt_then_average";
        manifest["warnings"] = result.warnings;

        const fs::path mpath = dir / "manifest.json";
        std::ofstream mout(mpath);
        if (!mout) throw Error("cannot write " + mpath.string());
        mout << manifest.dump(2) << "\n";
        written.push_back(mpath);
    } catch (...) {
        for (const fs::path& p : written) {
            std::error_code ec;
            fs::remove(p, ec);
        }
        throw;
    }

    for (const fs::path& p : written) result.written_files.push_back(p.string());
    return result;
}

} // namespace patchkit
