#pragma once

#include "patchkit/corruption.hpp"
#include "patchkit/intervention.hpp"
#include "patchkit/metrics.hpp"
#include "patchkit/model.hpp"
#include "patchkit/tasks.hpp"

#include <map>
#include <string>
#include <vector>

namespace patchkit {

enum class SweepKind { HeadsAllPos, HeadsByPos, MlpLastSubject, MlpAllPos };
enum class Aggregation { JointWindow, SumSingle };

SweepKind parse_sweep_kind(const std::string& s);
const char* to_string(SweepKind k);
Aggregation parse_aggregation(const std::string& s);
const char* to_string(Aggregation a);

struct TaskConfig {
    std::string name; // ioi | facts | greater_than | docstring | arithmetic
    std::string names_path;
    std::string facts_path;
    std::string nouns_path;
    std::string words_path;
    std::string op = "+";
    int operand_min = 1;
    int operand_max = 250;
    bool filter_model_correct = true;
    int century_min = 11;
    int century_max = 17;
};

// Model + task + corruption + metric + sweep description; fully serializable
// and sufficient to re-run bit-identically.
struct ExperimentConfig {
    std::string model_config_path;
    std::string weights_path;
    std::string vocab_path;
    std::string merges_path;
    TaskConfig task;
    CorruptionSpec corruption;
    std::string corruption_pool_path;
    std::vector<Metric> metrics;
    SweepKind sweep = SweepKind::HeadsAllPos;
    int window = 1;
    Aggregation aggregation = Aggregation::JointWindow;
    int n_prompts = 100;
    uint64_t seed = 0;
    int batch_size = 16;
    std::string output_dir;

    static ExperimentConfig load(const std::string& path);
    void validate() const;
    std::string to_json_string() const;
};

struct SweepOptions {
    std::vector<Metric> metrics;
    int batch_size = 16;
};

// One row per (layer, head): patches that head's output at all positions.
EffectMatrix sweep_heads(const Model& model, const std::vector<PromptPair>& pairs,
                         const SweepOptions& options);

// Rows = (layer, head, position); requires fixed-length prompts.
EffectMatrix sweep_heads_by_position(const Model& model, const std::vector<PromptPair>& pairs,
                                     const SweepOptions& options);

enum class MlpPositions { LastSubject, All };

// For each center layer, jointly patches mlp_out over the window
// [center - w/2, center - w/2 + w - 1] clipped to valid layers.
EffectMatrix sweep_mlp_window(const Model& model, const std::vector<PromptPair>& pairs,
                              const SweepOptions& options, int window, MlpPositions positions);

// Summation baseline: row ℓ = sum of single-layer effects over ℓ's window.
// `single` must come from sweep_mlp_window with window 1.
EffectMatrix aggregate_sum_single(const EffectMatrix& single, int window);

// Everything a finished experiment produced.
struct ExperimentResult {
    EffectMatrix matrix;
    std::map<Metric, Detection> detections;
    double nu = 0.0;
    long wall_clock_ms = 0;
    std::vector<std::string> warnings;
    std::vector<std::string> written_files;
};

// Builds the task prompts for a config (exposed for tests and the
// acceptance suite).
std::vector<PromptPair> build_task_pairs(const ExperimentConfig& config, const Vocab& vocab,
                                         const Model& model, std::vector<std::string>* warnings);

// Computes ν (GN only) and attaches per-prompt embedding overrides.
double attach_gn_overrides(std::vector<PromptPair>& pairs,
                           const std::vector<std::string>& targets, const CorruptionSpec& spec,
                           const Model& model);

// Default corruption targets per task.
std::vector<std::string> default_targets(const std::string& task_name);

// Runs a full experiment and writes manifest.json, effects.csv,
// detections.json and one SVG heatmap per metric into config.output_dir.
// On failure every file written by this run is removed before rethrowing.
ExperimentResult run_experiment(const ExperimentConfig& config);

// In-memory sweep execution without touching the filesystem.
ExperimentResult run_sweep_only(const ExperimentConfig& config, const Model& model,
                                std::vector<PromptPair>& pairs);

// CSV round-trip (canonical output format: target descriptor columns, one
// column per metric, mean and sd rows appended).
void write_effects_csv(const EffectMatrix& matrix, const std::string& path);
EffectMatrix read_effects_csv(const std::string& path);

void write_detections_json(const EffectMatrix& matrix,
                           const std::map<Metric, Detection>& detections,
                           const std::string& path);

// Diverging-scale heatmap (layers x heads, layers x positions, or a single
// column for plain MLP sweeps), centered at 0.
std::string svg_heatmap(const EffectMatrix& matrix, Metric metric, const std::string& title);

} // namespace patchkit
