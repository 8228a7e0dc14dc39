// Command-line front end: run experiments from a JSON config, validate
// configs, and re-render heatmaps from an effects CSV.
//
// Exit codes: 0 success, 1 experiment error, 2 config error.

#include "patchkit/errors.hpp"
#include "patchkit/runner.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;

namespace {

int do_validate(const std::string& config_path) {
    const patchkit::ExperimentConfig cfg = patchkit::ExperimentConfig::load(config_path);
    // Input files must at least exist; content problems surface at run time.
    const std::vector<std::pair<std::string, std::string>> files = {
        {"model config", cfg.model_config_path},
        {"weights", cfg.weights_path},
        {"vocab", cfg.vocab_path},
        {"merges", cfg.merges_path},
    };
    for (const auto& [what, path] : files) {
        if (!fs::exists(path))
            throw patchkit::ConfigError(what + " file does not exist: " + path);
    }
    for (const std::string& path : {cfg.task.names_path, cfg.task.facts_path, cfg.task.nouns_path,
                                    cfg.task.words_path, cfg.corruption_pool_path}) {
        if (!path.empty() && !fs::exists(path))
            throw patchkit::ConfigError("task input file does not exist: " + path);
    }
    std::cout << "config ok: " << config_path << "\n";
    return 0;
}

int do_run(const std::string& config_path, const std::string& output_override) {
    patchkit::ExperimentConfig cfg = patchkit::ExperimentConfig::load(config_path);
    if (!output_override.empty()) cfg.output_dir = output_override;
    if (!fs::exists(cfg.weights_path))
        throw patchkit::ConfigError("weights file does not exist: " + cfg.weights_path);

    const patchkit::ExperimentResult result = patchkit::run_experiment(cfg);
    for (const std::string& w : result.warnings) std::cerr << "warning: " << w << "\n";
    for (const auto& [metric, det] : result.detections) {
        std::cout << to_string(metric) << ": positive {";
        for (size_t i = 0; i < det.positive.size(); ++i)
            std::cout << (i ? ", " : "")
                      << result.matrix.targets[static_cast<size_t>(det.positive[i])].label();
        std::cout << "} negative {";
        for (size_t i = 0; i < det.negative.size(); ++i)
            std::cout << (i ? ", " : "")
                      << result.matrix.targets[static_cast<size_t>(det.negative[i])].label();
        std::cout << "}\n";
    }
    std::cout << "wrote " << result.written_files.size() << " files to " << cfg.output_dir << " in "
              << result.wall_clock_ms << " ms\n";
    return 0;
}

int do_render(const std::string& csv_path, std::string out_dir) {
    const patchkit::EffectMatrix matrix = patchkit::read_effects_csv(csv_path);
    if (out_dir.empty()) out_dir = fs::path(csv_path).parent_path().string();
    if (out_dir.empty()) out_dir = ".";
    fs::create_directories(out_dir);
    for (const patchkit::Metric m : matrix.metrics) {
        const fs::path path =
            fs::path(out_dir) / ("heatmap_" + std::string(to_string(m)) + ".svg");
        std::ofstream out(path);
        if (!out) throw patchkit::Error("cannot write " + path.string());
        out << patchkit::svg_heatmap(matrix, m, fs::path(csv_path).stem().string() + " / " +
                                                    to_string(m));
        std::cout << "wrote " << path.string() << "\n";
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"activation patching experiments for GPT-2-family models"};
    app.require_subcommand(1);

    std::string config_path, csv_path, output_dir;

    CLI::App* run = app.add_subcommand("run", "run an experiment from a JSON config");
    run->add_option("config", config_path, "experiment config JSON")->required();
    run->add_option("-o,--output-dir", output_dir, "override the config's output_dir");

    CLI::App* validate = app.add_subcommand("validate", "check a config without running it");
    validate->add_option("config", config_path, "experiment config JSON")->required();

    CLI::App* render = app.add_subcommand("render", "regenerate SVG heatmaps from an effects CSV");
    render->add_option("csv", csv_path, "effects.csv produced by run")->required();
    render->add_option("-o,--output-dir", output_dir, "directory for the SVGs");

    try {
        app.parse(argc, argv);
        if (run->parsed()) return do_run(config_path, output_dir);
        if (validate->parsed()) return do_validate(config_path);
        if (render->parsed()) return do_render(csv_path, output_dir);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    } catch (const patchkit::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const patchkit::LoadError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
