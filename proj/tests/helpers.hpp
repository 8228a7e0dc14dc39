#pragma once

#include "patchkit/model.hpp"
#include "patchkit/tokenizer.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>

namespace testutil {

inline std::string test_data(const std::string& rel) {
    return std::string(PATCHKIT_TEST_DATA_DIR) + "/" + rel;
}

inline std::string repo_data(const std::string& rel) {
    return std::string(PATCHKIT_DATA_DIR) + "/" + rel;
}

// Fixture vocab / toy models, loaded once per process.
inline const patchkit::Vocab& fixture_vocab() {
    static const patchkit::Vocab v =
        patchkit::Vocab::load(test_data("vocab.json"), test_data("merges.txt"));
    return v;
}

inline const patchkit::Model& toy_model() {
    static const patchkit::Model m =
        patchkit::load_model(test_data("toy/config.json"), test_data("toy/model.safetensors"));
    return m;
}

inline const patchkit::Model& attn4_model() {
    static const patchkit::Model m =
        patchkit::load_model(test_data("attn4/config.json"), test_data("attn4/model.safetensors"));
    return m;
}

// Scratch directory unique to a test, cleaned up on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("patchkit_test_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    std::filesystem::path path() const { return path_; }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace testutil
