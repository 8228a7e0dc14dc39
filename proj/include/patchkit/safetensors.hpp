#pragma once

#include "patchkit/kernels.hpp"

#include <map>
#include <string>
#include <vector>

namespace patchkit {

// Minimal reader for the safetensors container: 8-byte little-endian header
// length, JSON header mapping tensor name -> {dtype, shape, data_offsets},
// then the raw data section. Only F32 tensors are accepted.
class SafetensorsFile {
public:
    explicit SafetensorsFile(const std::string& path);

    bool has(const std::string& name) const;
    std::vector<std::string> names() const;
    std::vector<int64_t> shape(const std::string& name) const;

    // Loads a tensor; `name` must exist. 1-D tensors come back as 1 x n.
    Matrix tensor_2d(const std::string& name) const;
    std::vector<float> tensor_1d(const std::string& name) const;

private:
    struct Entry {
        std::vector<int64_t> shape;
        uint64_t begin = 0;
        uint64_t end = 0;
    };
    const Entry& entry(const std::string& name) const;
    void read_raw(const Entry& e, float* out, size_t count) const;

    std::string path_;
    std::map<std::string, Entry> entries_;
    uint64_t data_start_ = 0;
    uint64_t file_size_ = 0;
};

} // namespace patchkit
