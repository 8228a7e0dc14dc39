#include "patchkit/safetensors.hpp"

#include "patchkit/errors.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>

namespace patchkit {

using nlohmann::json;

SafetensorsFile::SafetensorsFile(const std::string& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open weights file: " + path);

    in.seekg(0, std::ios::end);
    file_size_ = static_cast<uint64_t>(in.tellg());
    in.seekg(0, std::ios::beg);

    uint8_t len_bytes[8];
    if (!in.read(reinterpret_cast<char*>(len_bytes), 8))
        throw LoadError("truncated safetensors file (no header length): " + path);
    uint64_t header_len = 0;
    for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | len_bytes[i];

    if (8 + header_len > file_size_)
        throw LoadError("truncated safetensors file (header exceeds file): " + path);

    std::string header(header_len, '\0');
    if (!in.read(header.data(), static_cast<std::streamsize>(header_len)))
        throw LoadError("truncated safetensors header: " + path);
    data_start_ = 8 + header_len;

    json j;
    try {
        j = json::parse(header);
    } catch (const json::exception& e) {
        throw LoadError("bad safetensors header in " + path + ": " + e.what());
    }

    for (auto& [name, spec] : j.items()) {
        if (name == "__metadata__") continue;
        Entry e;
        const std::string dtype = spec.at("dtype").get<std::string>();
        if (dtype != "F32")
            throw LoadError("tensor '" + name + "' has dtype " + dtype + ", only F32 supported");
        e.shape = spec.at("shape").get<std::vector<int64_t>>();
        const auto offsets = spec.at("data_offsets").get<std::vector<uint64_t>>();
        if (offsets.size() != 2 || offsets[1] < offsets[0])
            throw LoadError("tensor '" + name + "' has malformed data_offsets");
        e.begin = offsets[0];
        e.end = offsets[1];

        uint64_t count = 1;
        for (const int64_t d : e.shape) count *= static_cast<uint64_t>(d);
        if (e.end - e.begin != count * sizeof(float))
            throw LoadError("tensor '" + name + "' byte span does not match its shape");
        if (data_start_ + e.end > file_size_)
            throw LoadError("truncated safetensors file: tensor '" + name + "' extends past EOF");
        entries_.emplace(name, std::move(e));
    }
}

bool SafetensorsFile::has(const std::string& name) const { return entries_.count(name) != 0; }

std::vector<std::string> SafetensorsFile::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
}

const SafetensorsFile::Entry& SafetensorsFile::entry(const std::string& name) const {
    const auto it = entries_.find(name);
    if (it == entries_.end()) throw LoadError("missing tensor '" + name + "' in " + path_);
    return it->second;
}

std::vector<int64_t> SafetensorsFile::shape(const std::string& name) const {
    return entry(name).shape;
}

void SafetensorsFile::read_raw(const Entry& e, float* out, size_t count) const {
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw LoadError("cannot reopen weights file: " + path_);
    in.seekg(static_cast<std::streamoff>(data_start_ + e.begin));
    if (!in.read(reinterpret_cast<char*>(out), static_cast<std::streamsize>(count * sizeof(float))))
        throw LoadError("failed reading tensor data from " + path_);
    for (size_t i = 0; i < count; ++i) {
        if (!std::isfinite(out[i]))
            throw LoadError("non-finite value in tensor data of " + path_);
    }
}

Matrix SafetensorsFile::tensor_2d(const std::string& name) const {
    const Entry& e = entry(name);
    int rows = 1, cols = 1;
    if (e.shape.size() == 2) {
        rows = static_cast<int>(e.shape[0]);
        cols = static_cast<int>(e.shape[1]);
    } else if (e.shape.size() == 1) {
        cols = static_cast<int>(e.shape[0]);
    } else {
        throw LoadError("tensor '" + name + "' is not 1-D or 2-D");
    }
    Matrix m(rows, cols);
    read_raw(e, m.data.data(), m.data.size());
    return m;
}

std::vector<float> SafetensorsFile::tensor_1d(const std::string& name) const {
    const Entry& e = entry(name);
    if (e.shape.size() != 1) throw LoadError("tensor '" + name + "' is not 1-D");
    std::vector<float> v(static_cast<size_t>(e.shape[0]));
    read_raw(e, v.data(), v.size());
    return v;
}

} // namespace patchkit
