#pragma once

#include "patchkit/kernels.hpp"

#include <compare>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace patchkit {

// Every activation the forward pass can capture or overwrite.
enum class SiteKind : uint8_t {
    EmbedOut,        // residual stream right after token+position embedding
    AttnPattern,     // per-head post-softmax attention weights, N x N
    AttnValue,       // per-head value rows V = ln(x) W_V, N x head_dim
    HeadOut,         // per-head z = A V before the output projection, N x head_dim
    AttnSublayerOut, // residual stream after the attention sublayer add
    MlpOut,          // MLP sublayer output before the residual add, N x d
    ResidPost,       // residual stream after the full block
    FinalLogits,     // N x V
};

const char* to_string(SiteKind kind);
bool kind_needs_head(SiteKind kind);

// (kind, layer, head) identity of one hook site; head is -1 for sites that
// are not per-head.
struct SiteKey {
    SiteKind kind = SiteKind::EmbedOut;
    int16_t layer = 0;
    int16_t head = -1;

    auto operator<=>(const SiteKey&) const = default;
};

std::string to_string(const SiteKey& key);

// A hook site plus the positions a patch applies to (empty = all positions).
struct HookSite {
    SiteKind kind = SiteKind::EmbedOut;
    int layer = 0;
    int head = -1;
    std::vector<int> positions;

    SiteKey key() const { return {kind, static_cast<int16_t>(layer), static_cast<int16_t>(head)}; }
};

// Activations stored from one forward pass, full tensors per captured site.
// Immutable once the producing run returns.
struct ActivationCache {
    std::map<SiteKey, Matrix> entries;
    int seq_len = 0;

    bool has(SiteKey key) const { return entries.count(key) != 0; }
    const Matrix& at(SiteKey key) const;
};

// Declarative description of which sites to overwrite from a cache during a
// forward pass. Sites must exist in the source cache and may not repeat.
struct PatchSpec {
    const ActivationCache* source = nullptr;
    std::vector<HookSite> sites;

    // Throws PatchError on duplicate sites, cache misses, head/kind
    // mismatches, or positions outside [0, seq_len).
    void validate(int seq_len, int n_layers, int n_heads) const;
};

// Exact replacement rows for the embedding output at chosen positions. This
// is how Gaussian-noise corruption enters the model: the corrupted and
// patched runs both consume the identical noised rows.
struct EmbeddingOverride {
    std::vector<int> positions;
    Matrix rows; // positions.size() x d_model
};

// Set of sites to record during a forward pass.
struct CaptureSet {
    std::set<SiteKey> keys;

    bool contains(SiteKey key) const { return keys.count(key) != 0; }
    bool empty() const { return keys.empty(); }
    void add(SiteKind kind, int layer = 0, int head = -1) {
        keys.insert({kind, static_cast<int16_t>(layer), static_cast<int16_t>(head)});
    }
    void merge(const CaptureSet& other) { keys.insert(other.keys.begin(), other.keys.end()); }
};

} // namespace patchkit
