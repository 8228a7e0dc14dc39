#include "patchkit/hooks.hpp"

#include "patchkit/errors.hpp"

#include <algorithm>
#include <set>

namespace patchkit {

const char* to_string(SiteKind kind) {
    switch (kind) {
        case SiteKind::EmbedOut: return "embed_out";
        case SiteKind::AttnPattern: return "attn_pattern";
        case SiteKind::AttnValue: return "attn_value";
        case SiteKind::HeadOut: return "head_out";
        case SiteKind::AttnSublayerOut: return "attn_sublayer_out";
        case SiteKind::MlpOut: return "mlp_out";
        case SiteKind::ResidPost: return "resid_post";
        case SiteKind::FinalLogits: return "final_logits";
    }
    return "?";
}

bool kind_needs_head(SiteKind kind) {
    return kind == SiteKind::AttnPattern || kind == SiteKind::AttnValue ||
           kind == SiteKind::HeadOut;
}

std::string to_string(const SiteKey& key) {
    std::string s = to_string(key.kind);
    s += "[L" + std::to_string(key.layer);
    if (key.head >= 0) s += ".H" + std::to_string(key.head);
    s += "]";
    return s;
}

const Matrix& ActivationCache::at(SiteKey key) const {
    const auto it = entries.find(key);
    if (it == entries.end())
        throw CacheMissError("site " + to_string(key) + " was not captured in this run");
    return it->second;
}

void PatchSpec::validate(int seq_len, int n_layers, int n_heads) const {
    if (source == nullptr) throw PatchError("patch spec has no source cache");
    std::set<SiteKey> seen;
    for (const HookSite& site : sites) {
        const SiteKey key = site.key();
        if (!seen.insert(key).second)
            throw PatchError("site " + to_string(key) + " listed twice in patch spec");
        if (kind_needs_head(site.kind) != (site.head >= 0))
            throw PatchError("site " + to_string(key) + " has an invalid head index for its kind");
        if (site.layer < 0 || site.layer >= n_layers)
            throw PatchError("site " + to_string(key) + " layer out of range");
        if (site.head >= n_heads)
            throw PatchError("site " + to_string(key) + " head out of range");
        if (!source->has(key))
            throw PatchError("site " + to_string(key) + " missing from the source cache");
        for (const int p : site.positions) {
            if (p < 0 || p >= seq_len)
                throw PatchError("site " + to_string(key) + " position " + std::to_string(p) +
                                 " exceeds sequence length " + std::to_string(seq_len));
        }
    }
}

} // namespace patchkit
