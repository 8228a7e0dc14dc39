#pragma once

#include "patchkit/hooks.hpp"
#include "patchkit/model.hpp"
#include "patchkit/tokenizer.hpp"

#include <optional>
#include <string>
#include <vector>

namespace patchkit {

// Which positions a patch template applies to, resolved per prompt.
struct PositionSel {
    enum class Kind { All, Fixed, SpanAll, SpanLast };
    Kind kind = Kind::All;
    int index = 0;     // Fixed
    std::string label; // SpanAll / SpanLast

    static PositionSel all() { return {}; }
    static PositionSel fixed(int i) { return {Kind::Fixed, i, {}}; }
    static PositionSel span_all(std::string l) { return {Kind::SpanAll, 0, std::move(l)}; }
    static PositionSel span_last(std::string l) { return {Kind::SpanLast, 0, std::move(l)}; }

    std::vector<int> resolve(const TokenSequence& seq) const;
};

// One site of a patch template; positions are symbolic until resolved
// against a concrete prompt.
struct SiteTemplate {
    SiteKind kind = SiteKind::HeadOut;
    int layer = 0;
    int head = -1;
    PositionSel positions;
};

// Declarative patch shared across prompts: which sites to restore from the
// clean run, at which (symbolic) positions.
struct PatchTemplate {
    std::vector<SiteTemplate> sites;

    CaptureSet capture_keys() const;
    PatchSpec resolve(const ActivationCache& source, const TokenSequence& clean) const;
};

// Template selecting attn_value at all positions for the listed heads
// (value patching, e.g. of the S-Inhibition heads).
PatchTemplate value_patch_spec(const std::vector<std::pair<int, int>>& heads);

// Template patching one head's output at all positions.
PatchTemplate head_out_patch(int layer, int head);

// Template jointly patching mlp_out at the listed layers.
PatchTemplate mlp_patch(const std::vector<int>& layers, PositionSel positions);

// Clean prompt, corrupted counterpart and answers for one patching instance.
// For GN corruption `override_rows` carries the exact noised embedding rows;
// `corrupt` then holds the clean token ids so both corrupted and patched runs
// see the identical input.
struct PromptPair {
    TokenSequence clean;
    TokenSequence corrupt;
    std::optional<EmbeddingOverride> override_rows;
    int r = -1;       // answer token id
    int r_prime = -1; // incorrect-answer token id
    std::vector<int> greater_set, less_set; // greater-than answer sets

    void validate_lengths() const; // throws AlignmentError on length mismatch
};

// The three forward passes: clean (cached), corrupted, patched.
struct RunTriple {
    ForwardRecord clean;
    ForwardRecord corrupted;
    ForwardRecord patched;
    const PromptPair* pair = nullptr;
};

// Runs the three-pass patching procedure. The clean run caches every site the
// template needs plus `capture_extra`; the corrupted and patched runs share
// the identical corrupted input and also record `capture_extra`.
RunTriple run_triple(const Model& model, const PromptPair& pair, const PatchTemplate& patch,
                     const CaptureSet& capture_extra = {});

// Total attention weight from `from_pos` to the positions of `to_span` for
// one head, read from a captured attention pattern. Lies in [0, 1].
double attention_to_span(const ForwardRecord& record, int layer, int head, int from_pos,
                         Span to_span);

} // namespace patchkit
