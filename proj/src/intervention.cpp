#include "patchkit/intervention.hpp"

#include "patchkit/errors.hpp"

#include <numeric>

namespace patchkit {

std::vector<int> PositionSel::resolve(const TokenSequence& seq) const {
    switch (kind) {
        case Kind::All:
            return {}; // empty = all positions
        case Kind::Fixed:
            if (index < 0 || index >= seq.length())
                throw PatchError("fixed position " + std::to_string(index) +
                                 " exceeds sequence length " + std::to_string(seq.length()));
            return {index};
        case Kind::SpanAll: {
            const Span s = seq.span(label);
            std::vector<int> out(static_cast<size_t>(s.size()));
            std::iota(out.begin(), out.end(), s.begin);
            return out;
        }
        case Kind::SpanLast: {
            const Span s = seq.span(label);
            return {s.end - 1};
        }
    }
    return {};
}

CaptureSet PatchTemplate::capture_keys() const {
    CaptureSet set;
    for (const SiteTemplate& s : sites) set.add(s.kind, s.layer, s.head);
    return set;
}

PatchSpec PatchTemplate::resolve(const ActivationCache& source, const TokenSequence& clean) const {
    PatchSpec spec;
    spec.source = &source;
    spec.sites.reserve(sites.size());
    for (const SiteTemplate& s : sites)
        spec.sites.push_back(HookSite{s.kind, s.layer, s.head, s.positions.resolve(clean)});
    return spec;
}

PatchTemplate value_patch_spec(const std::vector<std::pair<int, int>>& heads) {
    PatchTemplate t;
    for (const auto& [layer, head] : heads)
        t.sites.push_back({SiteKind::AttnValue, layer, head, PositionSel::all()});
    return t;
}

PatchTemplate head_out_patch(int layer, int head) {
    PatchTemplate t;
    t.sites.push_back({SiteKind::HeadOut, layer, head, PositionSel::all()});
    return t;
}

PatchTemplate mlp_patch(const std::vector<int>& layers, PositionSel positions) {
    PatchTemplate t;
    for (const int l : layers) t.sites.push_back({SiteKind::MlpOut, l, -1, positions});
    return t;
}

void PromptPair::validate_lengths() const {
    if (clean.length() != corrupt.length())
        throw AlignmentError("clean prompt has " + std::to_string(clean.length()) +
                             " tokens but corrupted has " + std::to_string(corrupt.length()));
}

RunTriple run_triple(const Model& model, const PromptPair& pair, const PatchTemplate& patch,
                     const CaptureSet& capture_extra) {
    pair.validate_lengths();

    RunTriple triple;
    triple.pair = &pair;

    CaptureSet clean_capture = patch.capture_keys();
    clean_capture.merge(capture_extra);

    ForwardOptions clean_opt;
    clean_opt.capture = &clean_capture;
    triple.clean = forward(model, pair.clean.ids, clean_opt);

    ForwardOptions corrupt_opt;
    corrupt_opt.capture = capture_extra.empty() ? nullptr : &capture_extra;
    if (pair.override_rows.has_value()) corrupt_opt.embed_override = &*pair.override_rows;
    triple.corrupted = forward(model, pair.corrupt.ids, corrupt_opt);

    const PatchSpec spec = patch.resolve(*triple.clean.cache, pair.clean);
    ForwardOptions patched_opt = corrupt_opt;
    patched_opt.patches = &spec;
    triple.patched = forward(model, pair.corrupt.ids, patched_opt);

    return triple;
}

double attention_to_span(const ForwardRecord& record, int layer, int head, int from_pos,
                         Span to_span) {
    const Matrix& pattern = record.cache->at(
        {SiteKind::AttnPattern, static_cast<int16_t>(layer), static_cast<int16_t>(head)});
    if (from_pos < 0 || from_pos >= pattern.rows)
        throw PatchError("attention source position out of range");
    if (to_span.begin < 0 || to_span.end > pattern.cols || to_span.begin >= to_span.end)
        throw SpanError("attention target span out of range");
    double total = 0.0;
    for (int c = to_span.begin; c < to_span.end; ++c) total += pattern.at(from_pos, c);
    return total;
}

} // namespace patchkit
