#include "patchkit/corruption.hpp"

#include "patchkit/errors.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace patchkit {

CorruptionMethod parse_corruption_method(const std::string& s) {
    if (s == "GN" || s == "gn") return CorruptionMethod::GN;
    if (s == "STR" || s == "str") return CorruptionMethod::STR;
    if (s == "ABC" || s == "abc") return CorruptionMethod::ABC;
    throw ConfigError("unknown corruption method '" + s + "' (expected GN, STR or ABC)");
}

const char* to_string(CorruptionMethod m) {
    switch (m) {
        case CorruptionMethod::GN: return "GN";
        case CorruptionMethod::STR: return "STR";
        case CorruptionMethod::ABC: return "ABC";
    }
    return "?";
}

double embedding_noise_scale(const std::vector<TokenSequence>& dataset, const Model& model,
                             double multiplier) {
    if (dataset.empty()) throw ConfigError("noise scale needs a non-empty dataset");
    double sum = 0.0, sum_sq = 0.0;
    size_t count = 0;
    for (const TokenSequence& seq : dataset) {
        for (const int id : seq.ids) {
            for (const float v : model.weights.token_embedding.row(id)) {
                sum += v;
                sum_sq += static_cast<double>(v) * v;
                ++count;
            }
        }
    }
    if (count == 0) throw ConfigError("noise scale needs at least one token");
    const double mean = sum / static_cast<double>(count);
    const double var = std::max(0.0, sum_sq / static_cast<double>(count) - mean * mean);
    return multiplier * std::sqrt(var);
}

EmbeddingOverride corrupt_gn(const TokenSequence& seq, const std::vector<std::string>& targets,
                             double nu, const Model& model, uint64_t seed) {
    std::vector<int> positions;
    for (const std::string& label : targets) {
        const Span s = seq.span(label); // throws SpanError when unresolved
        for (int p = s.begin; p < s.end; ++p) positions.push_back(p);
    }
    std::sort(positions.begin(), positions.end());
    positions.erase(std::unique(positions.begin(), positions.end()), positions.end());

    EmbeddingOverride ov;
    ov.positions = positions;
    ov.rows = Matrix(static_cast<int>(positions.size()), model.config.d_model);
    Rng rng(seed);
    for (size_t k = 0; k < positions.size(); ++k) {
        const int p = positions[k];
        auto row = ov.rows.row(static_cast<int>(k));
        embed_row(model, seq.ids[static_cast<size_t>(p)], p, row);
        for (float& v : row) v += static_cast<float>(nu * rng.normal());
    }
    return ov;
}

TokenSequence replace_span(const TokenSequence& seq, const std::string& label,
                           std::span<const int> replacement_ids, const Vocab& vocab) {
    const Span s = seq.span(label);
    if (static_cast<int>(replacement_ids.size()) != s.size())
        throw AlignmentError("replacement for span '" + label + "' has " +
                             std::to_string(replacement_ids.size()) + " tokens, span has " +
                             std::to_string(s.size()));

    std::vector<int> ids = seq.ids;
    std::copy(replacement_ids.begin(), replacement_ids.end(), ids.begin() + s.begin);

    TokenSequence out;
    out.ids = ids;
    out.text = decode(ids, vocab);
    out.spans = seq.spans;

    // Hard invariant: the corrupted text must re-encode to exactly these ids,
    // otherwise position-aligned patching is ill-defined.
    const TokenSequence check = encode(out.text, vocab);
    if (check.ids != out.ids)
        throw AlignmentError("replacement for span '" + label +
                             "' merges across token boundaries after re-encoding");
    return out;
}

namespace {

// Draws pool entries (without replacement) until one tokenizes to `len` ids.
std::vector<int> draw_fitting(const std::vector<std::string>& pool, int len, const Vocab& vocab,
                              Rng& rng, const std::set<std::string>& exclude) {
    std::vector<size_t> order(pool.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    // Fisher-Yates driven by the deterministic stream.
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.uniform(i)]);
    for (const size_t idx : order) {
        const std::string& cand = pool[idx];
        if (exclude.count(cand) != 0) continue;
        const TokenSequence enc = encode(cand, vocab);
        if (enc.length() == len) return enc.ids;
    }
    throw AlignmentError("replacement pool has no entry tokenizing to " + std::to_string(len) +
                         " tokens");
}

} // namespace

TokenSequence corrupt_str(const TokenSequence& seq, const CorruptionSpec& spec, const Vocab& vocab,
                          Rng& rng) {
    if (spec.replacement_pool.empty())
        throw ConfigError("STR corruption needs a replacement pool or a paired prompt");
    TokenSequence out = seq;
    for (const std::string& label : spec.targets) {
        const Span s = out.span(label);
        const std::string original = decode(
            std::span<const int>(out.ids.data() + s.begin, static_cast<size_t>(s.size())), vocab);
        const std::vector<int> repl =
            draw_fitting(spec.replacement_pool, s.size(), vocab, rng, {original});
        out = replace_span(out, label, repl, vocab);
    }
    return out;
}

TokenSequence corrupt_abc(const TokenSequence& seq, const CorruptionSpec& spec, const Vocab& vocab,
                          Rng& rng) {
    static const std::vector<std::string> kNameLabels = {"S1", "S2", "IO"};
    if (spec.replacement_pool.size() < 3)
        throw ConfigError("ABC corruption needs a pool of at least 3 names");

    // Never reuse the original names, and keep the three draws distinct.
    std::set<std::string> exclude;
    for (const std::string& label : kNameLabels) {
        const Span s = seq.span(label);
        exclude.insert(decode(
            std::span<const int>(seq.ids.data() + s.begin, static_cast<size_t>(s.size())), vocab));
    }

    TokenSequence out = seq;
    for (const std::string& label : kNameLabels) {
        const Span s = out.span(label);
        std::vector<int> repl;
        try {
            repl = draw_fitting(spec.replacement_pool, s.size(), vocab, rng, exclude);
        } catch (const AlignmentError&) {
            throw ConfigError("ABC name pool exhausted (needs 3 distinct single-token names "
                              "different from the originals)");
        }
        exclude.insert(decode(std::span<const int>(repl.data(), repl.size()), vocab));
        out = replace_span(out, label, repl, vocab);
    }
    return out;
}

} // namespace patchkit
