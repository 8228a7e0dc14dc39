#pragma once

#include "patchkit/intervention.hpp"
#include "patchkit/model.hpp"
#include "patchkit/rng.hpp"
#include "patchkit/tokenizer.hpp"

#include <string>
#include <vector>

namespace patchkit {

enum class CorruptionMethod { GN, STR, ABC };

CorruptionMethod parse_corruption_method(const std::string& s);
const char* to_string(CorruptionMethod m);

struct CorruptionSpec {
    CorruptionMethod method = CorruptionMethod::STR;
    std::vector<std::string> targets;     // span labels, e.g. {"S2"} or {"S1","IO"}
    double noise_scale_multiplier = 3.0;  // GN only
    uint64_t seed = 0;
    std::vector<std::string> replacement_pool; // names / nouns / numbers
};

// nu = multiplier x population SD over all scalar entries of the embedding
// vectors of the tokens occurring in the dataset prompts (each occurrence
// counted). Throws ConfigError on an empty dataset.
double embedding_noise_scale(const std::vector<TokenSequence>& dataset, const Model& model,
                             double multiplier);

// Adds i.i.d. N(0, nu^2) per-coordinate noise to the combined token+position
// embedding rows at the target spans. Deterministic under `seed`; the
// returned rows are consumed verbatim by both corrupted and patched runs.
EmbeddingOverride corrupt_gn(const TokenSequence& seq, const std::vector<std::string>& targets,
                             double nu, const Model& model, uint64_t seed);

// Splices `replacement_ids` over the labeled span. The result must re-encode
// from its text to the exact same ids (merges across the splice boundary make
// a prompt unusable); otherwise throws AlignmentError. Span lengths must
// match.
TokenSequence replace_span(const TokenSequence& seq, const std::string& label,
                           std::span<const int> replacement_ids, const Vocab& vocab);

// Symmetric token replacement: each target span is swapped for a pool entry
// that tokenizes to the same length (entries are drawn until one fits; pool
// exhaustion throws AlignmentError).
TokenSequence corrupt_str(const TokenSequence& seq, const CorruptionSpec& spec, const Vocab& vocab,
                          Rng& rng);

// Fully-random replacement: S1, S2 and IO are replaced by three distinct
// pool names, all different from the originals, each single-token.
TokenSequence corrupt_abc(const TokenSequence& seq, const CorruptionSpec& spec, const Vocab& vocab,
                          Rng& rng);

} // namespace patchkit
