#pragma once

#include "patchkit/corruption.hpp"
#include "patchkit/intervention.hpp"
#include "patchkit/model.hpp"
#include "patchkit/tokenizer.hpp"

#include <array>
#include <string>
#include <vector>

namespace patchkit {

// Indirect-object-identification sentences. Templates hold {A}/{B}/{S}/
// {PLACE}/{OBJECT} slots; {S} is filled with A or B, making the two mention
// orders. Names must be single-token under the loaded vocab.
struct IOISpec {
    std::vector<std::string> templates; // empty = built-in set
    std::vector<std::string> names;
    std::vector<std::string> places;  // empty = built-in set
    std::vector<std::string> objects; // empty = built-in set
    int n_prompts = 500;
    uint64_t seed = 0;
};

// One record of the paired factual-recall dataset.
struct FactPair {
    std::array<std::string, 2> pair;
    std::array<std::string, 2> answers;
    int length = 0;
    std::string category;
};

struct GreaterThanSpec {
    std::vector<std::string> nouns;
    int century_min = 11;
    int century_max = 17;
    int yy_min = 2;  // {00, 01, 99} stay excluded regardless
    int yy_max = 98;
    int n_prompts = 300;
    uint64_t seed = 0;
};

struct DocstringSpec {
    std::vector<std::string> words; // single-token English words
    int n_prompts = 200;
    uint64_t seed = 0;
};

struct ArithmeticSpec {
    char op = '+'; // '+', '-' or '*'
    int operand_min = 1;
    int operand_max = 250; // 23 for multiplication
    int n_prompts = 200;
    uint64_t seed = 0;
    bool filter_model_correct = true;
};

// Grammatical two-clause sentences with S1/S2/IO spans. STR on S2 swaps in
// the IO name (answer flips to the subject); STR on S1+IO swaps in two fresh
// names; ABC replaces all three; GN pairs carry the clean tokens and get the
// embedding override later. r is always the IO token, r_prime the S token
// except where STR redefines the corrupted answer.
std::vector<PromptPair> gen_ioi(const IOISpec& spec, const CorruptionSpec& corruption,
                                const Vocab& vocab);

// Loads the paired-prompts JSON (array of {pair, answer, length, category}),
// validates token lengths and single-token answers, and reports rejected
// records into `rejects` when given.
std::vector<FactPair> load_paired_facts(const std::string& path, const Vocab& vocab,
                                        std::vector<std::string>* rejects = nullptr);

// Emits both orientations of every pair as PromptPairs with subject spans
// (inferred as the tokens before the pair's common suffix).
std::vector<PromptPair> fact_prompt_pairs(const std::vector<FactPair>& facts,
                                          const CorruptionSpec& corruption, const Vocab& vocab);

// "The <noun> lasted from the year XXYY to the year XX" prompts whose year
// tokenizes as [XX][YY], with greater/less answer sets and STR target
// YY <- "01".
std::vector<PromptPair> gen_greater_than(const GreaterThanSpec& spec,
                                         const CorruptionSpec& corruption, const Vocab& vocab);

// Python docstring completion prompts; the answer is the C_def parameter
// name. Fixed token length across prompts (enables by-position sweeps).
std::vector<PromptPair> gen_docstring(const DocstringSpec& spec,
                                      const CorruptionSpec& corruption, const Vocab& vocab);

// Two-shot arithmetic prompts, keeping only those the model answers
// correctly (unless disabled). STR redraws the third operand pair and
// recomputes the corrupted answer.
std::vector<PromptPair> gen_arithmetic(const ArithmeticSpec& spec,
                                       const CorruptionSpec& corruption, const Vocab& vocab,
                                       const Model& model);

// Pool helpers: newline-delimited file, blank lines skipped.
std::vector<std::string> load_pool(const std::string& path);
// Entries whose " <entry>" form is a single token under `vocab`.
std::vector<std::string> filter_single_token(const std::vector<std::string>& pool,
                                             const Vocab& vocab);

} // namespace patchkit
