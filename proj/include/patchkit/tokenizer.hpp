#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace patchkit {

// Half-open token-index range [begin, end).
struct Span {
    int begin = 0;
    int end = 0;
    int size() const { return end - begin; }
    bool operator==(const Span&) const = default;
};

// GPT-2 byte-level BPE vocabulary: token string -> id map plus the ranked
// merge list. Immutable after load; encode/decode are safe to call from many
// threads.
class Vocab {
public:
    // vocab_path: JSON object token -> id ("vocab.json" layout).
    // merges_path: space-separated merge pairs, one per line, first line a
    // header ("merges.txt" layout).
    static Vocab load(const std::string& vocab_path, const std::string& merges_path);

    int size() const { return static_cast<int>(id_to_token_.size()); }
    int id_of(const std::string& token) const; // -1 when absent
    const std::string& token_of(int id) const; // throws VocabError when out of range

    // Merge rank lookup; returns -1 when the pair is not a merge.
    int merge_rank(const std::string& left, const std::string& right) const;

private:
    std::unordered_map<std::string, int> token_to_id_;
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> merge_rank_;
};

// Prompt as token ids plus named key-token spans (S1, S2, IO, subject, YY,
// C_def, last, ...). decode(ids) always round-trips to text.
struct TokenSequence {
    std::vector<int> ids;
    std::string text;
    std::map<std::string, Span> spans;

    int length() const { return static_cast<int>(ids.size()); }
    bool has_span(const std::string& label) const { return spans.count(label) != 0; }
    Span span(const std::string& label) const; // throws SpanError when missing
};

TokenSequence encode(std::string_view text, const Vocab& vocab);
std::string decode(std::span<const int> ids, const Vocab& vocab);

// Token range covering the `occurrence`-th (1-based) occurrence of `surface`
// in seq.text. Throws SpanError when the occurrence does not exist and
// AlignmentError when the occurrence is not aligned with token boundaries
// (which signals that STR cannot be applied there).
Span locate_span(const TokenSequence& seq, const Vocab& vocab, std::string_view surface,
                 int occurrence);

// The 256-entry byte -> printable-unicode table used by the byte-level BPE
// (exposed for tests).
const std::vector<std::string>& byte_encoder();

} // namespace patchkit
