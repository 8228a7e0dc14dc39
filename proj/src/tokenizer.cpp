#include "patchkit/tokenizer.hpp"

#include "patchkit/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>

namespace patchkit {

using nlohmann::json;

namespace {

std::string codepoint_to_utf8(uint32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
    return out;
}

// Decodes the next UTF-8 codepoint starting at s[i]; advances i. Invalid
// bytes decode as U+FFFD over one byte.
uint32_t next_codepoint(std::string_view s, size_t& i) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    if (b0 < 0x80) {
        ++i;
        return b0;
    }
    int extra = 0;
    uint32_t cp = 0;
    if ((b0 & 0xE0) == 0xC0) {
        extra = 1;
        cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
        extra = 2;
        cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
        extra = 3;
        cp = b0 & 0x07;
    } else {
        ++i;
        return 0xFFFD;
    }
    if (i + extra >= s.size()) {
        // Truncated sequence.
        ++i;
        return 0xFFFD;
    }
    for (int k = 1; k <= extra; ++k) {
        const auto b = static_cast<unsigned char>(s[i + k]);
        if ((b & 0xC0) != 0x80) {
            ++i;
            return 0xFFFD;
        }
        cp = (cp << 6) | (b & 0x3F);
    }
    i += static_cast<size_t>(extra) + 1;
    return cp;
}

// Unicode whitespace per the tokenizer's split pattern.
bool is_whitespace_cp(uint32_t cp) {
    switch (cp) {
        case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20:
        case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
        case 0x202F: case 0x205F: case 0x3000:
            return true;
        default:
            return (cp >= 0x2000 && cp <= 0x200A);
    }
}

// Letter test covering the scripts this project's prompt corpora use (Latin
// incl. supplements, Greek, Cyrillic, CJK, kana, Hangul). Codepoints outside
// these ranges fall into the punctuation/symbol branch, as the reference
// splitter does for symbols.
bool is_letter_cp(uint32_t cp) {
    if ((cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z')) return true;
    if (cp == 0xAA || cp == 0xB5 || cp == 0xBA) return true;
    if (cp >= 0xC0 && cp <= 0xFF && cp != 0xD7 && cp != 0xF7) return true;
    if (cp >= 0x100 && cp <= 0x2AF) return true;   // Latin extended
    if (cp >= 0x370 && cp <= 0x3FF) {
        // Greek block minus its punctuation/modifier slots.
        return cp != 0x374 && cp != 0x375 && cp != 0x37E && cp != 0x384 && cp != 0x385 &&
               cp != 0x387;
    }
    if (cp >= 0x400 && cp <= 0x4FF) return true;   // Cyrillic
    if (cp >= 0x3041 && cp <= 0x3096) return true; // Hiragana
    if (cp >= 0x30A1 && cp <= 0x30FA) return true; // Katakana
    if (cp >= 0x4E00 && cp <= 0x9FFF) return true; // CJK unified
    if (cp >= 0xAC00 && cp <= 0xD7A3) return true; // Hangul
    return false;
}

bool is_number_cp(uint32_t cp) {
    if (cp >= '0' && cp <= '9') return true;
    if (cp == 0xB2 || cp == 0xB3 || cp == 0xB9) return true; // superscripts
    if (cp >= 0xBC && cp <= 0xBE) return true;               // vulgar fractions
    if (cp >= 0x660 && cp <= 0x669) return true;             // Arabic-Indic
    if (cp >= 0xFF10 && cp <= 0xFF19) return true;           // fullwidth
    return false;
}

struct Pretoken {
    size_t begin; // byte offset
    size_t end;
};

// Splits text the way the GPT-2 tokenizer does before BPE:
//   's 't 're 've 'm 'll 'd | ?letters+ | ?digits+ | ?others+ |
//   ws+(not followed by non-ws) | ws+
// Byte offsets are returned so tokens can later be mapped back onto text.
std::vector<Pretoken> pretokenize(std::string_view text) {
    // Decode once into codepoints with their byte offsets.
    std::vector<uint32_t> cps;
    std::vector<size_t> offs; // offs[i] = byte offset of cps[i]; offs[n] = text.size()
    size_t i = 0;
    while (i < text.size()) {
        offs.push_back(i);
        cps.push_back(next_codepoint(text, i));
    }
    offs.push_back(text.size());
    const size_t n = cps.size();

    auto is_ws = [&](size_t k) { return is_whitespace_cp(cps[k]); };
    auto is_letter = [&](size_t k) { return is_letter_cp(cps[k]); };
    auto is_num = [&](size_t k) { return is_number_cp(cps[k]); };
    auto is_other = [&](size_t k) { return !is_ws(k) && !is_letter(k) && !is_num(k); };

    std::vector<Pretoken> out;
    size_t p = 0;
    while (p < n) {
        // Contractions ('s, 't, 're, 've, 'm, 'll, 'd), ASCII only.
        if (cps[p] == '\'') {
            static const std::vector<std::u32string> suffixes = {U"re", U"ve", U"ll", U"s",
                                                                 U"t",  U"m",  U"d"};
            size_t matched = 0;
            for (const auto& suf : suffixes) {
                if (p + suf.size() >= n) continue;
                bool ok = true;
                for (size_t k = 0; k < suf.size(); ++k)
                    if (cps[p + 1 + k] != static_cast<uint32_t>(suf[k])) ok = false;
                if (ok) {
                    matched = suf.size();
                    break;
                }
            }
            if (matched > 0) {
                out.push_back({offs[p], offs[p + 1 + matched]});
                p += 1 + matched;
                continue;
            }
        }

        // A single leading space attaches to the letter/digit/symbol run.
        const bool leading_space = cps[p] == ' ' && p + 1 < n;
        const size_t body = leading_space ? p + 1 : p;

        if (is_letter(body) || is_num(body) || is_other(body)) {
            size_t q = body;
            if (is_letter(body)) {
                while (q < n && is_letter(q)) ++q;
            } else if (is_num(body)) {
                while (q < n && is_num(q)) ++q;
            } else {
                while (q < n && is_other(q)) ++q;
            }
            out.push_back({offs[p], offs[q]});
            p = q;
            continue;
        }

        // Whitespace run: when followed by a non-space, the last whitespace
        // character joins the next token instead.
        size_t q = p;
        while (q < n && is_ws(q)) ++q;
        if (q < n && q - p > 1) {
            out.push_back({offs[p], offs[q - 1]});
            p = q - 1;
        } else {
            out.push_back({offs[p], offs[q]});
            p = q;
        }
    }
    return out;
}

std::vector<std::string>& mutable_byte_encoder() {
    static std::vector<std::string> table = [] {
        std::vector<std::string> t(256);
        // Printable bytes map to themselves; the rest get remapped to 256+k in
        // increasing byte order (the standard byte-level BPE table).
        std::vector<bool> direct(256, false);
        for (int b = 33; b <= 126; ++b) direct[b] = true;
        for (int b = 161; b <= 172; ++b) direct[b] = true;
        for (int b = 174; b <= 255; ++b) direct[b] = true;
        uint32_t next = 256;
        for (int b = 0; b < 256; ++b) {
            if (direct[b])
                t[b] = codepoint_to_utf8(static_cast<uint32_t>(b));
            else
                t[b] = codepoint_to_utf8(next++);
        }
        return t;
    }();
    return table;
}

const std::unordered_map<std::string, unsigned char>& byte_decoder() {
    static std::unordered_map<std::string, unsigned char> inv = [] {
        std::unordered_map<std::string, unsigned char> m;
        const auto& enc = mutable_byte_encoder();
        for (int b = 0; b < 256; ++b) m[enc[b]] = static_cast<unsigned char>(b);
        return m;
    }();
    return inv;
}

std::string merge_key(const std::string& a, const std::string& b) { return a + "\x01" + b; }

// Applies BPE merges to one pretoken already mapped into byte-encoder symbols.
std::vector<std::string> bpe_merge(std::vector<std::string> word, const Vocab& vocab) {
    if (word.size() < 2) return word;
    while (true) {
        int best_rank = std::numeric_limits<int>::max();
        size_t best_i = 0;
        for (size_t i = 0; i + 1 < word.size(); ++i) {
            const int r = vocab.merge_rank(word[i], word[i + 1]);
            if (r >= 0 && r < best_rank) {
                best_rank = r;
                best_i = i;
            }
        }
        if (best_rank == std::numeric_limits<int>::max()) break;
        // Merge every occurrence of the chosen pair, left to right.
        const std::string left = word[best_i];
        const std::string right = word[best_i + 1];
        std::vector<std::string> next;
        next.reserve(word.size());
        for (size_t i = 0; i < word.size();) {
            if (i + 1 < word.size() && word[i] == left && word[i + 1] == right) {
                next.push_back(left + right);
                i += 2;
            } else {
                next.push_back(word[i]);
                i += 1;
            }
        }
        word = std::move(next);
        if (word.size() < 2) break;
    }
    return word;
}

} // namespace

const std::vector<std::string>& byte_encoder() { return mutable_byte_encoder(); }

Vocab Vocab::load(const std::string& vocab_path, const std::string& merges_path) {
    Vocab v;

    std::ifstream vf(vocab_path);
    if (!vf) throw LoadError("cannot open vocab file: " + vocab_path);
    json j;
    try {
        vf >> j;
    } catch (const json::exception& e) {
        throw LoadError("bad vocab JSON in " + vocab_path + ": " + e.what());
    }
    if (!j.is_object()) throw LoadError("vocab file is not a JSON object: " + vocab_path);

    int max_id = -1;
    for (auto& [tok, id] : j.items()) {
        const int i = id.get<int>();
        v.token_to_id_[tok] = i;
        max_id = std::max(max_id, i);
    }
    if (max_id + 1 != static_cast<int>(v.token_to_id_.size()))
        throw LoadError("vocab ids are not dense 0..V-1 in " + vocab_path);
    v.id_to_token_.resize(static_cast<size_t>(max_id) + 1);
    for (const auto& [tok, i] : v.token_to_id_) v.id_to_token_[static_cast<size_t>(i)] = tok;

    std::ifstream mf(merges_path);
    if (!mf) throw LoadError("cannot open merges file: " + merges_path);
    std::string line;
    bool first = true;
    int rank = 0;
    while (std::getline(mf, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (first) {
            first = false;
            if (line.rfind("#version", 0) == 0) continue; // header line
        }
        if (line.empty()) continue;
        const size_t sp = line.find(' ');
        if (sp == std::string::npos)
            throw LoadError("malformed merge line '" + line + "' in " + merges_path);
        const std::string left = line.substr(0, sp);
        const std::string right = line.substr(sp + 1);
        if (v.token_to_id_.count(left) == 0 || v.token_to_id_.count(right) == 0 ||
            v.token_to_id_.count(left + right) == 0)
            throw LoadError("merge '" + line + "' references tokens missing from the vocab");
        v.merge_rank_[merge_key(left, right)] = rank++;
    }
    return v;
}

int Vocab::id_of(const std::string& token) const {
    const auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? -1 : it->second;
}

const std::string& Vocab::token_of(int id) const {
    if (id < 0 || id >= size())
        throw VocabError("token id " + std::to_string(id) + " out of range (V=" +
                         std::to_string(size()) + ")");
    return id_to_token_[static_cast<size_t>(id)];
}

int Vocab::merge_rank(const std::string& left, const std::string& right) const {
    const auto it = merge_rank_.find(merge_key(left, right));
    return it == merge_rank_.end() ? -1 : it->second;
}

Span TokenSequence::span(const std::string& label) const {
    const auto it = spans.find(label);
    if (it == spans.end()) throw SpanError("sequence has no span labeled '" + label + "'");
    return it->second;
}

TokenSequence encode(std::string_view text, const Vocab& vocab) {
    TokenSequence seq;
    seq.text = std::string(text);

    const auto& enc = mutable_byte_encoder();
    for (const Pretoken& pt : pretokenize(text)) {
        // Map raw bytes to byte-encoder symbols.
        std::vector<std::string> word;
        word.reserve(pt.end - pt.begin);
        for (size_t b = pt.begin; b < pt.end; ++b)
            word.push_back(enc[static_cast<unsigned char>(text[b])]);

        for (const std::string& piece : bpe_merge(std::move(word), vocab)) {
            const int id = vocab.id_of(piece);
            if (id < 0)
                throw VocabError("BPE produced token '" + piece +
                                 "' absent from the vocabulary (corrupt vocab/merges pair)");
            seq.ids.push_back(id);
        }
    }
    if (!seq.ids.empty()) seq.spans["last"] = Span{seq.length() - 1, seq.length()};
    return seq;
}

std::string decode(std::span<const int> ids, const Vocab& vocab) {
    const auto& dec = byte_decoder();
    std::string bytes;
    for (const int id : ids) {
        const std::string& tok = vocab.token_of(id);
        size_t i = 0;
        while (i < tok.size()) {
            const size_t start = i;
            next_codepoint(tok, i);
            const auto it = dec.find(tok.substr(start, i - start));
            if (it == dec.end())
                throw VocabError("token '" + tok + "' contains a non-byte-encoder symbol");
            bytes.push_back(static_cast<char>(it->second));
        }
    }
    return bytes;
}

Span locate_span(const TokenSequence& seq, const Vocab& vocab, std::string_view surface,
                 int occurrence) {
    if (occurrence < 1) throw SpanError("occurrence index is 1-based");

    // Byte offset of the requested occurrence in the text.
    size_t pos = 0;
    int seen = 0;
    size_t found = std::string::npos;
    while ((pos = seq.text.find(surface, pos)) != std::string::npos) {
        if (++seen == occurrence) {
            found = pos;
            break;
        }
        pos += 1;
    }
    if (found == std::string::npos)
        throw SpanError("surface '" + std::string(surface) + "' occurrence " +
                        std::to_string(occurrence) + " not found in text");

    // Token boundaries in byte offsets.
    std::vector<size_t> starts(seq.ids.size() + 1);
    size_t off = 0;
    for (size_t t = 0; t < seq.ids.size(); ++t) {
        starts[t] = off;
        off += decode(std::span<const int>(&seq.ids[t], 1), vocab).size();
    }
    starts[seq.ids.size()] = off;

    const size_t lo = found;
    const size_t hi = found + surface.size();
    int begin = -1, end = -1;
    for (size_t t = 0; t < seq.ids.size(); ++t) {
        if (starts[t] == lo) begin = static_cast<int>(t);
        if (starts[t + 1] == hi) end = static_cast<int>(t) + 1;
    }
    if (begin < 0 || end < 0 || begin >= end)
        throw AlignmentError("surface '" + std::string(surface) +
                             "' is not aligned with token boundaries");
    return Span{begin, end};
}

} // namespace patchkit
