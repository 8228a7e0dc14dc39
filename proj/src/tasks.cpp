#include "patchkit/tasks.hpp"

#include "patchkit/errors.hpp"
#include "patchkit/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <set>

namespace patchkit {

using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Prompt assembly

// Builds a TokenSequence chunk by chunk so span indices are known exactly,
// then verifies the assembled ids re-encode from the final text (a chunk
// boundary that merges under BPE makes the prompt unusable).
class SequenceBuilder {
public:
    explicit SequenceBuilder(const Vocab& vocab) : vocab_(vocab) {}

    SequenceBuilder& literal(const std::string& text) {
        append(text);
        return *this;
    }

    SequenceBuilder& labeled(const std::string& label, const std::string& text) {
        const int begin = seq_.length();
        append(text);
        seq_.spans[label] = Span{begin, seq_.length()};
        return *this;
    }

    TokenSequence finish() {
        if (seq_.ids.empty()) throw ConfigError("built an empty prompt");
        seq_.spans["last"] = Span{seq_.length() - 1, seq_.length()};
        const TokenSequence check = encode(seq_.text, vocab_);
        if (check.ids != seq_.ids)
            throw AlignmentError("prompt chunks merge across boundaries: '" + seq_.text + "'");
        return std::move(seq_);
    }

private:
    void append(const std::string& text) {
        const TokenSequence enc = encode(text, vocab_);
        seq_.ids.insert(seq_.ids.end(), enc.ids.begin(), enc.ids.end());
        seq_.text += text;
    }

    const Vocab& vocab_;
    TokenSequence seq_;
};

struct Piece {
    bool is_slot = false;
    std::string text;        // literal text, or slot name
    bool leading_space = false; // slot consumes the space before it
};

std::vector<Piece> parse_template(const std::string& tmpl) {
    std::vector<Piece> pieces;
    std::string lit;
    size_t i = 0;
    while (i < tmpl.size()) {
        if (tmpl[i] == '{') {
            const size_t close = tmpl.find('}', i);
            if (close == std::string::npos)
                throw ConfigError("unterminated placeholder in template: " + tmpl);
            Piece slot;
            slot.is_slot = true;
            slot.text = tmpl.substr(i + 1, close - i - 1);
            if (!lit.empty() && lit.back() == ' ') {
                lit.pop_back();
                slot.leading_space = true;
            }
            if (!lit.empty()) pieces.push_back({false, lit, false});
            lit.clear();
            pieces.push_back(slot);
            i = close + 1;
        } else {
            lit.push_back(tmpl[i++]);
        }
    }
    if (!lit.empty()) pieces.push_back({false, lit, false});
    return pieces;
}

// ---------------------------------------------------------------------------
// Built-in IOI material. Sentence templates with two names in a dependent
// clause and the repeated subject in the main clause; {S} picks the mention
// order.

const std::vector<std::string>& ioi_templates() {
    static const std::vector<std::string> t = {
        "When {A} and {B} went to the {PLACE}, {S} gave a {OBJECT} to",
        "Then, {A} and {B} went to the {PLACE}. {S} gave a {OBJECT} to",
        "When {A} and {B} got a {OBJECT} at the {PLACE}, {S} decided to give it to",
        "Then, {A} and {B} were working at the {PLACE}. {S} decided to give a {OBJECT} to",
        "Then, {A} and {B} had a long argument, and afterwards {S} said to",
        "After {A} and {B} went to the {PLACE}, {S} gave a {OBJECT} to",
        "When {A} and {B} got a {OBJECT} at the {PLACE}, {S} decided to give the {OBJECT} to",
        "Then, {A} and {B} went to the {PLACE}, and {S} gave a {OBJECT} to",
        "While {A} and {B} were working at the {PLACE}, {S} gave a {OBJECT} to",
        "While {A} and {B} were commuting to the {PLACE}, {S} gave a {OBJECT} to",
        "After the lunch, {A} and {B} went to the {PLACE}. {S} gave a {OBJECT} to",
        "Afterwards, {A} and {B} went to the {PLACE}. {S} gave a {OBJECT} to",
        "Then, {A} and {B} had a lot of fun at the {PLACE}. {S} gave a {OBJECT} to",
        "Friends {A} and {B} found a {OBJECT} at the {PLACE}. {S} gave it to",
        "Then, {A} and {B} were thinking about going to the {PLACE}. {S} wanted to give a "
        "{OBJECT} to",
    };
    return t;
}

const std::vector<std::string>& ioi_places() {
    static const std::vector<std::string> p = {"store",  "garden", "school", "hospital",
                                               "office", "house",  "station", "restaurant"};
    return p;
}

const std::vector<std::string>& ioi_objects() {
    static const std::vector<std::string> o = {"drink", "ring",   "bone", "basketball",
                                               "plate", "kiss",   "book", "computer",
                                               "snack", "necklace"};
    return o;
}

} // namespace

std::vector<std::string> load_pool(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open pool file: " + path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

std::vector<std::string> filter_single_token(const std::vector<std::string>& pool,
                                             const Vocab& vocab) {
    std::vector<std::string> out;
    for (const std::string& entry : pool) {
        if (encode(" " + entry, vocab).length() == 1) out.push_back(entry);
    }
    return out;
}

// ---------------------------------------------------------------------------
// IOI

std::vector<PromptPair> gen_ioi(const IOISpec& spec, const CorruptionSpec& corruption,
                                const Vocab& vocab) {
    const std::vector<std::string> names = filter_single_token(spec.names, vocab);
    if (names.size() < 5)
        throw ConfigError("IOI needs at least 5 single-token names, got " +
                          std::to_string(names.size()));
    const auto& templates = spec.templates.empty() ? ioi_templates() : spec.templates;
    const auto& places = spec.places.empty() ? ioi_places() : spec.places;
    const auto& objects = spec.objects.empty() ? ioi_objects() : spec.objects;

    // Which spans the corruption touches. Default is the second subject
    // occurrence; {S1, IO} replaces the first-clause names instead.
    std::set<std::string> targets(corruption.targets.begin(), corruption.targets.end());
    if (targets.empty()) targets = {"S2"};
    for (const std::string& t : targets)
        if (t != "S1" && t != "S2" && t != "IO")
            throw ConfigError("IOI corruption target '" + t + "' is not one of S1/S2/IO");

    std::vector<std::string> pool =
        corruption.replacement_pool.empty() ? names : corruption.replacement_pool;

    Rng rng(spec.seed);
    std::vector<PromptPair> out;
    int attempts = 0;
    const int max_attempts = spec.n_prompts * 50 + 100;
    while (static_cast<int>(out.size()) < spec.n_prompts && attempts++ < max_attempts) {
        const std::string& tmpl = templates[rng.uniform(templates.size())];
        const std::string a = names[rng.uniform(names.size())];
        std::string b = a;
        while (b == a) b = names[rng.uniform(names.size())];
        const bool subject_is_a = rng.uniform(2) == 0;
        const std::string subject = subject_is_a ? a : b;
        const std::string place = places[rng.uniform(places.size())];
        const std::string object = objects[rng.uniform(objects.size())];

        try {
            SequenceBuilder builder(vocab);
            for (const Piece& piece : parse_template(tmpl)) {
                if (!piece.is_slot) {
                    builder.literal(piece.text);
                    continue;
                }
                const std::string prefix = piece.leading_space ? " " : "";
                if (piece.text == "A") builder.labeled("A_slot", prefix + a);
                else if (piece.text == "B") builder.labeled("B_slot", prefix + b);
                else if (piece.text == "S") builder.labeled("S2", prefix + subject);
                else if (piece.text == "PLACE") builder.literal(prefix + place);
                else if (piece.text == "OBJECT") builder.literal(prefix + object);
                else throw ConfigError("unknown IOI template slot {" + piece.text + "}");
            }
            TokenSequence clean = builder.finish();
            clean.spans["S1"] = clean.span(subject_is_a ? "A_slot" : "B_slot");
            clean.spans["IO"] = clean.span(subject_is_a ? "B_slot" : "A_slot");
            clean.spans.erase("A_slot");
            clean.spans.erase("B_slot");

            PromptPair pair;
            pair.r = clean.ids[static_cast<size_t>(clean.span("IO").begin)];
            pair.r_prime = clean.ids[static_cast<size_t>(clean.span("S1").begin)];

            switch (corruption.method) {
                case CorruptionMethod::STR: {
                    if (targets == std::set<std::string>{"S2"}) {
                        // S2 <- IO: still a valid sentence, with roles swapped.
                        const Span io = clean.span("IO");
                        const std::vector<int> repl(clean.ids.begin() + io.begin,
                                                    clean.ids.begin() + io.end);
                        pair.corrupt = replace_span(clean, "S2", repl, vocab);
                    } else {
                        // Fresh names over the targeted first-clause slots.
                        std::set<std::string> used = {" " + a, " " + b};
                        TokenSequence corrupt = clean;
                        for (const std::string& label : targets) {
                            std::string cand = " " + pool[rng.uniform(pool.size())];
                            int guard = 0;
                            while (used.count(cand) != 0 && guard++ < 1000)
                                cand = " " + pool[rng.uniform(pool.size())];
                            if (used.count(cand) != 0)
                                throw ConfigError("IOI replacement pool exhausted");
                            used.insert(cand);
                            const TokenSequence enc = encode(cand, vocab);
                            corrupt = replace_span(corrupt, label, enc.ids, vocab);
                        }
                        pair.corrupt = std::move(corrupt);
                    }
                    break;
                }
                case CorruptionMethod::ABC: {
                    CorruptionSpec abc = corruption;
                    abc.replacement_pool.clear();
                    // Name spans carry the leading space, so pool entries must too.
                    for (const std::string& name : pool)
                        abc.replacement_pool.push_back(" " + name);
                    Rng abc_rng(Rng::mix(corruption.seed, out.size()));
                    pair.corrupt = corrupt_abc(clean, abc, vocab, abc_rng);
                    break;
                }
                case CorruptionMethod::GN:
                    // Same tokens; the embedding override is attached per-run.
                    pair.corrupt = clean;
                    break;
            }
            pair.clean = std::move(clean);
            pair.validate_lengths();
            out.push_back(std::move(pair));
        } catch (const AlignmentError&) {
            continue; // discarded and retried; counted via attempts
        }
    }
    if (static_cast<int>(out.size()) < spec.n_prompts)
        throw ConfigError("IOI generator produced only " + std::to_string(out.size()) + " of " +
                          std::to_string(spec.n_prompts) + " prompts");
    return out;
}

// ---------------------------------------------------------------------------
// Paired facts

std::vector<FactPair> load_paired_facts(const std::string& path, const Vocab& vocab,
                                        std::vector<std::string>* rejects) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open paired-facts file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw LoadError("bad paired-facts JSON in " + path + ": " + e.what());
    }
    if (!j.is_array()) throw LoadError("paired-facts file is not a JSON array: " + path);

    const auto reject = [&](size_t idx, const std::string& why) {
        if (rejects != nullptr)
            rejects->push_back("record " + std::to_string(idx) + ": " + why);
    };

    std::vector<FactPair> out;
    for (size_t idx = 0; idx < j.size(); ++idx) {
        const json& rec = j[idx];
        FactPair fp;
        try {
            fp.pair = {rec.at("pair").at(0).get<std::string>(),
                       rec.at("pair").at(1).get<std::string>()};
            fp.answers = {rec.at("answer").at(0).get<std::string>(),
                          rec.at("answer").at(1).get<std::string>()};
            fp.length = rec.at("length").get<int>();
            fp.category = rec.value("category", "");
        } catch (const json::exception& e) {
            reject(idx, std::string("malformed record: ") + e.what());
            continue;
        }

        const TokenSequence s0 = encode(fp.pair[0], vocab);
        const TokenSequence s1 = encode(fp.pair[1], vocab);
        if (s0.length() != fp.length || s1.length() != fp.length) {
            reject(idx, "token lengths " + std::to_string(s0.length()) + "/" +
                            std::to_string(s1.length()) + " do not match declared length " +
                            std::to_string(fp.length));
            continue;
        }
        bool ok = true;
        for (const std::string& ans : fp.answers) {
            if (ans.empty() || ans[0] != ' ' || encode(ans, vocab).length() != 1) {
                reject(idx, "answer '" + ans + "' is not a single token with leading space");
                ok = false;
            }
        }
        if (!ok) continue;
        if (fp.answers[0] == fp.answers[1]) {
            reject(idx, "answers are identical");
            continue;
        }
        if (s0.ids == s1.ids) {
            reject(idx, "prompts are identical");
            continue;
        }
        out.push_back(std::move(fp));
    }
    return out;
}

std::vector<PromptPair> fact_prompt_pairs(const std::vector<FactPair>& facts,
                                          const CorruptionSpec& corruption, const Vocab& vocab) {
    std::vector<PromptPair> out;
    for (const FactPair& fp : facts) {
        TokenSequence seqs[2] = {encode(fp.pair[0], vocab), encode(fp.pair[1], vocab)};

        // The subject is whatever precedes the pair's common token suffix
        // (the shared relation template).
        const int len = seqs[0].length();
        int suffix = 0;
        while (suffix < len &&
               seqs[0].ids[static_cast<size_t>(len - 1 - suffix)] ==
                   seqs[1].ids[static_cast<size_t>(len - 1 - suffix)])
            ++suffix;
        const int subject_len = len - suffix;
        if (subject_len <= 0 || suffix == 0) continue; // no shared template; unusable
        for (auto& s : seqs) s.spans["subject"] = Span{0, subject_len};

        for (int orient = 0; orient < 2; ++orient) {
            PromptPair pair;
            pair.clean = seqs[orient];
            pair.r = encode(fp.answers[static_cast<size_t>(orient)], vocab).ids[0];
            pair.r_prime = encode(fp.answers[static_cast<size_t>(1 - orient)], vocab).ids[0];
            pair.corrupt =
                corruption.method == CorruptionMethod::GN ? seqs[orient] : seqs[1 - orient];
            pair.validate_lengths();
            out.push_back(std::move(pair));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Greater-than

std::vector<PromptPair> gen_greater_than(const GreaterThanSpec& spec,
                                         const CorruptionSpec& corruption, const Vocab& vocab) {
    const std::vector<std::string> nouns = filter_single_token(spec.nouns, vocab);
    if (nouns.empty()) throw ConfigError("greater-than needs at least one single-token noun");
    if (corruption.method == CorruptionMethod::ABC)
        throw ConfigError("ABC corruption applies to IOI only");

    const auto two_digits = [](int v) {
        std::string s = std::to_string(v);
        return v < 10 ? "0" + s : s;
    };
    const int repl_id = vocab.id_of("01");
    if (repl_id < 0) throw ConfigError("vocabulary lacks the token '01' used by STR");

    Rng rng(spec.seed);
    std::vector<PromptPair> out;
    int attempts = 0;
    const int max_attempts = spec.n_prompts * 100 + 100;
    while (static_cast<int>(out.size()) < spec.n_prompts && attempts++ < max_attempts) {
        const std::string& noun = nouns[rng.uniform(nouns.size())];
        const int xx =
            spec.century_min + static_cast<int>(rng.uniform(
                                   static_cast<uint64_t>(spec.century_max - spec.century_min + 1)));
        const int yy_lo = std::max(2, spec.yy_min);
        const int yy_hi = std::min(98, spec.yy_max);
        const int yy =
            yy_lo + static_cast<int>(rng.uniform(static_cast<uint64_t>(yy_hi - yy_lo + 1)));

        const std::string xx_str = std::to_string(xx);
        const std::string yy_str = two_digits(yy);
        const std::string year = " " + xx_str + yy_str;

        // The year must tokenize as [XX][YY], with XX matching the trailing
        // " XX" token the prompt ends on.
        const TokenSequence year_enc = encode(year, vocab);
        const TokenSequence xx_enc = encode(" " + xx_str, vocab);
        if (year_enc.length() != 2 || xx_enc.length() != 1 || year_enc.ids[0] != xx_enc.ids[0] ||
            vocab.token_of(year_enc.ids[1]) != yy_str)
            continue;

        // Answer sets must exist in the vocabulary in full.
        std::vector<int> greater, less;
        bool complete = true;
        for (int y = yy + 1; y <= 99 && complete; ++y) {
            const int id = vocab.id_of(two_digits(y));
            if (id < 0) complete = false;
            else greater.push_back(id);
        }
        for (int y = 1; y < yy && complete; ++y) {
            const int id = vocab.id_of(two_digits(y));
            if (id < 0) complete = false;
            else less.push_back(id);
        }
        if (!complete || greater.empty() || less.empty()) continue;

        try {
            SequenceBuilder builder(vocab);
            builder.literal("The")
                .literal(" " + noun)
                .literal(" lasted from the year")
                .labeled("XXYY", year)
                .literal(" to the year")
                .literal(" " + xx_str);
            TokenSequence clean = builder.finish();
            const Span xxyy = clean.span("XXYY");
            clean.spans["YY"] = Span{xxyy.end - 1, xxyy.end};

            PromptPair pair;
            pair.greater_set = std::move(greater);
            pair.less_set = std::move(less);
            if (corruption.method == CorruptionMethod::STR) {
                const std::vector<int> repl = {repl_id};
                pair.corrupt = replace_span(clean, "YY", repl, vocab);
            } else {
                pair.corrupt = clean;
            }
            pair.clean = std::move(clean);
            pair.validate_lengths();
            out.push_back(std::move(pair));
        } catch (const AlignmentError&) {
            continue;
        }
    }
    if (static_cast<int>(out.size()) < spec.n_prompts)
        throw ConfigError("greater-than generator produced only " + std::to_string(out.size()) +
                          " of " + std::to_string(spec.n_prompts) + " prompts");
    return out;
}

// ---------------------------------------------------------------------------
// Docstring

std::vector<PromptPair> gen_docstring(const DocstringSpec& spec,
                                      const CorruptionSpec& corruption, const Vocab& vocab) {
    const std::vector<std::string> words = filter_single_token(spec.words, vocab);
    if (words.size() < 20)
        throw ConfigError("docstring needs at least 20 single-token words, got " +
                          std::to_string(words.size()));
    if (corruption.method == CorruptionMethod::ABC)
        throw ConfigError("ABC corruption applies to IOI only");

    static const std::string tmpl =
        "def {FN}(self, {R1}, {R2}, {A}, {B}, {C}, {R3}):\n"
        "    \"\"\"{R4} {R5} {R6}\n"
        "\n"
        "    :param {A}: {R7} {R8}\n"
        "    :param {B}: {R9} {R10}\n"
        "    :param";
    const std::vector<Piece> pieces = parse_template(tmpl);

    Rng rng(spec.seed);
    std::vector<PromptPair> out;
    int expected_len = -1;
    int attempts = 0;
    const int max_attempts = spec.n_prompts * 50 + 100;
    while (static_cast<int>(out.size()) < spec.n_prompts && attempts++ < max_attempts) {
        // 14 distinct words: function name, 10 fillers, 3 parameter names.
        std::set<size_t> chosen;
        while (chosen.size() < 14) chosen.insert(rng.uniform(words.size()));
        std::vector<std::string> draw;
        for (const size_t i : chosen) draw.push_back(words[i]);
        // The set ordering is index-sorted; shuffle so roles are random.
        for (size_t i = draw.size(); i > 1; --i) std::swap(draw[i - 1], draw[rng.uniform(i)]);

        std::map<std::string, std::string> slot_value = {
            {"FN", draw[0]},  {"R1", draw[1]},  {"R2", draw[2]},  {"A", draw[3]},
            {"B", draw[4]},   {"C", draw[5]},   {"R3", draw[6]},  {"R4", draw[7]},
            {"R5", draw[8]},  {"R6", draw[9]},  {"R7", draw[10]}, {"R8", draw[11]},
            {"R9", draw[12]}, {"R10", draw[13]}};

        try {
            SequenceBuilder builder(vocab);
            bool c_def_seen = false;
            for (const Piece& piece : pieces) {
                if (!piece.is_slot) {
                    builder.literal(piece.text);
                    continue;
                }
                const std::string chunk =
                    (piece.leading_space ? " " : "") + slot_value.at(piece.text);
                if (piece.text == "C" && !c_def_seen) {
                    builder.labeled("C_def", chunk);
                    c_def_seen = true;
                } else {
                    builder.literal(chunk);
                }
            }
            TokenSequence clean = builder.finish();
            if (expected_len < 0) expected_len = clean.length();
            if (clean.length() != expected_len) continue; // keeps by-position sweeps aligned

            PromptPair pair;
            pair.r = clean.ids[static_cast<size_t>(clean.span("C_def").begin)];

            if (corruption.method == CorruptionMethod::STR) {
                const auto in_use = [&](const std::string& w) {
                    for (const auto& [slot, value] : slot_value)
                        if (value == w) return true;
                    return false;
                };
                std::string fresh = words[rng.uniform(words.size())];
                int guard = 0;
                while (in_use(fresh) && guard++ < 1000)
                    fresh = words[rng.uniform(words.size())];
                const TokenSequence enc = encode(" " + fresh, vocab);
                pair.corrupt = replace_span(clean, "C_def", enc.ids, vocab);
                pair.r_prime = enc.ids[0];
            } else {
                pair.corrupt = clean;
                // GN has no replacement token; fall back to the B parameter
                // name as the incorrect answer for logit-difference metrics.
                pair.r_prime = encode(" " + slot_value.at("B"), vocab).ids[0];
            }
            pair.clean = std::move(clean);
            pair.validate_lengths();
            out.push_back(std::move(pair));
        } catch (const AlignmentError&) {
            continue;
        }
    }
    if (static_cast<int>(out.size()) < spec.n_prompts)
        throw ConfigError("docstring generator produced only " + std::to_string(out.size()) +
                          " of " + std::to_string(spec.n_prompts) + " prompts");
    return out;
}

// ---------------------------------------------------------------------------
// Arithmetic

std::vector<PromptPair> gen_arithmetic(const ArithmeticSpec& spec,
                                       const CorruptionSpec& corruption, const Vocab& vocab,
                                       const Model& model) {
    if (spec.op != '+' && spec.op != '-' && spec.op != '*')
        throw ConfigError(std::string("unsupported arithmetic operator '") + spec.op + "'");
    if (corruption.method == CorruptionMethod::ABC)
        throw ConfigError("ABC corruption applies to IOI only");
    if (spec.operand_min < 1 || spec.operand_max < spec.operand_min)
        throw ConfigError("bad arithmetic operand range");

    const auto apply = [&](int64_t x, int64_t y) {
        switch (spec.op) {
            case '+': return x + y;
            case '-': return x - y;
            default: return x * y;
        }
    };
    // Bare-number token id, or -1 when it is not a single token.
    const auto number_id = [&](int64_t v) {
        const TokenSequence enc = encode(std::to_string(v), vocab);
        return enc.length() == 1 ? enc.ids[0] : -1;
    };

    Rng rng(spec.seed);
    const auto draw_operand = [&]() {
        return spec.operand_min +
               static_cast<int>(rng.uniform(
                   static_cast<uint64_t>(spec.operand_max - spec.operand_min + 1)));
    };

    std::vector<PromptPair> out;
    int attempts = 0;
    const int max_attempts = spec.n_prompts * 200 + 100;
    while (static_cast<int>(out.size()) < spec.n_prompts && attempts++ < max_attempts) {
        int x[3], y[3];
        int64_t z[3];
        bool usable = true;
        for (int k = 0; k < 3; ++k) {
            x[k] = draw_operand();
            y[k] = draw_operand();
            z[k] = apply(x[k], y[k]);
            if (number_id(x[k]) < 0 || number_id(y[k]) < 0 || number_id(z[k]) < 0) usable = false;
        }
        if (!usable) continue;

        try {
            SequenceBuilder builder(vocab);
            const std::string op(1, spec.op);
            for (int k = 0; k < 2; ++k)
                builder.literal(std::to_string(x[k]) + op + std::to_string(y[k]) + "=" +
                                std::to_string(z[k]) + "\n");
            builder.labeled("X3", std::to_string(x[2]))
                .literal(op)
                .labeled("Y3", std::to_string(y[2]))
                .literal("=");
            TokenSequence clean = builder.finish();

            PromptPair pair;
            pair.r = number_id(z[2]);

            // STR counterpart: two fresh operands with a representable answer.
            int cx = 0, cy = 0;
            int64_t cz = 0;
            int guard = 0;
            do {
                cx = draw_operand();
                cy = draw_operand();
                cz = apply(cx, cy);
            } while ((number_id(cx) < 0 || number_id(cy) < 0 || number_id(cz) < 0 ||
                      (cx == x[2] && cy == y[2]) || cz == z[2]) &&
                     guard++ < 1000);
            if (guard > 1000) continue;
            pair.r_prime = number_id(cz);

            if (corruption.method == CorruptionMethod::STR) {
                TokenSequence corrupt =
                    replace_span(clean, "X3", encode(std::to_string(cx), vocab).ids, vocab);
                corrupt =
                    replace_span(corrupt, "Y3", encode(std::to_string(cy), vocab).ids, vocab);
                pair.corrupt = std::move(corrupt);
            } else {
                pair.corrupt = clean;
            }
            pair.clean = std::move(clean);
            pair.validate_lengths();
            out.push_back(std::move(pair));
        } catch (const AlignmentError&) {
            continue;
        }
    }

    if (!spec.filter_model_correct) return out;

    // Keep only prompts the model answers correctly.
    std::vector<PromptPair> kept;
    ForwardOptions filter_opt;
    filter_opt.logits_final_only = true;
    for (PromptPair& pair : out) {
        const ForwardRecord rec = forward(model, pair.clean.ids, filter_opt);
        const auto row = rec.final_logits();
        int argmax = 0;
        for (int i = 1; i < static_cast<int>(row.size()); ++i)
            if (row[static_cast<size_t>(i)] > row[static_cast<size_t>(argmax)]) argmax = i;
        if (argmax == pair.r) kept.push_back(std::move(pair));
    }
    return kept; // may be fewer than requested; callers warn
}

} // namespace patchkit
