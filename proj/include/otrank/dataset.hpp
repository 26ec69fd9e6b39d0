#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "otrank/error.hpp"
#include "otrank/stopwords.hpp"

namespace otrank {

/// Literal text of the placeholder used for a missing prev/next sentence.
inline constexpr std::string_view kPaddingText = "<pad>";

enum class Role { question, candidate, prev, next };

enum class Split { train, dev, test };

inline std::string_view to_string(Role r) {
    switch (r) {
    case Role::question: return "question";
    case Role::candidate: return "candidate";
    case Role::prev: return "prev";
    case Role::next: return "next";
    }
    return "?";
}

inline std::string_view to_string(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
    }
    return "?";
}

inline Split parse_split(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "dev") return Split::dev;
    if (s == "test") return Split::test;
    throw ValidationError("unknown split '" + std::string(s) + "' (expected train, dev or test)");
}

struct Token {
    std::string surface;
    std::string normalized;
    bool is_content = true;

    bool operator==(const Token&) const = default;
};

struct Sentence {
    std::string text;
    std::vector<Token> tokens;
    Role role = Role::candidate;
    bool is_padding = false;
    std::optional<bool> label;

    bool operator==(const Sentence&) const = default;
};

struct CandidateWindow {
    std::string id;
    Sentence cand;
    std::optional<Sentence> prev;
    std::optional<Sentence> next;

    bool operator==(const CandidateWindow&) const = default;
};

struct QAInstance {
    std::string question_id;
    Sentence question;
    std::vector<CandidateWindow> windows;

    bool operator==(const QAInstance&) const = default;
};

struct Corpus {
    std::vector<QAInstance> instances;
    Split split = Split::train;

    bool operator==(const Corpus&) const = default;
};

/// Lowercased stopword set. Lookups take normalized tokens.
class Stoplist {
public:
    Stoplist() = default;

    template <class Range> explicit Stoplist(const Range& words) {
        for (const auto& w : words) {
            words_.emplace(w);
        }
    }

    static const Stoplist& builtin() {
        static const Stoplist list(kBuiltinStopwords);
        return list;
    }

    /// One word per line; blank lines and lines starting with '#' are skipped.
    static Stoplist from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) {
            throw FormatError("cannot open stoplist " + path);
        }
        std::vector<std::string> words;
        std::string line;
        while (std::getline(in, line)) {
            while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) {
                line.pop_back();
            }
            if (line.empty() || line.front() == '#') {
                continue;
            }
            words.push_back(line);
        }
        return Stoplist(words);
    }

    bool contains(std::string_view word) const { return words_.count(std::string(word)) > 0; }
    std::size_t size() const { return words_.size(); }

private:
    std::unordered_set<std::string> words_;
};

namespace detail {

inline bool is_space(char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

// ASCII punctuation only; bytes of multi-byte UTF-8 sequences are never punctuation.
inline bool is_punct(char c) {
    return std::ispunct(static_cast<unsigned char>(c)) != 0 && static_cast<unsigned char>(c) < 0x80;
}

inline std::string ascii_lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) {
        if (c >= 'A' && c <= 'Z') {
            c = static_cast<char>(c - 'A' + 'a');
        }
    }
    return out;
}

inline Token make_token(std::string_view surface, const Stoplist& stoplist) {
    Token t;
    t.surface = std::string(surface);
    t.normalized = ascii_lower(surface);
    const bool all_punct = std::all_of(surface.begin(), surface.end(), is_punct);
    t.is_content = !all_punct && !stoplist.contains(t.normalized);
    return t;
}

} // namespace detail

/// Lowercase, split on ASCII whitespace, and peel leading/trailing punctuation
/// off each chunk one character at a time.
inline std::vector<Token> tokenize(std::string_view text, const Stoplist& stoplist = Stoplist::builtin()) {
    std::vector<Token> tokens;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && detail::is_space(text[i])) {
            ++i;
        }
        std::size_t end = i;
        while (end < text.size() && !detail::is_space(text[end])) {
            ++end;
        }
        if (end == i) {
            break;
        }
        std::string_view chunk = text.substr(i, end - i);
        i = end;

        std::size_t lead = 0;
        while (lead < chunk.size() && detail::is_punct(chunk[lead])) {
            ++lead;
        }
        std::size_t trail = chunk.size();
        while (trail > lead && detail::is_punct(chunk[trail - 1])) {
            --trail;
        }
        for (std::size_t k = 0; k < lead; ++k) {
            tokens.push_back(detail::make_token(chunk.substr(k, 1), stoplist));
        }
        if (trail > lead) {
            tokens.push_back(detail::make_token(chunk.substr(lead, trail - lead), stoplist));
        }
        for (std::size_t k = std::max(trail, lead); k < chunk.size(); ++k) {
            tokens.push_back(detail::make_token(chunk.substr(k, 1), stoplist));
        }
    }
    return tokens;
}

inline Sentence make_sentence(std::string text, Role role, std::optional<bool> label = std::nullopt,
                              const Stoplist& stoplist = Stoplist::builtin()) {
    Sentence s;
    s.tokens = tokenize(text, stoplist);
    s.text = std::move(text);
    s.role = role;
    s.label = label;
    return s;
}

inline Sentence padding_sentence(Role role) {
    Sentence s;
    s.text = std::string(kPaddingText);
    s.tokens.push_back(Token{std::string(kPaddingText), std::string(kPaddingText), false});
    s.role = role;
    s.is_padding = true;
    return s;
}

/// Indices of the tokens used as OT points. Falls back to every token when
/// filtering would leave nothing; padding has no points.
inline std::vector<std::size_t> content_token_indices(const Sentence& s) {
    std::vector<std::size_t> idx;
    if (s.is_padding) {
        return idx;
    }
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
        if (s.tokens[i].is_content) {
            idx.push_back(i);
        }
    }
    if (idx.empty()) {
        for (std::size_t i = 0; i < s.tokens.size(); ++i) {
            idx.push_back(i);
        }
    }
    return idx;
}

inline std::vector<Token> content_tokens(const Sentence& s) {
    std::vector<Token> out;
    for (auto i : content_token_indices(s)) {
        out.push_back(s.tokens[i]);
    }
    return out;
}

inline CandidateWindow pad_context(CandidateWindow w) {
    if (!w.prev) {
        w.prev = padding_sentence(Role::prev);
    }
    if (!w.next) {
        w.next = padding_sentence(Role::next);
    }
    return w;
}

/// The three window sentences in graph node order (cand, prev, next).
/// The window must already be padded.
inline std::array<const Sentence*, 3> window_nodes(const CandidateWindow& w) {
    if (!w.prev || !w.next) {
        throw ValidationError("window '" + w.id + "' is not padded");
    }
    return {&w.cand, &*w.prev, &*w.next};
}

namespace detail {

inline std::optional<bool> read_label(const nlohmann::json& obj, const char* key, bool required,
                                      const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) {
        if (required) {
            throw ValidationError(where + ": missing \"" + key + "\"");
        }
        return std::nullopt;
    }
    if (it->is_boolean()) {
        return it->get<bool>();
    }
    if (it->is_number_integer()) {
        const auto v = it->get<long long>();
        if (v == 0 || v == 1) {
            return v == 1;
        }
    }
    throw ValidationError(where + ": \"" + key + "\" must be 0 or 1");
}

inline std::string read_text(const nlohmann::json& obj, const char* key, const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end() || !it->is_string()) {
        throw ValidationError(where + ": \"" + key + "\" must be a string");
    }
    auto s = it->get<std::string>();
    if (s.find_first_not_of(" \t\n\r\f\v") == std::string::npos) {
        throw ValidationError(where + ": \"" + key + "\" is empty");
    }
    return s;
}

inline std::optional<Sentence> read_context(const nlohmann::json& obj, const char* text_key,
                                            const char* label_key, Role role, const std::string& where) {
    auto it = obj.find(text_key);
    if (it == obj.end() || it->is_null()) {
        if (read_label(obj, label_key, false, where)) {
            throw ValidationError(where + ": \"" + label_key + "\" set but \"" + text_key + "\" is null");
        }
        return std::nullopt;
    }
    return make_sentence(read_text(obj, text_key, where), role, read_label(obj, label_key, false, where));
}

} // namespace detail

/// Parse one JSONL record. `line_no` is 1-based and only used in messages.
inline QAInstance parse_instance(std::string_view line, std::size_t line_no) {
    const std::string where = "line " + std::to_string(line_no);
    nlohmann::json obj;
    try {
        obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!obj.is_object()) {
        throw ValidationError(where + ": record must be a JSON object");
    }
    QAInstance inst;
    inst.question_id = detail::read_text(obj, "question_id", where);
    inst.question = make_sentence(detail::read_text(obj, "question", where), Role::question);

    auto cands = obj.find("candidates");
    if (cands == obj.end() || !cands->is_array() || cands->empty()) {
        throw ValidationError(where + ": \"candidates\" must be a nonempty array");
    }
    std::set<std::string> seen;
    for (std::size_t k = 0; k < cands->size(); ++k) {
        const auto& c = (*cands)[k];
        const std::string cwhere = where + ", candidate " + std::to_string(k);
        if (!c.is_object()) {
            throw ValidationError(cwhere + ": must be a JSON object");
        }
        CandidateWindow w;
        w.id = detail::read_text(c, "id", cwhere);
        if (!seen.insert(w.id).second) {
            throw ValidationError(cwhere + ": duplicate window id '" + w.id + "'");
        }
        w.cand = make_sentence(detail::read_text(c, "text", cwhere), Role::candidate,
                               detail::read_label(c, "label", true, cwhere));
        w.prev = detail::read_context(c, "prev", "prev_label", Role::prev, cwhere);
        w.next = detail::read_context(c, "next", "next_label", Role::next, cwhere);
        inst.windows.push_back(pad_context(std::move(w)));
    }
    return inst;
}

inline Corpus load_corpus(const std::string& path, Split split) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("cannot open corpus " + path);
    }
    Corpus corpus;
    corpus.split = split;
    std::set<std::string> ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        auto inst = parse_instance(line, line_no);
        if (!ids.insert(inst.question_id).second) {
            throw ValidationError(path + ": line " + std::to_string(line_no) + ": duplicate question_id '" +
                                  inst.question_id + "'");
        }
        corpus.instances.push_back(std::move(inst));
    }
    if (in.bad()) {
        throw FormatError("read error on " + path);
    }
    return corpus;
}

inline nlohmann::json to_json(const QAInstance& inst) {
    auto label_json = [](const std::optional<bool>& l) -> nlohmann::json {
        return l ? nlohmann::json(*l ? 1 : 0) : nlohmann::json(nullptr);
    };
    auto ctx = [](const std::optional<Sentence>& s) -> nlohmann::json {
        return (s && !s->is_padding) ? nlohmann::json(s->text) : nlohmann::json(nullptr);
    };
    auto ctx_label = [&](const std::optional<Sentence>& s) -> nlohmann::json {
        return (s && !s->is_padding) ? label_json(s->label) : nlohmann::json(nullptr);
    };
    nlohmann::json cands = nlohmann::json::array();
    for (const auto& w : inst.windows) {
        cands.push_back({{"id", w.id},
                         {"text", w.cand.text},
                         {"label", label_json(w.cand.label)},
                         {"prev", ctx(w.prev)},
                         {"prev_label", ctx_label(w.prev)},
                         {"next", ctx(w.next)},
                         {"next_label", ctx_label(w.next)}});
    }
    return {{"question_id", inst.question_id}, {"question", inst.question.text}, {"candidates", cands}};
}

inline void save_corpus(const Corpus& corpus, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write corpus " + path);
    }
    for (const auto& inst : corpus.instances) {
        out << to_json(inst).dump() << '\n';
    }
    if (!out) {
        throw FormatError("write failed for " + path);
    }
}

} // namespace otrank
