#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "otrank/binary_io.hpp"
#include "otrank/dataset.hpp"
#include "otrank/error.hpp"

namespace otrank {

/// Number of training questions containing each normalized word.
struct FrequencyTable {
    std::map<std::string, std::uint32_t> counts;
    std::uint64_t num_questions = 0;

    /// Unseen words count as 1 so a marginal is never 0/0.
    double smoothed_count(const std::string& normalized) const {
        auto it = counts.find(normalized);
        const std::uint32_t c = it == counts.end() ? 0 : it->second;
        return static_cast<double>(std::max<std::uint32_t>(c, 1));
    }

    bool operator==(const FrequencyTable&) const = default;
};

inline FrequencyTable build_frequency_table(const Corpus& train) {
    if (train.split != Split::train) {
        throw ValidationError("frequency table must be built from the train split, got " +
                              std::string(to_string(train.split)));
    }
    if (train.instances.empty()) {
        throw ValidationError("cannot build a frequency table from an empty corpus");
    }
    FrequencyTable ft;
    for (const auto& inst : train.instances) {
        std::set<std::string> seen;
        for (const auto& tok : inst.question.tokens) {
            seen.insert(tok.normalized);
        }
        for (const auto& w : seen) {
            ++ft.counts[w];
        }
    }
    ft.num_questions = train.instances.size();
    return ft;
}

inline nlohmann::json to_json(const FrequencyTable& ft) {
    nlohmann::json counts = nlohmann::json::object();
    for (const auto& [w, c] : ft.counts) {
        counts[w] = c;
    }
    return {{"num_questions", ft.num_questions}, {"counts", counts}};
}

inline FrequencyTable frequency_table_from_json(const nlohmann::json& j) {
    FrequencyTable ft;
    try {
        ft.num_questions = j.at("num_questions").get<std::uint64_t>();
        for (const auto& [w, c] : j.at("counts").items()) {
            ft.counts[w] = c.get<std::uint32_t>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("invalid frequency table: ") + e.what());
    }
    for (const auto& [w, c] : ft.counts) {
        if (c > ft.num_questions) {
            throw FormatError("invalid frequency table: count for '" + w + "' exceeds num_questions");
        }
    }
    return ft;
}

/// A point-set distribution; entries are nonnegative and sum to 1.
struct ProbVector {
    std::vector<double> values;

    std::size_t size() const { return values.size(); }
    double operator[](std::size_t i) const { return values[i]; }
};

inline ProbVector marginal_distribution(std::span<const Token> tokens, const FrequencyTable& ft) {
    if (tokens.empty()) {
        throw ValidationError("marginal_distribution needs at least one token");
    }
    ProbVector p;
    p.values.reserve(tokens.size());
    double total = 0.0;
    for (const auto& t : tokens) {
        const double c = ft.smoothed_count(t.normalized);
        p.values.push_back(c);
        total += c;
    }
    for (auto& v : p.values) {
        v /= total;
    }
    return p;
}

inline char role_byte(Role r) {
    switch (r) {
    case Role::question: return 'q';
    case Role::candidate: return 'c';
    case Role::prev: return 'p';
    case Role::next: return 'n';
    }
    return '?';
}

inline Role role_from_byte(std::uint8_t b) {
    switch (b) {
    case 'q': return Role::question;
    case 'c': return Role::candidate;
    case 'p': return Role::prev;
    case 'n': return Role::next;
    default: throw FormatError("unknown role byte " + std::to_string(b));
    }
}

/// Window id used for question records.
inline constexpr std::string_view kQuestionWindow = "-";

struct SentenceKey {
    std::string instance_id;
    std::string window_id;
    Role role = Role::question;

    auto operator<=>(const SentenceKey&) const = default;

    std::string describe() const {
        return "(" + instance_id + ", " + window_id + ", " + std::string(to_string(role)) + ")";
    }
};

/// Precomputed token vectors, one float32 row per token, grouped by sentence.
///
/// Binary layout (little-endian): "OTRK", u32 version, u32 dim, u64 record count,
/// then per token record: u32-length-prefixed instance id, u32-length-prefixed window
/// id ("-" for questions), u8 role in {q,c,p,n}, u32 token index, dim x f32.
class EmbeddingStore {
public:
    static constexpr std::string_view kMagic = "OTRK";
    static constexpr std::uint32_t kVersion = 1;

    explicit EmbeddingStore(std::uint32_t dim = 1) : dim_(dim) {
        if (dim == 0) {
            throw ValidationError("embedding dimension must be positive");
        }
    }

    std::uint32_t dim() const { return dim_; }

    /// Total token records.
    std::uint64_t record_count() const {
        std::uint64_t n = 0;
        for (const auto& [k, v] : sentences_) {
            n += v.size() / dim_;
        }
        return n;
    }

    std::size_t sentence_count() const { return sentences_.size(); }

    /// Replace the vectors of a whole sentence (tokens in order).
    void put(const SentenceKey& key, std::span<const std::vector<float>> vectors) {
        std::vector<float> flat;
        flat.reserve(vectors.size() * dim_);
        for (const auto& v : vectors) {
            if (v.size() != dim_) {
                throw ValidationError("vector for " + key.describe() + " has length " + std::to_string(v.size()) +
                                      ", expected " + std::to_string(dim_));
            }
            flat.insert(flat.end(), v.begin(), v.end());
        }
        sentences_[key] = std::move(flat);
    }

    bool contains(const SentenceKey& key) const { return sentences_.count(key) > 0; }

    /// Token vectors of one sentence as rows, in token order.
    Eigen::MatrixXd sentence_vectors(const SentenceKey& key) const {
        auto it = sentences_.find(key);
        if (it == sentences_.end()) {
            throw ValidationError("no embeddings for " + key.describe());
        }
        const auto rows = static_cast<Eigen::Index>(it->second.size() / dim_);
        Eigen::MatrixXd m(rows, dim_);
        for (Eigen::Index r = 0; r < rows; ++r) {
            for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(dim_); ++c) {
                m(r, c) = it->second[static_cast<std::size_t>(r) * dim_ + static_cast<std::size_t>(c)];
            }
        }
        return m;
    }

    /// Vectors for a corpus sentence. Padding maps to a single zero row; otherwise the
    /// stored token count must match the sentence's tokenization.
    Eigen::MatrixXd sentence_vectors(const std::string& instance_id, const std::string& window_id,
                                     const Sentence& s) const {
        if (s.is_padding) {
            return Eigen::MatrixXd::Zero(1, dim_);
        }
        const SentenceKey key{instance_id, s.role == Role::question ? std::string(kQuestionWindow) : window_id,
                              s.role};
        auto m = sentence_vectors(key);
        if (static_cast<std::size_t>(m.rows()) != s.tokens.size()) {
            throw ValidationError("embeddings for " + key.describe() + " have " + std::to_string(m.rows()) +
                                  " tokens, sentence has " + std::to_string(s.tokens.size()));
        }
        return m;
    }

    std::string serialize() const {
        io::ByteWriter w;
        w.raw(kMagic);
        w.u32(kVersion);
        w.u32(dim_);
        w.u64(record_count());
        for (const auto& [key, flat] : sentences_) {
            const std::size_t n = flat.size() / dim_;
            for (std::size_t t = 0; t < n; ++t) {
                w.str(key.instance_id);
                w.str(key.window_id);
                w.u8(static_cast<std::uint8_t>(role_byte(key.role)));
                w.u32(static_cast<std::uint32_t>(t));
                for (std::size_t c = 0; c < dim_; ++c) {
                    w.f32(flat[t * dim_ + c]);
                }
            }
        }
        return w.take();
    }

    static EmbeddingStore deserialize(std::string_view bytes, const std::string& what = "embedding store") {
        io::ByteReader r(bytes, what);
        if (r.raw(4) != kMagic) {
            throw FormatError(what + ": bad magic (expected OTRK)");
        }
        const auto version = r.u32();
        if (version != kVersion) {
            throw FormatError(what + ": unsupported format version " + std::to_string(version));
        }
        const auto dim = r.u32();
        if (dim == 0) {
            throw FormatError(what + ": dimension is zero");
        }
        const auto count = r.u64();
        EmbeddingStore store(dim);
        for (std::uint64_t i = 0; i < count; ++i) {
            SentenceKey key;
            key.instance_id = r.str();
            key.window_id = r.str();
            key.role = role_from_byte(r.u8());
            const auto index = r.u32();
            auto& flat = store.sentences_[key];
            if (index != flat.size() / dim) {
                throw FormatError(what + ": record " + std::to_string(i) + " for " + key.describe() +
                                  " has token index " + std::to_string(index) + ", expected " +
                                  std::to_string(flat.size() / dim));
            }
            for (std::uint32_t c = 0; c < dim; ++c) {
                flat.push_back(r.f32());
            }
        }
        if (!r.done()) {
            throw FormatError(what + ": " + std::to_string(r.remaining()) + " trailing bytes after " +
                              std::to_string(count) + " records");
        }
        return store;
    }

    bool operator==(const EmbeddingStore&) const = default;

private:
    std::uint32_t dim_;
    std::map<SentenceKey, std::vector<float>> sentences_;
};

inline std::string sidecar_path(const std::string& store_path) { return store_path + ".json"; }

/// Writes the store plus a JSON sidecar holding dim and record count.
inline void save_embedding_store(const EmbeddingStore& store, const std::string& path) {
    io::write_file(path, store.serialize());
    const nlohmann::json side = {{"format_version", EmbeddingStore::kVersion},
                                 {"dim", store.dim()},
                                 {"count", store.record_count()}};
    io::write_file(sidecar_path(path), side.dump(2) + "\n");
}

/// Loads a store; when a sidecar is present its dim/count must agree with the file.
inline EmbeddingStore load_embedding_store(const std::string& path) {
    auto store = EmbeddingStore::deserialize(io::read_file(path), path);
    const auto side = sidecar_path(path);
    if (std::filesystem::exists(side)) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(io::read_file(side));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(side + ": " + e.what());
        }
        if (j.value("dim", 0u) != store.dim() || j.value("count", std::uint64_t{0}) != store.record_count()) {
            throw FormatError(side + ": dim/count disagree with " + path);
        }
    }
    return store;
}

/// Checks that every non-padding sentence of the corpus has one vector per token.
inline void check_coverage(const Corpus& corpus, const EmbeddingStore& store) {
    for (const auto& inst : corpus.instances) {
        store.sentence_vectors(inst.question_id, std::string(kQuestionWindow), inst.question);
        for (const auto& w : inst.windows) {
            for (const auto* s : window_nodes(w)) {
                store.sentence_vectors(inst.question_id, w.id, *s);
            }
        }
    }
}

} // namespace otrank
