#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "otrank/dataset.hpp"
#include "otrank/embeddings.hpp"
#include "otrank/rng.hpp"

namespace otrank {

/// Planted-signal corpus: question tokens sit in a per-question cluster close to a
/// shared "answer region"; correct candidates (and their context sentences) draw
/// their content-token vectors from the same cluster, distractors from a cluster far
/// away in a random direction.
struct SyntheticConfig {
    std::size_t train_questions = 200;
    std::size_t dev_questions = 50;
    std::size_t candidates = 5;
    std::uint32_t dim = 16;
    std::uint64_t seed = 7;
    std::size_t vocabulary = 300;
    double cluster_spread = 0.5;   // per-question center around the answer region
    double token_noise = 0.3;      // token vectors around their sentence cluster
    double distractor_offset = 4.0;
    double missing_context_rate = 0.1;
    bool context_labels = true;
};

struct SyntheticData {
    Corpus train;
    Corpus dev;
    EmbeddingStore store;
};

namespace detail {

class SyntheticBuilder {
public:
    SyntheticBuilder(const SyntheticConfig& cfg)
        : cfg_(cfg), rng_(cfg.seed), store_(cfg.dim), region_(random_direction() * 2.0) {}

    QAInstance instance(const std::string& qid) {
        QAInstance inst;
        inst.question_id = qid;
        const Eigen::VectorXd center = region_ + cfg_.cluster_spread * gaussian();

        inst.question = sentence(qid, std::string(kQuestionWindow), Role::question, center, 3, true, std::nullopt);

        const std::size_t n_correct = 1 + (rng_.bernoulli(0.3) ? 1 : 0);
        std::vector<bool> correct(cfg_.candidates, false);
        for (std::size_t k = 0; k < std::min(n_correct, cfg_.candidates); ++k) correct[k] = true;
        rng_.shuffle(correct);

        for (std::size_t k = 0; k < cfg_.candidates; ++k) {
            const std::string wid = "c" + std::to_string(k);
            const Eigen::VectorXd c =
                correct[k] ? center : Eigen::VectorXd(center + cfg_.distractor_offset * random_direction());
            CandidateWindow w;
            w.id = wid;
            w.cand = sentence(qid, wid, Role::candidate, c, 4, false, correct[k]);
            auto ctx = [&](Role role) -> std::optional<Sentence> {
                if (rng_.bernoulli(cfg_.missing_context_rate)) return std::nullopt;
                std::optional<bool> label;
                if (cfg_.context_labels) label = correct[k];
                return sentence(qid, wid, role, c, 4, false, label);
            };
            w.prev = ctx(Role::prev);
            w.next = ctx(Role::next);
            inst.windows.push_back(pad_context(std::move(w)));
        }
        return inst;
    }

    EmbeddingStore take_store() { return std::move(store_); }

private:
    Eigen::VectorXd gaussian() {
        Eigen::VectorXd v(cfg_.dim);
        for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng_.normal();
        return v;
    }

    Eigen::VectorXd random_direction() {
        Eigen::VectorXd v = gaussian();
        return v / v.norm();
    }

    // Text "<content words> of the <content words>." with one vector per token.
    Sentence sentence(const std::string& qid, const std::string& wid, Role role, const Eigen::VectorXd& center,
                      std::size_t content_words, bool question, std::optional<bool> label) {
        std::string text = question ? "What " : "";
        for (std::size_t k = 0; k < content_words; ++k) {
            if (k == content_words / 2) text += "of the ";
            text += "w" + std::to_string(rng_.below(cfg_.vocabulary)) + " ";
        }
        text.back() = question ? '?' : '.';
        auto s = make_sentence(text, role, label);
        std::vector<std::vector<float>> vectors;
        for (const auto& tok : s.tokens) {
            Eigen::VectorXd v = tok.is_content ? Eigen::VectorXd(center + cfg_.token_noise * gaussian()) : gaussian();
            std::vector<float> f(cfg_.dim);
            for (std::size_t i = 0; i < cfg_.dim; ++i) f[i] = static_cast<float>(v(static_cast<Eigen::Index>(i)));
            vectors.push_back(std::move(f));
        }
        store_.put({qid, wid, role}, vectors);
        return s;
    }

    SyntheticConfig cfg_;
    Rng rng_;
    EmbeddingStore store_;
    Eigen::VectorXd region_;
};

} // namespace detail

inline SyntheticData make_synthetic(const SyntheticConfig& cfg) {
    detail::SyntheticBuilder b(cfg);
    SyntheticData data;
    data.train.split = Split::train;
    data.dev.split = Split::dev;
    for (std::size_t q = 0; q < cfg.train_questions; ++q) {
        data.train.instances.push_back(b.instance("train-q" + std::to_string(q)));
    }
    for (std::size_t q = 0; q < cfg.dev_questions; ++q) {
        data.dev.instances.push_back(b.instance("dev-q" + std::to_string(q)));
    }
    data.store = b.take_store();
    return data;
}

} // namespace otrank
