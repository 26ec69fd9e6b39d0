#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "otrank/dataset.hpp"
#include "otrank/embeddings.hpp"
#include "otrank/error.hpp"
#include "otrank/reranker.hpp"
#include "otrank/sinkhorn.hpp"

namespace otrank {

struct RankedItem {
    std::string id;
    double score = 0.0;
    /// Position in the question's original candidate order.
    std::size_t original_index = 0;
};

/// Candidates by descending score; ties keep the original order.
using Ranking = std::vector<RankedItem>;

struct MetricsReport {
    double p_at_1 = 0.0;
    double map = 0.0;
    double mrr = 0.0;
    std::size_t num_questions_evaluated = 0;
};

inline Ranking rank_candidates(std::span<const std::pair<std::string, double>> scores) {
    if (scores.empty()) {
        throw ValidationError("rank_candidates: no candidates");
    }
    Ranking r;
    r.reserve(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (std::isnan(scores[i].second)) {
            throw ValidationError("rank_candidates: NaN score for '" + scores[i].first + "'");
        }
        r.push_back({scores[i].first, scores[i].second, i});
    }
    std::stable_sort(r.begin(), r.end(), [](const RankedItem& a, const RankedItem& b) { return a.score > b.score; });
    return r;
}

namespace detail {

inline std::size_t count_relevant(const std::vector<bool>& labels) {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
}

inline void require_positive(const std::vector<bool>& labels, const char* what) {
    if (count_relevant(labels) == 0) {
        throw ValidationError(std::string(what) + ": question has no positive label");
    }
}

} // namespace detail

/// `labels` is indexed by original candidate position.
inline double precision_at_1(const Ranking& ranking, const std::vector<bool>& labels) {
    if (ranking.empty()) {
        return 0.0;
    }
    return labels[ranking.front().original_index] ? 1.0 : 0.0;
}

inline double average_precision(const Ranking& ranking, const std::vector<bool>& labels) {
    detail::require_positive(labels, "average_precision");
    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t k = 0; k < ranking.size(); ++k) {
        if (labels[ranking[k].original_index]) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(k + 1);
        }
    }
    return sum / static_cast<double>(detail::count_relevant(labels));
}

inline double reciprocal_rank(const Ranking& ranking, const std::vector<bool>& labels) {
    detail::require_positive(labels, "reciprocal_rank");
    for (std::size_t k = 0; k < ranking.size(); ++k) {
        if (labels[ranking[k].original_index]) {
            return 1.0 / static_cast<double>(k + 1);
        }
    }
    return 0.0;
}

/// Scores of one question's candidates, in original order.
struct QuestionScores {
    std::string question_id;
    std::vector<std::string> ids;
    std::vector<double> scores;
    std::vector<bool> labels;

    Ranking ranking() const {
        std::vector<std::pair<std::string, double>> s;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            s.emplace_back(ids[i], scores[i]);
        }
        return rank_candidates(s);
    }
};

struct QuestionMetrics {
    std::string question_id;
    double p_at_1 = 0.0;
    double ap = 0.0;
    double rr = 0.0;
    std::size_t candidates = 0;
    std::size_t relevant = 0;
};

struct Evaluation {
    MetricsReport report;
    std::vector<QuestionMetrics> per_question;
};

/// Aggregates P@1/MAP/MRR in question order. Questions with no positive label are skipped.
inline Evaluation evaluate_scores(std::span<const QuestionScores> questions) {
    Evaluation ev;
    for (const auto& q : questions) {
        const auto& labels = q.labels;
        if (detail::count_relevant(labels) == 0) {
            continue;
        }
        const auto r = q.ranking();
        ev.per_question.push_back({q.question_id, precision_at_1(r, labels), average_precision(r, labels),
                                   reciprocal_rank(r, labels), q.ids.size(), detail::count_relevant(labels)});
    }
    if (ev.per_question.empty()) {
        throw ValidationError("no evaluable questions (every question lacks a positive label)");
    }
    double p1 = 0.0, ap = 0.0, rr = 0.0;
    for (const auto& m : ev.per_question) {
        p1 += m.p_at_1;
        ap += m.ap;
        rr += m.rr;
    }
    const auto n = static_cast<double>(ev.per_question.size());
    ev.report = {p1 / n, ap / n, rr / n, ev.per_question.size()};
    return ev;
}

inline std::vector<QuestionScores> score_prepared(std::span<const std::string> question_ids,
                                                  std::span<const std::vector<PreparedWindow>> windows,
                                                  const ModelParams& params) {
    std::vector<QuestionScores> out;
    for (std::size_t q = 0; q < windows.size(); ++q) {
        QuestionScores qs;
        qs.question_id = question_ids[q];
        for (const auto& w : windows[q]) {
            qs.ids.push_back(w.window_id);
            qs.scores.push_back(forward_window(w, params).score);
            qs.labels.push_back(w.label());
        }
        out.push_back(std::move(qs));
    }
    return out;
}

/// Aligns every window of the corpus once; grouped per question.
inline std::vector<std::vector<PreparedWindow>> prepare_corpus(const Corpus& corpus, const EmbeddingStore& store,
                                                               const FrequencyTable& ft, const SinkhornConfig& cfg) {
    std::vector<std::vector<PreparedWindow>> out;
    out.reserve(corpus.instances.size());
    for (const auto& inst : corpus.instances) {
        std::vector<PreparedWindow> ws;
        for (const auto& w : inst.windows) {
            ws.push_back(prepare_window(inst.question_id, inst.question, w, store, ft, cfg));
        }
        out.push_back(std::move(ws));
    }
    return out;
}

inline std::vector<std::string> question_ids(const Corpus& corpus) {
    std::vector<std::string> ids;
    for (const auto& inst : corpus.instances) {
        ids.push_back(inst.question_id);
    }
    return ids;
}

inline std::vector<QuestionScores> score_corpus(const Corpus& corpus, const EmbeddingStore& store,
                                                const FrequencyTable& ft, const ModelParams& params,
                                                const SinkhornConfig& cfg) {
    const auto prepared = prepare_corpus(corpus, store, ft, cfg);
    const auto ids = question_ids(corpus);
    return score_prepared(ids, prepared, params);
}

/// Point-wise scoring of every candidate, then per-question ranking metrics.
inline Evaluation evaluate(const Corpus& corpus, const EmbeddingStore& store, const FrequencyTable& ft,
                           const ModelParams& params, const SinkhornConfig& cfg) {
    const auto scores = score_corpus(corpus, store, ft, params, cfg);
    return evaluate_scores(scores);
}

} // namespace otrank
