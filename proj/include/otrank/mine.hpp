#pragma once

#include <array>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "otrank/error.hpp"
#include "otrank/reranker.hpp"

namespace otrank {

/// Ordered node pairs over (cand, prev, next), 0-based.
struct PairIndexSets {
    /// Both sentences are answers, i != j.
    std::vector<std::pair<int, int>> positive;
    /// First is an answer, second is not.
    std::vector<std::pair<int, int>> negative;

    bool empty() const { return positive.empty() && negative.empty(); }
    bool operator==(const PairIndexSets&) const = default;
};

/// Unknown (absent) labels count as non-answers.
inline PairIndexSets build_pair_sets(const std::array<std::optional<bool>, kWindowSize>& labels) {
    PairIndexSets sets;
    for (int i = 0; i < kWindowSize; ++i) {
        if (!labels[i].value_or(false)) {
            continue;
        }
        for (int j = 0; j < kWindowSize; ++j) {
            if (j == i) {
                continue;
            }
            if (labels[j].value_or(false)) {
                sets.positive.emplace_back(i, j);
            } else {
                sets.negative.emplace_back(i, j);
            }
        }
    }
    return sets;
}

inline Eigen::VectorXd pair_input(const Eigen::VectorXd& h_i, const Eigen::VectorXd& h_j) {
    if (h_i.size() != h_j.size()) {
        throw ValidationError("discriminator: vector sizes differ");
    }
    Eigen::VectorXd x(h_i.size() + h_j.size());
    x << h_i, h_j;
    return x;
}

inline double discriminator_logit(const Eigen::VectorXd& h_i, const Eigen::VectorXd& h_j, const FeedForward& disc,
                                  FeedForwardCache* cache = nullptr) {
    return forward_scalar(disc, pair_input(h_i, h_j), cache);
}

/// U([h_i; h_j]) in (0, 1). Order-sensitive.
inline double discriminator(const Eigen::VectorXd& h_i, const Eigen::VectorXd& h_j, const FeedForward& disc) {
    return probability(discriminator_logit(h_i, h_j, disc));
}

/// -sum_{I+} log U(h_i, h_j) - sum_{I-} log(1 - U(h_i', h_j')), via softplus of the logit.
inline double mi_loss(const RowMatrix& H, const PairIndexSets& sets, const FeedForward& disc) {
    double loss = 0.0;
    for (auto [i, j] : sets.positive) {
        loss += softplus(-discriminator_logit(H.row(i).transpose(), H.row(j).transpose(), disc));
    }
    for (auto [i, j] : sets.negative) {
        loss += softplus(discriminator_logit(H.row(i).transpose(), H.row(j).transpose(), disc));
    }
    return loss;
}

} // namespace otrank
