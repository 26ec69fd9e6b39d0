#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "otrank/dataset.hpp"
#include "otrank/embeddings.hpp"
#include "otrank/error.hpp"
#include "otrank/rng.hpp"
#include "otrank/sinkhorn.hpp"

namespace otrank {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Graph nodes in fixed order: candidate, previous, next.
inline constexpr int kWindowSize = 3;

/// y = W x + b with W stored out x in.
struct DenseLayer {
    RowMatrix weight;
    Eigen::VectorXd bias;
};

/// Multilayer perceptron, ReLU between layers, linear scalar-or-vector output.
struct FeedForward {
    std::vector<DenseLayer> layers;

    Eigen::Index input_size() const { return layers.front().weight.cols(); }
    Eigen::Index output_size() const { return layers.back().weight.rows(); }
};

struct FeedForwardCache {
    std::vector<Eigen::VectorXd> inputs;
    std::vector<Eigen::VectorXd> pre_activations;
};

inline FeedForward make_feed_forward(std::span<const Eigen::Index> sizes) {
    FeedForward ff;
    for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
        ff.layers.push_back({RowMatrix::Zero(sizes[k + 1], sizes[k]), Eigen::VectorXd::Zero(sizes[k + 1])});
    }
    return ff;
}

inline Eigen::VectorXd relu(const Eigen::VectorXd& x) { return x.cwiseMax(0.0); }

inline Eigen::VectorXd forward(const FeedForward& ff, const Eigen::VectorXd& x, FeedForwardCache* cache = nullptr) {
    if (x.size() != ff.input_size()) {
        throw ValidationError("feed-forward input has size " + std::to_string(x.size()) + ", expected " +
                              std::to_string(ff.input_size()));
    }
    if (cache) {
        cache->inputs.clear();
        cache->pre_activations.clear();
    }
    Eigen::VectorXd h = x;
    for (std::size_t k = 0; k < ff.layers.size(); ++k) {
        const auto& layer = ff.layers[k];
        Eigen::VectorXd z = layer.weight * h + layer.bias;
        if (cache) {
            cache->inputs.push_back(h);
            cache->pre_activations.push_back(z);
        }
        h = (k + 1 < ff.layers.size()) ? relu(z) : z;
    }
    return h;
}

inline double forward_scalar(const FeedForward& ff, const Eigen::VectorXd& x, FeedForwardCache* cache = nullptr) {
    return forward(ff, x, cache)(0);
}

/// Accumulates parameter gradients into `grads` and returns dL/dx.
inline Eigen::VectorXd backward(const FeedForward& ff, const FeedForwardCache& cache, const Eigen::VectorXd& d_out,
                                FeedForward& grads) {
    Eigen::VectorXd delta = d_out;
    for (std::size_t k = ff.layers.size(); k-- > 0;) {
        if (k + 1 < ff.layers.size()) {
            delta = delta.cwiseProduct((cache.pre_activations[k].array() > 0.0).cast<double>().matrix());
        }
        grads.layers[k].weight.noalias() += delta * cache.inputs[k].transpose();
        grads.layers[k].bias += delta;
        delta = ff.layers[k].weight.transpose() * delta;
    }
    return delta;
}

inline double sigmoid(double z) {
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// log(1 + exp(z)) without overflow.
inline double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

/// Sigmoid clamped to the open interval (0, 1).
inline double probability(double z) {
    constexpr double lo = std::numeric_limits<double>::min();
    const double hi = std::nextafter(1.0, 0.0);
    return std::clamp(sigmoid(z), lo, hi);
}

struct GcnParams {
    std::vector<DenseLayer> layers;
};

struct ModelShape {
    Eigen::Index dim = 0;
    Eigen::Index hidden = 400;
    int gcn_layers = 2;
};

/// Every trainable tensor. Gradients and Adam moments reuse this layout.
struct ModelParams {
    FeedForward dependency;     // [r_i * r_j; d_i; d_j] -> hidden -> 1
    GcnParams gcn;              // L square layers
    FeedForward head;           // h_1 -> hidden -> 1 (sigmoid)
    FeedForward discriminator;  // [h_i; h_j] -> hidden -> 1 (sigmoid)

    Eigen::Index dim() const { return head.input_size(); }
    ModelShape shape() const {
        return {dim(), dependency.layers.front().weight.rows(), static_cast<int>(gcn.layers.size())};
    }
};

inline ModelParams zero_params(const ModelShape& shape) {
    if (shape.dim < 1 || shape.hidden < 1 || shape.gcn_layers < 1) {
        throw ValidationError("model shape needs dim, hidden and gcn_layers >= 1");
    }
    ModelParams p;
    const std::array<Eigen::Index, 3> dep{shape.dim + 2, shape.hidden, 1};
    const std::array<Eigen::Index, 3> head{shape.dim, shape.hidden, 1};
    const std::array<Eigen::Index, 3> disc{2 * shape.dim, shape.hidden, 1};
    p.dependency = make_feed_forward(dep);
    p.head = make_feed_forward(head);
    p.discriminator = make_feed_forward(disc);
    for (int l = 0; l < shape.gcn_layers; ++l) {
        p.gcn.layers.push_back({RowMatrix::Zero(shape.dim, shape.dim), Eigen::VectorXd::Zero(shape.dim)});
    }
    return p;
}

inline ModelParams zeros_like(const ModelParams& p) { return zero_params(p.shape()); }

/// Visits (name, contiguous storage) for every tensor in declaration order:
/// dependency, gcn, head, discriminator; within a layer weight (row-major) then bias.
template <class Params, class Fn>
    requires std::same_as<std::remove_const_t<Params>, ModelParams>
void for_each_tensor(Params& params, Fn&& fn) {
    using Elem = std::conditional_t<std::is_const_v<Params>, const double, double>;
    auto visit_layer = [&](const std::string& prefix, auto& layer) {
        fn(prefix + ".weight", std::span<Elem>(layer.weight.data(), static_cast<std::size_t>(layer.weight.size())));
        fn(prefix + ".bias", std::span<Elem>(layer.bias.data(), static_cast<std::size_t>(layer.bias.size())));
    };
    auto visit_ff = [&](const std::string& name, auto& ff) {
        for (std::size_t k = 0; k < ff.layers.size(); ++k) {
            visit_layer(name + "." + std::to_string(k), ff.layers[k]);
        }
    };
    visit_ff("dependency", params.dependency);
    for (std::size_t k = 0; k < params.gcn.layers.size(); ++k) {
        visit_layer("gcn." + std::to_string(k), params.gcn.layers[k]);
    }
    visit_ff("head", params.head);
    visit_ff("discriminator", params.discriminator);
}

/// Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero.
inline ModelParams init_params(const ModelShape& shape, Rng& rng) {
    auto p = zero_params(shape);
    auto fill = [&](DenseLayer& layer) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(layer.weight.cols()));
        for (Eigen::Index k = 0; k < layer.weight.size(); ++k) {
            layer.weight.data()[k] = rng.uniform(-bound, bound);
        }
    };
    for (auto& l : p.dependency.layers) fill(l);
    for (auto& l : p.gcn.layers) fill(l);
    for (auto& l : p.head.layers) fill(l);
    for (auto& l : p.discriminator.layers) fill(l);
    return p;
}

inline Eigen::VectorXd dependency_input(const Eigen::VectorXd& r_i, const Eigen::VectorXd& r_j, double d_i,
                                        double d_j) {
    if (r_i.size() != r_j.size()) {
        throw ValidationError("dependency_score: representation sizes differ");
    }
    Eigen::VectorXd x(r_i.size() + 2);
    x.head(r_i.size()) = r_i.cwiseProduct(r_j);
    x(r_i.size()) = d_i;
    x(r_i.size() + 1) = d_j;
    return x;
}

/// Unnormalized edge score u_ij from the elementwise product of the two sentence
/// representations and both transport costs.
inline double dependency_score(const Eigen::VectorXd& r_i, const Eigen::VectorXd& r_j, double d_i, double d_j,
                               const FeedForward& dep, FeedForwardCache* cache = nullptr) {
    const auto x = dependency_input(r_i, r_j, d_i, d_j);
    if (!x.allFinite()) {
        throw NumericError("dependency_score: non-finite input");
    }
    return forward_scalar(dep, x, cache);
}

/// Max-shifted softmax over one row of three scores.
inline std::array<double, kWindowSize> edge_weights(const std::array<double, kWindowSize>& u) {
    const double hi = std::max({u[0], u[1], u[2]});
    std::array<double, kWindowSize> a{};
    double total = 0.0;
    for (int j = 0; j < kWindowSize; ++j) {
        a[j] = std::exp(u[j] - hi);
        total += a[j];
    }
    for (auto& v : a) v /= total;
    return a;
}

struct GcnCache {
    std::vector<RowMatrix> inputs;          // H^{l-1}
    std::vector<RowMatrix> aggregated;      // alpha H^{l-1}
    std::vector<RowMatrix> pre_activations; // Z^l
};

/// h^l_i = ReLU(sum_j alpha_ij W^l h^{l-1}_j + b^l), rows of H are nodes.
inline RowMatrix gcn_forward(const Eigen::Matrix3d& alpha, const RowMatrix& H0, const GcnParams& gcn,
                             GcnCache* cache = nullptr) {
    if (H0.rows() != kWindowSize) {
        throw ValidationError("gcn_forward expects 3 node rows");
    }
    if (cache) {
        *cache = {};
    }
    RowMatrix H = H0;
    for (const auto& layer : gcn.layers) {
        if (layer.weight.cols() != H.cols()) {
            throw ValidationError("gcn_forward: layer expects width " + std::to_string(layer.weight.cols()) +
                                  ", got " + std::to_string(H.cols()));
        }
        RowMatrix A = alpha * H;
        RowMatrix Z = A * layer.weight.transpose();
        Z.rowwise() += layer.bias.transpose();
        if (cache) {
            cache->inputs.push_back(H);
            cache->aggregated.push_back(A);
            cache->pre_activations.push_back(Z);
        }
        H = Z.cwiseMax(0.0);
    }
    return H;
}

inline double score_candidate(const Eigen::VectorXd& h1, const FeedForward& head) {
    return probability(forward_scalar(head, h1));
}

inline double as2_loss(double p, bool label) {
    if (!(p > 0.0 && p < 1.0)) {
        throw ValidationError("as2_loss: probability must lie in (0, 1)");
    }
    return label ? -std::log(p) : -std::log1p(-p);
}

/// Binary cross-entropy computed from the logit.
inline double bce_from_logit(double z, bool label) { return label ? softplus(-z) : softplus(z); }

/// A window reduced to what the trainable part of the model consumes. Alignment is
/// parameter-free, so this can be computed once per window and reused every epoch.
struct PreparedWindow {
    std::string window_id;
    RowMatrix representations;  // 3 x d, rows cand, prev, next
    std::array<double, kWindowSize> costs{};
    std::array<std::optional<bool>, kWindowSize> labels{};
    std::size_t nonconverged = 0;

    bool label() const { return labels[0].value_or(false); }
};

inline PreparedWindow prepare_window(const std::string& instance_id, const Sentence& question,
                                     const CandidateWindow& window, const EmbeddingStore& store,
                                     const FrequencyTable& ft, const SinkhornConfig& cfg,
                                     std::array<AlignmentResult, kWindowSize>* alignments = nullptr) {
    const auto nodes = window_nodes(window);
    const auto qv = store.sentence_vectors(instance_id, std::string(kQuestionWindow), question);
    PreparedWindow pw;
    pw.window_id = window.id;
    pw.representations.resize(kWindowSize, store.dim());
    for (int k = 0; k < kWindowSize; ++k) {
        const auto sv = store.sentence_vectors(instance_id, window.id, *nodes[k]);
        auto a = align_sentence(question, qv, *nodes[k], sv, ft, cfg);
        pw.representations.row(k) = a.representation.transpose();
        pw.costs[k] = a.cost;
        pw.labels[k] = nodes[k]->label;
        if (!a.plan.converged) {
            ++pw.nonconverged;
        }
        if (alignments) {
            (*alignments)[k] = std::move(a);
        }
    }
    if (!pw.labels[0]) {
        throw ValidationError("window '" + window.id + "' has no candidate label");
    }
    return pw;
}

struct WindowForward {
    Eigen::Matrix3d scores;  // u
    Eigen::Matrix3d alpha;
    std::array<FeedForwardCache, kWindowSize * kWindowSize> dependency;
    GcnCache gcn;
    RowMatrix H;             // 3 x d
    FeedForwardCache head;
    double logit = 0.0;
    double score = 0.0;
};

inline WindowForward forward_window(const PreparedWindow& w, const ModelParams& params) {
    WindowForward f;
    const auto& R = w.representations;
    for (int i = 0; i < kWindowSize; ++i) {
        std::array<double, kWindowSize> row{};
        for (int j = 0; j < kWindowSize; ++j) {
            row[j] = dependency_score(R.row(i).transpose(), R.row(j).transpose(), w.costs[i], w.costs[j],
                                      params.dependency, &f.dependency[i * kWindowSize + j]);
            f.scores(i, j) = row[j];
        }
        const auto a = edge_weights(row);
        for (int j = 0; j < kWindowSize; ++j) f.alpha(i, j) = a[j];
    }
    f.H = gcn_forward(f.alpha, R, params.gcn, &f.gcn);
    f.logit = forward_scalar(params.head, f.H.row(0).transpose(), &f.head);
    f.score = probability(f.logit);
    if (!std::isfinite(f.logit)) {
        throw NumericError("non-finite score for window '" + w.window_id + "'");
    }
    return f;
}

struct WindowScore {
    double score = 0.0;
    RowMatrix H;
    Eigen::Matrix3d alpha;
    Eigen::Matrix3d dependency_scores;
    std::array<AlignmentResult, kWindowSize> alignments;
    PreparedWindow prepared;
};

/// Full pipeline for one window: align the three sentences, build the dependency
/// graph, propagate through the GCN and score the candidate node.
inline WindowScore score_window(const std::string& instance_id, const Sentence& question,
                                const CandidateWindow& window, const EmbeddingStore& store,
                                const FrequencyTable& ft, const ModelParams& params, const SinkhornConfig& cfg) {
    WindowScore out;
    out.prepared = prepare_window(instance_id, question, window, store, ft, cfg, &out.alignments);
    if (out.prepared.representations.cols() != params.dim()) {
        throw ValidationError("embedding dimension " + std::to_string(out.prepared.representations.cols()) +
                              " does not match model dimension " + std::to_string(params.dim()));
    }
    auto f = forward_window(out.prepared, params);
    out.score = f.score;
    out.H = std::move(f.H);
    out.alpha = f.alpha;
    out.dependency_scores = f.scores;
    return out;
}

} // namespace otrank
