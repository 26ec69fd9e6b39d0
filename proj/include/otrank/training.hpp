#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "otrank/checkpoint.hpp"
#include "otrank/dataset.hpp"
#include "otrank/embeddings.hpp"
#include "otrank/error.hpp"
#include "otrank/metrics.hpp"
#include "otrank/mine.hpp"
#include "otrank/reranker.hpp"
#include "otrank/rng.hpp"

namespace otrank {

/// Partial derivatives laid out exactly like ModelParams.
using GradientSet = ModelParams;

struct LossBreakdown {
    double as2 = 0.0;
    double mi = 0.0;
    double total = 0.0;
};

/// L = L_AS2 + gamma * L_MI.
inline double combine_losses(double as2, double mi, double gamma) { return as2 + gamma * mi; }

inline std::vector<std::span<double>> tensor_spans(ModelParams& p) {
    std::vector<std::span<double>> out;
    for_each_tensor(p, [&](const std::string&, std::span<double> t) { out.push_back(t); });
    return out;
}

inline std::vector<std::string> tensor_names(const ModelParams& p) {
    std::vector<std::string> out;
    for_each_tensor(p, [&](const std::string& name, std::span<const double>) { out.push_back(name); });
    return out;
}

/// Forward + reverse pass for one window. Adds `scale` times the window's loss
/// gradient into `grads` and returns the unscaled window losses. Alignment outputs
/// (representations, costs) are constants here.
inline LossBreakdown accumulate_window_gradients(const PreparedWindow& w, const ModelParams& params, double gamma,
                                                 double scale, GradientSet& grads) {
    const auto f = forward_window(w, params);
    const Eigen::Index d = params.dim();
    const bool y = w.label();

    LossBreakdown loss;
    loss.as2 = bce_from_logit(f.logit, y);

    RowMatrix dH = RowMatrix::Zero(kWindowSize, d);
    const double dz = scale * (sigmoid(f.logit) - (y ? 1.0 : 0.0));
    dH.row(0) += backward(params.head, f.head, Eigen::VectorXd::Constant(1, dz), grads.head).transpose();

    const auto sets = build_pair_sets(w.labels);
    auto mi_term = [&](int i, int j, bool positive) {
        FeedForwardCache cache;
        const double t = discriminator_logit(f.H.row(i).transpose(), f.H.row(j).transpose(), params.discriminator,
                                             gamma != 0.0 ? &cache : nullptr);
        loss.mi += positive ? softplus(-t) : softplus(t);
        if (gamma == 0.0) {
            return;
        }
        const double dt = scale * gamma * (positive ? sigmoid(t) - 1.0 : sigmoid(t));
        const auto dx = backward(params.discriminator, cache, Eigen::VectorXd::Constant(1, dt), grads.discriminator);
        dH.row(i) += dx.head(d).transpose();
        dH.row(j) += dx.tail(d).transpose();
    };
    for (auto [i, j] : sets.positive) mi_term(i, j, true);
    for (auto [i, j] : sets.negative) mi_term(i, j, false);
    loss.total = combine_losses(loss.as2, loss.mi, gamma);

    Eigen::Matrix3d d_alpha = Eigen::Matrix3d::Zero();
    for (std::size_t l = params.gcn.layers.size(); l-- > 0;) {
        const auto& Z = f.gcn.pre_activations[l];
        const auto& A = f.gcn.aggregated[l];
        const auto& H_prev = f.gcn.inputs[l];
        const RowMatrix dZ = dH.cwiseProduct((Z.array() > 0.0).cast<double>().matrix());
        grads.gcn.layers[l].weight.noalias() += dZ.transpose() * A;
        grads.gcn.layers[l].bias += dZ.colwise().sum().transpose();
        const RowMatrix dA = dZ * params.gcn.layers[l].weight;
        d_alpha.noalias() += dA * H_prev.transpose();
        dH = f.alpha.transpose() * dA;
    }

    for (int i = 0; i < kWindowSize; ++i) {
        const double inner = f.alpha.row(i).dot(d_alpha.row(i));
        for (int j = 0; j < kWindowSize; ++j) {
            const double du = f.alpha(i, j) * (d_alpha(i, j) - inner);
            backward(params.dependency, f.dependency[i * kWindowSize + j], Eigen::VectorXd::Constant(1, du),
                     grads.dependency);
        }
    }
    return loss;
}

inline std::vector<const PreparedWindow*> as_pointers(std::span<const PreparedWindow> windows) {
    std::vector<const PreparedWindow*> out;
    for (const auto& w : windows) out.push_back(&w);
    return out;
}

/// Mean AS2 and MI losses over the batch, combined with gamma.
inline LossBreakdown joint_loss(std::span<const PreparedWindow* const> batch, const ModelParams& params,
                                double gamma) {
    if (batch.empty()) {
        throw ValidationError("joint_loss: empty batch");
    }
    LossBreakdown out;
    for (const auto* w : batch) {
        const auto f = forward_window(*w, params);
        out.as2 += bce_from_logit(f.logit, w->label());
        out.mi += mi_loss(f.H, build_pair_sets(w->labels), params.discriminator);
    }
    const auto n = static_cast<double>(batch.size());
    out.as2 /= n;
    out.mi /= n;
    out.total = combine_losses(out.as2, out.mi, gamma);
    return out;
}

inline LossBreakdown joint_loss(std::span<const PreparedWindow> batch, const ModelParams& params, double gamma) {
    return joint_loss(as_pointers(batch), params, gamma);
}

struct GradientResult {
    LossBreakdown loss;
    GradientSet grads;
};

/// Exact reverse-mode gradient of joint_loss. Each window's gradient is formed on
/// its own and then added, scaled by 1/B, in batch order.
inline GradientResult gradients(std::span<const PreparedWindow* const> batch, const ModelParams& params,
                                double gamma) {
    if (batch.empty()) {
        throw ValidationError("gradients: empty batch");
    }
    GradientResult out{{}, zeros_like(params)};
    const double scale = 1.0 / static_cast<double>(batch.size());
    GradientSet window = zeros_like(params);
    auto total = tensor_spans(out.grads);
    auto part = tensor_spans(window);
    for (const auto* w : batch) {
        for (auto t : part) std::fill(t.begin(), t.end(), 0.0);
        const auto l = accumulate_window_gradients(*w, params, gamma, 1.0, window);
        for (std::size_t k = 0; k < total.size(); ++k) {
            for (std::size_t i = 0; i < total[k].size(); ++i) total[k][i] += scale * part[k][i];
        }
        out.loss.as2 += l.as2;
        out.loss.mi += l.mi;
    }
    out.loss.as2 *= scale;
    out.loss.mi *= scale;
    out.loss.total = combine_losses(out.loss.as2, out.loss.mi, gamma);
    if (!std::isfinite(out.loss.total)) {
        throw NumericError("gradients: non-finite loss (as2=" + std::to_string(out.loss.as2) +
                           ", mi=" + std::to_string(out.loss.mi) + ")");
    }
    return out;
}

inline GradientResult gradients(std::span<const PreparedWindow> batch, const ModelParams& params, double gamma) {
    return gradients(as_pointers(batch), params, gamma);
}

inline AdamState make_adam_state(const ModelParams& params) { return {zeros_like(params), zeros_like(params), 0}; }

/// One bias-corrected Adam update; increments state.step before use.
inline void adam_step(ModelParams& params, GradientSet& grads, AdamState& state, const TrainConfig& cfg) {
    auto p = tensor_spans(params);
    auto g = tensor_spans(grads);
    auto m = tensor_spans(state.m);
    auto v = tensor_spans(state.v);
    if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size()) {
        throw ValidationError("adam_step: tensor count mismatch");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, t);
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, t);
    for (std::size_t k = 0; k < p.size(); ++k) {
        if (p[k].size() != g[k].size() || p[k].size() != m[k].size() || p[k].size() != v[k].size()) {
            throw ValidationError("adam_step: shape mismatch in tensor " + std::to_string(k));
        }
        for (std::size_t i = 0; i < p[k].size(); ++i) {
            const double gi = g[k][i];
            m[k][i] = cfg.adam_beta1 * m[k][i] + (1.0 - cfg.adam_beta1) * gi;
            v[k][i] = cfg.adam_beta2 * v[k][i] + (1.0 - cfg.adam_beta2) * gi * gi;
            const double m_hat = m[k][i] / c1;
            const double v_hat = v[k][i] / c2;
            p[k][i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
        }
    }
}

struct EpochLog {
    std::uint32_t epoch = 0;
    double train_loss = 0.0;
    std::optional<MetricsReport> dev;
    double wallclock_s = 0.0;
    std::size_t sinkhorn_nonconverged = 0;
};

inline nlohmann::json to_json(const EpochLog& e) {
    nlohmann::json j = {{"epoch", e.epoch}, {"train_loss", e.train_loss}};
    if (e.dev) {
        j["dev_p_at_1"] = e.dev->p_at_1;
        j["dev_map"] = e.dev->map;
        j["dev_mrr"] = e.dev->mrr;
    } else {
        j["dev_p_at_1"] = nullptr;
        j["dev_map"] = nullptr;
        j["dev_mrr"] = nullptr;
    }
    j["sinkhorn_nonconverged"] = e.sinkhorn_nonconverged;
    j["wallclock_s"] = e.wallclock_s;
    return j;
}

struct TrainResult {
    Checkpoint final_checkpoint;
    /// Highest dev MAP seen (first one wins ties); empty without a dev split.
    std::optional<Checkpoint> best_checkpoint;
    std::vector<EpochLog> log;
};

struct TrainSplit {
    const Corpus* corpus = nullptr;
    const EmbeddingStore* store = nullptr;
};

/// Mini-batch Adam over shuffled candidate windows. Fully determined by cfg.seed.
inline TrainResult train(const TrainSplit& train_split, const TrainConfig& cfg, std::optional<TrainSplit> dev = {},
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
    cfg.validate();
    const auto& corpus = *train_split.corpus;
    const auto& store = *train_split.store;
    if (corpus.instances.empty()) {
        throw ValidationError("train: training split is empty");
    }
    const auto ft = build_frequency_table(corpus);

    // Fails fast on missing embeddings before any parameter update.
    const auto grouped = prepare_corpus(corpus, store, ft, cfg.sinkhorn);
    std::vector<PreparedWindow> windows;
    std::size_t nonconverged = 0;
    for (const auto& q : grouped) {
        for (const auto& w : q) {
            nonconverged += w.nonconverged;
            windows.push_back(w);
        }
    }
    std::vector<std::vector<PreparedWindow>> dev_windows;
    std::vector<std::string> dev_ids;
    if (dev) {
        if (dev->store->dim() != store.dim()) {
            throw ValidationError("dev embeddings have dimension " + std::to_string(dev->store->dim()) +
                                  ", train has " + std::to_string(store.dim()));
        }
        dev_windows = prepare_corpus(*dev->corpus, *dev->store, ft, cfg.sinkhorn);
        dev_ids = question_ids(*dev->corpus);
        for (const auto& q : dev_windows) {
            for (const auto& w : q) nonconverged += w.nonconverged;
        }
    }

    Rng rng(cfg.seed);
    TrainResult result;
    auto& ck = result.final_checkpoint;
    ck.config = cfg;
    ck.frequencies = ft;
    ck.params = init_params({store.dim(), cfg.hidden, static_cast<int>(cfg.gcn_layers)}, rng);
    ck.adam = make_adam_state(ck.params);
    ck.rng_state = rng.state();

    double best_map = -1.0;
    std::vector<std::size_t> order(windows.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::uint32_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batch_index = 0;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size, ++batch_index) {
            const std::size_t e = std::min(order.size(), b + cfg.batch_size);
            std::vector<const PreparedWindow*> batch;
            for (std::size_t k = b; k < e; ++k) batch.push_back(&windows[order[k]]);
            GradientResult g;
            try {
                g = gradients(batch, ck.params, cfg.gamma);
            } catch (const NumericError& err) {
                throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index) +
                                   ": " + err.what());
            }
            loss_sum += g.loss.total * static_cast<double>(batch.size());
            adam_step(ck.params, g.grads, ck.adam, cfg);
        }
        EpochLog log;
        log.epoch = epoch;
        log.train_loss = loss_sum / static_cast<double>(windows.size());
        log.sinkhorn_nonconverged = nonconverged;
        ck.epoch = epoch;
        ck.rng_state = rng.state();
        if (dev) {
            log.dev = evaluate_scores(score_prepared(dev_ids, dev_windows, ck.params)).report;
            if (log.dev->map > best_map) {
                best_map = log.dev->map;
                result.best_checkpoint = ck;
            }
        }
        log.wallclock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.log.push_back(log);
        if (on_epoch) on_epoch(log);
    }
    return result;
}

struct TensorCheck {
    std::string name;
    std::size_t size = 0;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
};

struct GradcheckReport {
    std::vector<TensorCheck> tensors;
    double max_rel_error = 0.0;
    double threshold = 1e-4;
    bool passed() const { return max_rel_error <= threshold; }
};

/// A random micro-model (d=6, hidden=8, two GCN layers) and a batch whose labels
/// fill both MI index sets. Shared by gradcheck and its tests.
inline std::pair<ModelParams, std::vector<PreparedWindow>> gradcheck_fixture(std::uint64_t seed) {
    Rng rng(seed);
    auto params = init_params({6, 8, 2}, rng);
    for (auto t : tensor_spans(params)) {
        for (auto& v : t) {
            if (v == 0.0) v = rng.uniform(-0.1, 0.1);
        }
    }
    const std::array<std::array<std::optional<bool>, 3>, 4> labels = {{
        {true, true, false},
        {true, false, std::nullopt},
        {false, true, true},
        {true, true, true},
    }};
    std::vector<PreparedWindow> batch;
    for (std::size_t k = 0; k < labels.size(); ++k) {
        PreparedWindow w;
        w.window_id = "w" + std::to_string(k);
        w.representations.resize(kWindowSize, 6);
        for (Eigen::Index i = 0; i < w.representations.size(); ++i) w.representations.data()[i] = rng.normal();
        for (auto& c : w.costs) c = rng.uniform(0.5, 3.0);
        w.labels = labels[k];
        batch.push_back(w);
    }
    return {params, batch};
}

/// Central-difference audit of `gradients` on the micro-model. `corrupt`, when set,
/// is applied to the analytic gradients before comparison (fault injection).
inline GradcheckReport gradcheck(std::uint64_t seed, double gamma = 0.3, double step = 1e-4,
                                 const std::function<void(GradientSet&)>& corrupt = {}) {
    auto [params, batch] = gradcheck_fixture(seed);
    auto analytic = gradients(std::span<const PreparedWindow>(batch), params, gamma).grads;
    if (corrupt) corrupt(analytic);

    const auto names = tensor_names(params);
    auto p = tensor_spans(params);
    auto a = tensor_spans(analytic);
    GradcheckReport report;
    for (std::size_t k = 0; k < p.size(); ++k) {
        TensorCheck tc{names[k], p[k].size(), 0.0, 0.0};
        for (std::size_t i = 0; i < p[k].size(); ++i) {
            const double saved = p[k][i];
            p[k][i] = saved + step;
            const double up = joint_loss(std::span<const PreparedWindow>(batch), params, gamma).total;
            p[k][i] = saved - step;
            const double down = joint_loss(std::span<const PreparedWindow>(batch), params, gamma).total;
            p[k][i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double abs_err = std::abs(a[k][i] - numeric);
            const double denom = std::max({std::abs(a[k][i]), std::abs(numeric), 1e-8});
            tc.max_abs_error = std::max(tc.max_abs_error, abs_err);
            tc.max_rel_error = std::max(tc.max_rel_error, abs_err / denom);
        }
        report.max_rel_error = std::max(report.max_rel_error, tc.max_rel_error);
        report.tensors.push_back(tc);
    }
    return report;
}

} // namespace otrank
