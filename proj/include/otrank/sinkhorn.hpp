#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "otrank/dataset.hpp"
#include "otrank/embeddings.hpp"
#include "otrank/error.hpp"

namespace otrank {

struct SinkhornConfig {
    /// eps = eps_scale * mean(D) for each instance.
    double eps_scale = 0.1;
    int max_iter = 500;
    double tol = 1e-6;
};

/// Pairwise Euclidean distances, rows index X and columns index Y.
struct CostMatrix {
    Eigen::MatrixXd entries;

    Eigen::Index rows() const { return entries.rows(); }
    Eigen::Index cols() const { return entries.cols(); }
    double operator()(Eigen::Index i, Eigen::Index j) const { return entries(i, j); }
};

struct TransportPlan {
    Eigen::MatrixXd plan;
    double epsilon = 0.0;
    int iterations_used = 0;
    bool converged = false;
    /// Largest |row/column sum - marginal| of the returned plan.
    double max_violation = 0.0;
};

/// X and Y hold one point per row.
inline CostMatrix cost_matrix(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
    if (X.rows() == 0 || Y.rows() == 0) {
        throw ValidationError("cost_matrix needs nonempty point sets");
    }
    if (X.cols() != Y.cols()) {
        throw ValidationError("cost_matrix dimension mismatch: " + std::to_string(X.cols()) + " vs " +
                              std::to_string(Y.cols()));
    }
    CostMatrix D{Eigen::MatrixXd(X.rows(), Y.rows())};
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        for (Eigen::Index j = 0; j < Y.rows(); ++j) {
            D.entries(i, j) = (X.row(i) - Y.row(j)).norm();
        }
    }
    return D;
}

namespace detail {

inline double log_sum_exp(std::span<const double> xs) {
    double hi = -std::numeric_limits<double>::infinity();
    for (double x : xs) {
        hi = std::max(hi, x);
    }
    if (hi == -std::numeric_limits<double>::infinity()) {
        return hi;
    }
    double s = 0.0;
    for (double x : xs) {
        s += std::exp(x - hi);
    }
    return hi + std::log(s);
}

inline int lexicographic_compare(std::span<const double> a, std::span<const double> b) {
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
        if (a[i] < b[i]) return -1;
        if (a[i] > b[i]) return 1;
    }
    return a.size() < b.size() ? -1 : (a.size() > b.size() ? 1 : 0);
}

// Log-domain Sinkhorn on a fixed orientation. Dual potentials f (rows) and g (cols):
// plan_ij = exp((f_i + g_j - D_ij) / eps).
inline TransportPlan sinkhorn_log_domain(std::span<const double> p, std::span<const double> q,
                                         const Eigen::MatrixXd& D, double eps, int max_iter, double tol) {
    const auto n = static_cast<Eigen::Index>(p.size());
    const auto m = static_cast<Eigen::Index>(q.size());
    std::vector<double> log_p(p.size()), log_q(q.size());
    for (std::size_t i = 0; i < p.size(); ++i) log_p[i] = std::log(p[i]);
    for (std::size_t j = 0; j < q.size(); ++j) log_q[j] = std::log(q[j]);

    std::vector<double> f(p.size(), 0.0), g(q.size(), 0.0);
    std::vector<double> best_f = f, best_g = g;
    double best_violation = std::numeric_limits<double>::infinity();
    std::vector<double> scratch(static_cast<std::size_t>(std::max(n, m)));

    auto plan_from = [&](const std::vector<double>& fs, const std::vector<double>& gs) {
        Eigen::MatrixXd P(n, m);
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < m; ++j) {
                P(i, j) = std::exp((fs[i] + gs[j] - D(i, j)) / eps);
            }
        }
        return P;
    };
    auto violation_of = [&](const Eigen::MatrixXd& P) {
        double v = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) v = std::max(v, std::abs(P.row(i).sum() - p[i]));
        for (Eigen::Index j = 0; j < m; ++j) v = std::max(v, std::abs(P.col(j).sum() - q[j]));
        return v;
    };

    TransportPlan out;
    out.epsilon = eps;
    for (int it = 1; it <= max_iter; ++it) {
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < m; ++j) scratch[j] = (g[j] - D(i, j)) / eps;
            f[i] = eps * (log_p[i] - log_sum_exp(std::span(scratch.data(), static_cast<std::size_t>(m))));
        }
        for (Eigen::Index j = 0; j < m; ++j) {
            for (Eigen::Index i = 0; i < n; ++i) scratch[i] = (f[i] - D(i, j)) / eps;
            g[j] = eps * (log_q[j] - log_sum_exp(std::span(scratch.data(), static_cast<std::size_t>(n))));
        }
        // Zero-mass rows/cols leave -inf potentials; those cells are exactly 0.
        const auto P = plan_from(f, g);
        const double v = violation_of(P);
        out.iterations_used = it;
        if (v < best_violation) {
            best_violation = v;
            best_f = f;
            best_g = g;
        }
        if (v <= tol) {
            out.plan = P;
            out.converged = true;
            out.max_violation = v;
            return out;
        }
    }
    out.plan = plan_from(best_f, best_g);
    out.converged = false;
    out.max_violation = best_violation;
    return out;
}

} // namespace detail

/// Entropic OT plan between marginals p (rows of D) and q (columns of D).
///
/// Runs on the log-domain dual potentials so small eps does not underflow. The
/// problem is solved in a canonical orientation chosen from (p, q, D), which makes
/// swapping the two sides return the exact transpose. On non-convergence the
/// iterate with the smallest marginal violation is returned with converged=false.
inline TransportPlan sinkhorn_plan(const ProbVector& p, const ProbVector& q, const CostMatrix& D, double eps,
                                   int max_iter, double tol) {
    if (static_cast<Eigen::Index>(p.size()) != D.rows() || static_cast<Eigen::Index>(q.size()) != D.cols()) {
        throw ValidationError("sinkhorn_plan: marginal sizes do not match cost matrix");
    }
    if (p.size() == 0 || q.size() == 0) {
        throw ValidationError("sinkhorn_plan: empty marginal");
    }
    if (!(eps > 0.0) || !std::isfinite(eps)) {
        throw ValidationError("sinkhorn_plan: eps must be positive and finite");
    }
    if (!D.entries.allFinite()) {
        throw NumericError("sinkhorn_plan: cost matrix has non-finite entries");
    }
    if (max_iter < 1) {
        throw ValidationError("sinkhorn_plan: max_iter must be at least 1");
    }

    int order = 0;
    if (p.size() != q.size()) {
        order = p.size() < q.size() ? -1 : 1;
    } else {
        order = detail::lexicographic_compare(p.values, q.values);
        if (order == 0) {
            const Eigen::MatrixXd Dr = D.entries;
            const Eigen::MatrixXd Dt = D.entries.transpose();
            std::vector<double> a(Dr.data(), Dr.data() + Dr.size());
            std::vector<double> b(Dt.data(), Dt.data() + Dt.size());
            order = detail::lexicographic_compare(a, b);
        }
    }
    if (order <= 0) {
        return detail::sinkhorn_log_domain(p.values, q.values, D.entries, eps, max_iter, tol);
    }
    const Eigen::MatrixXd Dt = D.entries.transpose();
    auto plan = detail::sinkhorn_log_domain(q.values, p.values, Dt, eps, max_iter, tol);
    plan.plan.transposeInPlace();
    return plan;
}

inline double transport_cost(const Eigen::MatrixXd& plan, const CostMatrix& D) {
    if (plan.rows() != D.rows() || plan.cols() != D.cols()) {
        throw ValidationError("transport_cost: shape mismatch");
    }
    double total = 0.0;
    for (Eigen::Index i = 0; i < plan.rows(); ++i) {
        for (Eigen::Index j = 0; j < plan.cols(); ++j) {
            total += plan(i, j) * D(i, j);
        }
    }
    return total;
}

/// Union of the row-wise argmax columns, ascending. Ties go to the smallest column.
inline std::vector<std::size_t> relevant_context(const Eigen::MatrixXd& plan) {
    std::vector<bool> hit(static_cast<std::size_t>(plan.cols()), false);
    for (Eigen::Index i = 0; i < plan.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < plan.cols(); ++j) {
            if (plan(i, j) > plan(i, best)) {
                best = j;
            }
        }
        hit[static_cast<std::size_t>(best)] = true;
    }
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < hit.size(); ++j) {
        if (hit[j]) out.push_back(j);
    }
    return out;
}

/// Mean of the selected rows; each selected word counts once.
inline Eigen::VectorXd sentence_representation(const Eigen::MatrixXd& embeddings, std::span<const std::size_t> relevant) {
    if (relevant.empty()) {
        throw ValidationError("sentence_representation: empty relevant set");
    }
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(embeddings.cols());
    for (auto j : relevant) {
        if (j >= static_cast<std::size_t>(embeddings.rows())) {
            throw ValidationError("sentence_representation: index " + std::to_string(j) + " out of range");
        }
        sum += embeddings.row(static_cast<Eigen::Index>(j)).transpose();
    }
    return sum / static_cast<double>(relevant.size());
}

struct AlignmentResult {
    TransportPlan plan;
    CostMatrix costs;
    ProbVector question_marginal;
    ProbVector sentence_marginal;
    /// Original token indices behind each plan row (question) and column (sentence).
    std::vector<std::size_t> row_tokens;
    std::vector<std::size_t> column_tokens;
    double cost = 0.0;
    /// Column indices into the filtered sentence tokens.
    std::vector<std::size_t> relevant;
    Eigen::VectorXd representation;
};

inline Eigen::MatrixXd select_rows(const Eigen::MatrixXd& m, std::span<const std::size_t> rows) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) {
        out.row(static_cast<Eigen::Index>(k)) = m.row(static_cast<Eigen::Index>(rows[k]));
    }
    return out;
}

/// Align question words to the words of `s`, both given with their per-token vectors.
inline AlignmentResult align_sentence(const Sentence& question, const Eigen::MatrixXd& question_vectors,
                                      const Sentence& s, const Eigen::MatrixXd& sentence_vectors,
                                      const FrequencyTable& ft, const SinkhornConfig& cfg) {
    AlignmentResult out;
    out.row_tokens = content_token_indices(question);
    if (out.row_tokens.empty()) {
        throw ValidationError("align_sentence: question has no tokens");
    }
    const auto qtoks = content_tokens(question);
    out.question_marginal = marginal_distribution(qtoks, ft);
    const Eigen::Index n = static_cast<Eigen::Index>(out.row_tokens.size());

    if (s.is_padding) {
        out.column_tokens = {0};
        out.costs.entries = Eigen::MatrixXd::Zero(n, 1);
        out.sentence_marginal.values = {1.0};
        out.plan.plan = Eigen::Map<const Eigen::VectorXd>(out.question_marginal.values.data(), n);
        out.plan.converged = true;
        out.cost = 0.0;
        out.relevant = {0};
        out.representation = Eigen::VectorXd::Zero(question_vectors.cols());
        return out;
    }

    out.column_tokens = content_token_indices(s);
    if (out.column_tokens.empty()) {
        throw ValidationError("align_sentence: sentence has no tokens");
    }
    out.sentence_marginal = marginal_distribution(content_tokens(s), ft);
    const auto X = select_rows(question_vectors, out.row_tokens);
    const auto Y = select_rows(sentence_vectors, out.column_tokens);
    out.costs = cost_matrix(X, Y);

    const double mean_cost = out.costs.entries.mean();
    // All-zero costs make every coupling optimal; any eps yields p q^T.
    const double eps = mean_cost > 0.0 ? cfg.eps_scale * mean_cost : cfg.eps_scale;
    out.plan = sinkhorn_plan(out.question_marginal, out.sentence_marginal, out.costs, eps, cfg.max_iter, cfg.tol);
    out.cost = transport_cost(out.plan.plan, out.costs);
    out.relevant = relevant_context(out.plan.plan);
    out.representation = sentence_representation(Y, out.relevant);
    return out;
}

/// Store-backed overload; `window_id` is ignored for the question.
inline AlignmentResult align_sentence(const std::string& instance_id, const Sentence& question,
                                      const std::string& window_id, const Sentence& s,
                                      const EmbeddingStore& store, const FrequencyTable& ft,
                                      const SinkhornConfig& cfg) {
    const auto qv = store.sentence_vectors(instance_id, window_id, question);
    const auto sv = store.sentence_vectors(instance_id, window_id, s);
    return align_sentence(question, qv, s, sv, ft, cfg);
}

} // namespace otrank
