// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "cases.hpp"
#include "oracles.hpp"
#include "otrank/otrank.hpp"

using namespace otrank;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool ok = true;
    std::string detail;
};

struct Criterion {
    std::string name;
    double time_limit_s;  // <= 0 means no limit
    std::function<Verdict()> body;
};

std::vector<std::vector<double>> rows(const Eigen::MatrixXd& m) {
    std::vector<std::vector<double>> out;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        out.emplace_back();
        for (Eigen::Index c = 0; c < m.cols(); ++c) out.back().push_back(m(r, c));
    }
    return out;
}

double marginal_violation(const Eigen::MatrixXd& plan, const ProbVector& p, const ProbVector& q) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < plan.rows(); ++i) worst = std::max(worst, std::abs(plan.row(i).sum() - p[i]));
    for (Eigen::Index j = 0; j < plan.cols(); ++j) worst = std::max(worst, std::abs(plan.col(j).sum() - q[j]));
    return worst;
}

std::string fmt(const char* f, auto... v) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, v...);
    return buf;
}

Verdict sinkhorn_feasibility() {
    Rng rng(101);
    double worst = 0.0;
    int converged = 0;
    for (int t = 0; t < 100; ++t) {
        const auto n = 1 + rng.below(12), m = 1 + rng.below(12);
        const auto D = cost_matrix(cases::random_points(rng, n, 16), cases::random_points(rng, m, 16));
        const auto p = cases::random_marginal(rng, n), q = cases::random_marginal(rng, m);
        const SinkhornConfig cfg;
        const auto plan = sinkhorn_plan(p, q, D, cfg.eps_scale * D.entries.mean(), cfg.max_iter, cfg.tol);
        if (!plan.converged) continue;
        ++converged;
        worst = std::max(worst, marginal_violation(plan.plan, p, q));
    }
    return {converged == 100 && worst <= 1e-6, fmt("%d/100 converged, max violation %.3g", converged, worst)};
}

Verdict lp_agreement() {
    Rng rng(102);
    double worst = 0.0;
    int converged = 0;
    for (int t = 0; t < 50; ++t) {
        const auto n = 1 + rng.below(4), m = 1 + rng.below(4);
        const auto D = cost_matrix(cases::random_points(rng, n, 4), cases::random_points(rng, m, 4));
        const auto p = cases::random_marginal(rng, n), q = cases::random_marginal(rng, m);
        const double eps = D.entries.mean() > 0.0 ? 0.01 * D.entries.mean() : 0.01;
        const auto plan = sinkhorn_plan(p, q, D, eps, 100000, 1e-9);
        converged += plan.converged;
        oracle::Mat dm(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(m)));
        for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i)
            for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(m); ++j) dm[i][j] = D(i, j);
        const double exact = oracle::transport_lp_optimum(p.values, q.values, dm);
        const double got = transport_cost(plan.plan, D);
        worst = std::max(worst, std::abs(got - exact) / std::max(exact, 1e-300));
    }
    return {worst <= 0.02, fmt("max relative error %.3g, %d/50 converged", worst, converged)};
}

Verdict zero_cost() {
    Rng rng(103);
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
        const auto n = 1 + rng.below(12), m = 1 + rng.below(12);
        const auto p = cases::random_marginal(rng, n), q = cases::random_marginal(rng, m);
        CostMatrix D{Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m))};
        const SinkhornConfig cfg;
        const auto plan = sinkhorn_plan(p, q, D, cfg.eps_scale, cfg.max_iter, cfg.tol);
        for (Eigen::Index i = 0; i < plan.plan.rows(); ++i)
            for (Eigen::Index j = 0; j < plan.plan.cols(); ++j)
                worst = std::max(worst, std::abs(plan.plan(i, j) - p[i] * q[j]));
    }
    return {worst <= 1e-8, fmt("max |pi - pq^T| %.3g", worst)};
}

Verdict gradient_audit() {
    const auto r = gradcheck(0);
    bool covered[4] = {};
    for (const auto& t : r.tensors) {
        covered[0] |= t.name.starts_with("dependency");
        covered[1] |= t.name.starts_with("gcn.1");
        covered[2] |= t.name.starts_with("head");
        covered[3] |= t.name.starts_with("discriminator");
    }
    const bool all = covered[0] && covered[1] && covered[2] && covered[3];
    return {r.passed() && all, fmt("max relative error %.3g over %zu tensors", r.max_rel_error, r.tensors.size())};
}

Verdict forward_oracle() {
    Rng rng(105);
    double worst = 0.0, worst_row = 0.0;
    for (int t = 0; t < 25; ++t) {
        const auto d = static_cast<std::uint32_t>(1 + rng.below(4));
        const auto c = cases::random_window_case(rng, d, 6, t % 5 == 0, t % 3 == 0);
        const auto ws = score_window("q", c.question, c.window, c.store, c.ft, c.params, SinkhornConfig{});
        const auto nodes = window_nodes(c.window);
        std::array<std::vector<std::vector<double>>, 3> svec;
        std::array<Eigen::MatrixXd, 3> plans;
        for (int k = 0; k < 3; ++k) {
            if (!nodes[k]->is_padding) svec[k] = rows(c.store.sentence_vectors("q", "w", *nodes[k]));
            plans[k] = ws.alignments[k].plan.plan;
        }
        const auto o = oracle::score_window(c.question, rows(c.store.sentence_vectors({"q", "-", Role::question})),
                                            nodes, svec, plans, c.params);
        worst = std::max(worst, std::abs(ws.score - o.score));
        for (int i = 0; i < 3; ++i) worst_row = std::max(worst_row, std::abs(ws.alpha.row(i).sum() - 1.0));
    }
    return {worst <= 1e-8 && worst_row <= 1e-12,
            fmt("max score error %.3g, max alpha row-sum error %.3g", worst, worst_row)};
}

Verdict metric_oracle() {
    Rng rng(106);
    int mismatches = 0;
    for (int t = 0; t < 1000; ++t) {
        const auto q = cases::random_question(rng, 10, "q");
        const auto r = q.ranking();
        const auto o = oracle::metrics(q.scores, q.labels);
        mismatches += precision_at_1(r, q.labels) != o.p_at_1 || average_precision(r, q.labels) != o.ap ||
                      reciprocal_rank(r, q.labels) != o.rr;
    }
    int variant = 0;
    for (int t = 0; t < 100; ++t) {
        const auto q = cases::random_question(rng, 10, "q");
        auto moved = q;
        for (auto& s : moved.scores) s = cases::monotone(t, s);
        const auto a = q.ranking(), b = moved.ranking();
        bool same = a.size() == b.size();
        for (std::size_t k = 0; same && k < a.size(); ++k) same = a[k].id == b[k].id;
        same = same && average_precision(a, q.labels) == average_precision(b, q.labels) &&
               reciprocal_rank(a, q.labels) == reciprocal_rank(b, q.labels) &&
               precision_at_1(a, q.labels) == precision_at_1(b, q.labels);
        variant += !same;
    }
    return {mismatches == 0 && variant == 0,
            fmt("%d/1000 oracle mismatches, %d/100 monotone violations", mismatches, variant)};
}

Verdict loss_degeneracy() {
    const auto data = cases::small_synthetic(107, 40, 4);
    const auto zero = cases::replay_epoch(data, cases::small_config(1, 0.0));
    auto empty = data;
    empty.train = cases::without_answers(data.train);
    const auto any_gamma = cases::replay_epoch(empty, cases::small_config(1, 0.7));
    const bool ok = zero.batches > 1 && zero.mismatches == 0 && zero.disc_gradient_nonzero == 0 &&
                    any_gamma.batches > 1 && any_gamma.mismatches == 0 && any_gamma.disc_gradient_nonzero == 0;
    return {ok, fmt("gamma=0: %zu/%zu batches differ; empty sets at gamma=0.7: %zu/%zu batches differ", zero.mismatches,
                    zero.batches, any_gamma.mismatches, any_gamma.batches)};
}

TrainConfig synthetic_config(std::uint64_t seed, double gamma, std::uint32_t epochs) {
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.gamma = gamma;
    cfg.epochs = epochs;
    cfg.seed = seed;
    return cfg;
}

Verdict end_to_end() {
    const auto data = make_synthetic(SyntheticConfig{});
    const auto r = train({&data.train, &data.store}, synthetic_config(0, 0.3, 50), TrainSplit{&data.dev, &data.store});
    double best_p1 = 0.0, best_map = 0.0;
    std::uint32_t first = 0;
    for (const auto& e : r.log) {
        if (!first && e.dev->p_at_1 >= 0.9 && e.dev->map >= 0.9) first = e.epoch;
    }
    const auto& chosen = r.log[r.best_checkpoint->epoch - 1];
    best_p1 = chosen.dev->p_at_1;
    best_map = chosen.dev->map;
    return {best_p1 >= 0.9 && best_map >= 0.9,
            fmt("best-MAP epoch %u: dev P@1 %.3f MAP %.3f (both >= 0.9 first at epoch %u)", chosen.epoch, best_p1,
                best_map, first)};
}

double mean_train_mi(const SyntheticData& data, const Checkpoint& ck) {
    const auto prepared = prepare_corpus(data.train, data.store, ck.frequencies, ck.config.sinkhorn);
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& q : prepared) {
        for (const auto& w : q) {
            const auto sets = build_pair_sets(w.labels);
            if (sets.positive.empty() && sets.negative.empty()) continue;
            sum += mi_loss(forward_window(w, ck.params).H, sets, ck.params.discriminator);
            ++count;
        }
    }
    return sum / static_cast<double>(count);
}

Verdict mi_effect() {
    std::string detail;
    bool ok = true;
    for (std::uint64_t seed : {1, 2, 3}) {
        SyntheticConfig sc;
        sc.seed = seed;
        const auto data = make_synthetic(sc);
        const auto with = train({&data.train, &data.store}, synthetic_config(seed, 0.3, 10)).final_checkpoint;
        const auto without = train({&data.train, &data.store}, synthetic_config(seed, 0.0, 10)).final_checkpoint;
        const double a = mean_train_mi(data, with), b = mean_train_mi(data, without);
        ok = ok && a < b;
        detail += fmt("%sseed %llu: %.4f vs %.4f", detail.empty() ? "" : "; ", static_cast<unsigned long long>(seed), a, b);
    }
    return {ok, "mi_loss gamma=0.3 vs gamma=0: " + detail};
}

Verdict determinism() {
    SyntheticConfig sc;
    sc.train_questions = 30;
    sc.dev_questions = 10;
    sc.seed = 110;
    const auto data = make_synthetic(sc);
    const auto cfg = synthetic_config(4, 0.3, 3);
    const auto a = train({&data.train, &data.store}, cfg, TrainSplit{&data.dev, &data.store});
    const auto b = train({&data.train, &data.store}, cfg, TrainSplit{&data.dev, &data.store});
    const bool same_seed = serialize_checkpoint(a.final_checkpoint) == serialize_checkpoint(b.final_checkpoint) &&
                           serialize_checkpoint(*a.best_checkpoint) == serialize_checkpoint(*b.best_checkpoint);

    const auto dir = fs::temp_directory_path() / "otrank_acceptance";
    fs::create_directories(dir);
    const auto ck1 = (dir / "a.otck").string(), ck2 = (dir / "b.otck").string();
    save_checkpoint(a.final_checkpoint, ck1);
    save_checkpoint(load_checkpoint(ck1), ck2);
    const bool ck_round = io::read_file(ck1) == io::read_file(ck2);
    const auto st1 = (dir / "a.otrk").string(), st2 = (dir / "b.otrk").string();
    save_embedding_store(data.store, st1);
    save_embedding_store(load_embedding_store(st1), st2);
    const bool st_round = io::read_file(st1) == io::read_file(st2) &&
                          io::read_file(st1 + ".json") == io::read_file(st2 + ".json");
    fs::remove_all(dir);
    return {same_seed && ck_round && st_round,
            fmt("same-seed checkpoints %s; checkpoint round-trip %s; embedding-store round-trip %s",
                same_seed ? "identical" : "DIFFER", ck_round ? "identical" : "DIFFERS",
                st_round ? "identical" : "DIFFERS")};
}

} // namespace

int main() {
    const std::vector<Criterion> criteria = {
        {"sinkhorn feasibility", 5, sinkhorn_feasibility},
        {"LP-oracle agreement", 30, lp_agreement},
        {"zero-cost closed form", 0, zero_cost},
        {"gradient audit", 60, gradient_audit},
        {"forward oracles", 0, forward_oracle},
        {"metric oracles", 0, metric_oracle},
        {"loss degeneracy", 0, loss_degeneracy},
        {"end-to-end learning", 300, end_to_end},
        {"MI effect witness", 0, mi_effect},
        {"determinism and round-trips", 0, determinism},
    };
    int failed = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        const auto& c = criteria[k];
        const auto start = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = c.body();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        bool ok = v.ok;
        std::string timing = fmt("%.2fs", secs);
        if (c.time_limit_s > 0) {
            timing += fmt(" (limit %.0fs)", c.time_limit_s);
            ok = ok && secs < c.time_limit_s;
        }
        failed += !ok;
        std::printf("%s  %2zu %-28s %s [%s]\n", ok ? "PASS" : "FAIL", k + 1, c.name.c_str(), v.detail.c_str(),
                    timing.c_str());
        std::fflush(stdout);
    }
    std::printf("%zu/%zu criteria passed\n", criteria.size() - static_cast<std::size_t>(failed), criteria.size());
    return failed == 0 ? 0 : 1;
}
