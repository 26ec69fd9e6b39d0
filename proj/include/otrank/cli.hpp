#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "otrank/checkpoint.hpp"
#include "otrank/dataset.hpp"
#include "otrank/embeddings.hpp"
#include "otrank/metrics.hpp"
#include "otrank/reranker.hpp"
#include "otrank/sinkhorn.hpp"
#include "otrank/synthetic.hpp"
#include "otrank/training.hpp"

namespace otrank::cli {

enum ExitCode : int { kOk = 0, kValidation = 1, kRuntime = 2 };

namespace fs = std::filesystem;

inline std::shared_ptr<spdlog::logger> logger() {
    static auto log = [] {
        auto l = spdlog::stderr_color_mt("otrank");
        l->set_pattern("[%l] %v");
        l->set_level(spdlog::level::info);
        if (const char* env = std::getenv("OTRANK_LOG")) {
            const std::string v = env;
            if (v == "error") l->set_level(spdlog::level::err);
            else if (v == "warn") l->set_level(spdlog::level::warn);
            else if (v == "info") l->set_level(spdlog::level::info);
            else if (v == "debug") l->set_level(spdlog::level::debug);
        }
        return l;
    }();
    return log;
}

inline void require_file(const std::string& path, const std::string& flag) {
    if (path.empty()) {
        throw ValidationError(flag + " is required");
    }
    if (!fs::is_regular_file(path)) {
        throw ValidationError(flag + ": file not found: " + path);
    }
}

inline void require_parent_dir(const std::string& path, const std::string& flag) {
    const auto parent = fs::path(path).parent_path();
    if (!parent.empty() && !fs::is_directory(parent)) {
        throw ValidationError(flag + ": directory does not exist: " + parent.string());
    }
}

inline void write_text(const std::string& path, const std::string& text) { io::write_file(path, text); }

/// Stable numeric formatting for TSV output.
inline std::string fmt_double(double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
}

inline nlohmann::json to_json(const MetricsReport& r) {
    return {{"p_at_1", r.p_at_1}, {"map", r.map}, {"mrr", r.mrr}, {"questions", r.num_questions_evaluated}};
}

inline nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(row);
    }
    return rows;
}

struct Paths {
    std::string train, dev, embeddings, dev_embeddings, out_dir;
};

/// Config file keys are TrainConfig fields plus the paths above. Relative paths are
/// resolved against the config file's directory.
inline std::pair<TrainConfig, Paths> load_train_config(const std::string& path) {
    require_file(path, "--config");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("--config: " + path + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) {
        throw ValidationError("--config: top level must be an object");
    }
    TrainConfig cfg;
    merge_json(cfg, j);
    const auto base = fs::path(path).parent_path();
    auto resolve = [&](const char* key) -> std::string {
        if (!j.contains(key) || j[key].is_null()) return {};
        if (!j[key].is_string()) throw ValidationError(std::string("--config: \"") + key + "\" must be a string");
        fs::path p = j[key].get<std::string>();
        return (p.is_relative() ? base / p : p).string();
    };
    Paths paths{resolve("train"), resolve("dev"), resolve("embeddings"), resolve("dev_embeddings"),
                resolve("out_dir")};
    return {cfg, paths};
}

inline int cmd_build_freq(const std::string& train_path, const std::string& out) {
    require_file(train_path, "--train");
    require_parent_dir(out, "--out");
    const auto corpus = load_corpus(train_path, Split::train);
    const auto ft = build_frequency_table(corpus);
    write_text(out, otrank::to_json(ft).dump(2) + "\n");
    logger()->info("wrote frequency table ({} words, {} questions) to {}", ft.counts.size(), ft.num_questions, out);
    return kOk;
}

struct TrainOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::uint32_t> epochs;
    std::optional<double> learning_rate;
    std::optional<double> gamma;
    std::optional<std::uint32_t> batch_size;
    std::string out_dir;
};

inline int cmd_train(const std::string& config_path, const TrainOverrides& o) {
    auto [cfg, paths] = load_train_config(config_path);
    if (o.seed) cfg.seed = *o.seed;
    if (o.epochs) cfg.epochs = *o.epochs;
    if (o.learning_rate) cfg.learning_rate = *o.learning_rate;
    if (o.gamma) cfg.gamma = *o.gamma;
    if (o.batch_size) cfg.batch_size = *o.batch_size;
    if (!o.out_dir.empty()) paths.out_dir = o.out_dir;
    cfg.validate();

    require_file(paths.train, "config \"train\"");
    require_file(paths.embeddings, "config \"embeddings\"");
    if (!paths.dev.empty()) require_file(paths.dev, "config \"dev\"");
    if (paths.dev_embeddings.empty()) paths.dev_embeddings = paths.embeddings;
    if (!paths.dev.empty()) require_file(paths.dev_embeddings, "config \"dev_embeddings\"");
    if (paths.out_dir.empty()) throw ValidationError("config \"out_dir\" (or --out-dir) is required");
    fs::create_directories(paths.out_dir);

    nlohmann::json effective = otrank::to_json(cfg);
    effective["train"] = paths.train;
    effective["dev"] = paths.dev;
    effective["embeddings"] = paths.embeddings;
    effective["out_dir"] = paths.out_dir;
    logger()->info("effective config: {}", effective.dump());

    const auto train_corpus = load_corpus(paths.train, Split::train);
    const auto store = load_embedding_store(paths.embeddings);
    std::optional<Corpus> dev_corpus;
    std::optional<EmbeddingStore> dev_store;
    std::optional<TrainSplit> dev;
    if (!paths.dev.empty()) {
        dev_corpus = load_corpus(paths.dev, Split::dev);
        dev_store = paths.dev_embeddings == paths.embeddings ? store : load_embedding_store(paths.dev_embeddings);
        dev = TrainSplit{&*dev_corpus, &*dev_store};
    }

    const auto log_path = (fs::path(paths.out_dir) / "train_log.jsonl").string();
    std::ofstream log_out(log_path, std::ios::trunc);
    auto result = train({&train_corpus, &store}, cfg, dev, [&](const EpochLog& e) {
        log_out << otrank::to_json(e).dump() << '\n';
        log_out.flush();
        logger()->info("epoch {} loss {:.6f}{}", e.epoch, e.train_loss,
                       e.dev ? " dev MAP " + std::to_string(e.dev->map) : std::string());
        if (e.sinkhorn_nonconverged > 0) {
            logger()->warn("{} alignments did not converge within max_iter", e.sinkhorn_nonconverged);
        }
    });
    const auto final_path = (fs::path(paths.out_dir) / "final.otck").string();
    save_checkpoint(result.final_checkpoint, final_path);
    const auto best_path = (fs::path(paths.out_dir) / "checkpoint.otck").string();
    save_checkpoint(result.best_checkpoint ? *result.best_checkpoint : result.final_checkpoint, best_path);
    logger()->info("wrote {} and {}", best_path, final_path);
    return kOk;
}

inline std::vector<std::pair<Corpus, EmbeddingStore>> load_splits(const std::vector<std::string>& splits,
                                                                   const std::vector<std::string>& embeddings) {
    if (splits.empty()) throw ValidationError("--split is required");
    if (embeddings.empty()) throw ValidationError("--embeddings is required");
    if (embeddings.size() != 1 && embeddings.size() != splits.size()) {
        throw ValidationError("--embeddings must be given once or once per --split");
    }
    for (const auto& s : splits) require_file(s, "--split");
    for (const auto& e : embeddings) require_file(e, "--embeddings");
    std::vector<std::pair<Corpus, EmbeddingStore>> out;
    std::optional<EmbeddingStore> shared;
    if (embeddings.size() == 1) shared = load_embedding_store(embeddings.front());
    for (std::size_t k = 0; k < splits.size(); ++k) {
        out.emplace_back(load_corpus(splits[k], Split::test),
                         shared ? *shared : load_embedding_store(embeddings[k]));
    }
    return out;
}

inline std::vector<QuestionScores> score_splits(const std::vector<std::pair<Corpus, EmbeddingStore>>& splits,
                                                const Checkpoint& ck) {
    std::vector<QuestionScores> all;
    for (const auto& [corpus, store] : splits) {
        if (store.dim() != ck.params.dim()) {
            throw ValidationError("embedding dimension " + std::to_string(store.dim()) +
                                  " does not match checkpoint dimension " + std::to_string(ck.params.dim()));
        }
        auto s = score_corpus(corpus, store, ck.frequencies, ck.params, ck.config.sinkhorn);
        all.insert(all.end(), s.begin(), s.end());
    }
    return all;
}

inline int cmd_rerank(const std::string& checkpoint, const std::vector<std::string>& splits,
                      const std::vector<std::string>& embeddings, const std::string& out) {
    require_file(checkpoint, "--checkpoint");
    if (out.empty()) throw ValidationError("--out is required");
    require_parent_dir(out, "--out");
    const auto data = load_splits(splits, embeddings);
    const auto ck = load_checkpoint(checkpoint);
    const auto scores = score_splits(data, ck);
    std::ostringstream lines;
    for (const auto& q : scores) {
        nlohmann::json ranking = nlohmann::json::array();
        for (const auto& item : q.ranking()) {
            ranking.push_back({{"id", item.id}, {"score", item.score}, {"label", q.labels[item.original_index]}});
        }
        lines << nlohmann::json{{"question_id", q.question_id}, {"ranking", ranking}}.dump() << '\n';
    }
    write_text(out, lines.str());
    logger()->info("wrote rankings for {} questions to {}", scores.size(), out);
    return kOk;
}

inline int cmd_eval(const std::string& checkpoint, const std::vector<std::string>& splits,
                    const std::vector<std::string>& embeddings, bool combine, const std::string& out,
                    const std::string& per_question, std::ostream& stdout_stream) {
    require_file(checkpoint, "--checkpoint");
    if (splits.size() > 1 && !combine) {
        throw ValidationError("several --split files given; pass --combine-dev-test to pool them");
    }
    if (!out.empty()) require_parent_dir(out, "--out");
    if (!per_question.empty()) require_parent_dir(per_question, "--per-question");
    const auto data = load_splits(splits, embeddings);
    const auto ck = load_checkpoint(checkpoint);
    const auto ev = evaluate_scores(score_splits(data, ck));
    const auto report = to_json(ev.report).dump(2) + "\n";
    if (out.empty()) {
        stdout_stream << report;
    } else {
        write_text(out, report);
    }
    if (!per_question.empty()) {
        std::ostringstream tsv;
        tsv << "question_id\tcandidates\trelevant\tp_at_1\tap\trr\n";
        for (const auto& m : ev.per_question) {
            tsv << m.question_id << '\t' << m.candidates << '\t' << m.relevant << '\t' << fmt_double(m.p_at_1)
                << '\t' << fmt_double(m.ap) << '\t' << fmt_double(m.rr) << '\n';
        }
        write_text(per_question, tsv.str());
    }
    return kOk;
}

inline nlohmann::json alignment_json(const Sentence& question, const Sentence& s, const AlignmentResult& a) {
    nlohmann::json relevant = nlohmann::json::array();
    for (auto j : a.relevant) {
        const auto tok = a.column_tokens[j];
        relevant.push_back({{"column", j}, {"token_index", tok}, {"surface", s.tokens[tok].surface}});
    }
    nlohmann::json rows = nlohmann::json::array(), cols = nlohmann::json::array();
    for (auto i : a.row_tokens) rows.push_back(question.tokens[i].surface);
    for (auto j : a.column_tokens) cols.push_back(s.tokens[j].surface);
    return {{"role", std::string(to_string(s.role))},
            {"text", s.text},
            {"is_padding", s.is_padding},
            {"question_tokens", rows},
            {"sentence_tokens", cols},
            {"plan", matrix_json(a.plan.plan)},
            {"epsilon", a.plan.epsilon},
            {"iterations", a.plan.iterations_used},
            {"converged", a.plan.converged},
            {"cost", a.cost},
            {"relevant", relevant},
            {"representation_norm", a.representation.norm()}};
}

inline int cmd_align(const std::string& checkpoint, const std::string& split, const std::string& embeddings,
                     const std::string& question_id, const std::string& window_id, const std::string& out,
                     std::ostream& stdout_stream) {
    require_file(checkpoint, "--checkpoint");
    if (question_id.empty()) throw ValidationError("--question-id is required");
    if (window_id.empty()) throw ValidationError("--window-id is required");
    if (!out.empty()) require_parent_dir(out, "--out");
    auto data = load_splits({split}, {embeddings});
    const auto& [corpus, store] = data.front();
    const auto ck = load_checkpoint(checkpoint);

    const QAInstance* inst = nullptr;
    for (const auto& i : corpus.instances) {
        if (i.question_id == question_id) inst = &i;
    }
    if (!inst) throw ValidationError("--question-id: '" + question_id + "' not found in " + split);
    const CandidateWindow* win = nullptr;
    for (const auto& w : inst->windows) {
        if (w.id == window_id) win = &w;
    }
    if (!win) throw ValidationError("--window-id: '" + window_id + "' not found under question " + question_id);

    const auto ws = score_window(inst->question_id, inst->question, *win, store, ck.frequencies, ck.params,
                                 ck.config.sinkhorn);
    nlohmann::json sentences = nlohmann::json::array();
    const auto nodes = window_nodes(*win);
    for (int k = 0; k < kWindowSize; ++k) {
        sentences.push_back(alignment_json(inst->question, *nodes[k], ws.alignments[k]));
    }
    const nlohmann::json report = {{"question_id", question_id},
                                   {"window_id", window_id},
                                   {"question", inst->question.text},
                                   {"sentences", sentences},
                                   {"dependency_weights", matrix_json(ws.alpha)},
                                   {"score", ws.score}};
    if (out.empty()) {
        stdout_stream << report.dump(2) << '\n';
    } else {
        write_text(out, report.dump(2) + "\n");
    }
    return kOk;
}

inline int cmd_gradcheck(std::uint64_t seed, std::ostream& stdout_stream) {
    const auto report = gradcheck(seed);
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : report.tensors) {
        tensors.push_back({{"tensor", t.name},
                           {"size", t.size},
                           {"max_rel_error", t.max_rel_error},
                           {"max_abs_error", t.max_abs_error}});
    }
    const nlohmann::json j = {{"seed", seed},
                              {"threshold", report.threshold},
                              {"max_rel_error", report.max_rel_error},
                              {"passed", report.passed()},
                              {"tensors", tensors}};
    stdout_stream << j.dump(2) << '\n';
    if (!report.passed()) {
        logger()->error("gradient check failed: max relative error {} > {}", report.max_rel_error, report.threshold);
        return kRuntime;
    }
    return kOk;
}

inline int cmd_synth(const SyntheticConfig& cfg, const std::string& out_dir) {
    if (out_dir.empty()) throw ValidationError("--out-dir is required");
    fs::create_directories(out_dir);
    const auto data = make_synthetic(cfg);
    const fs::path dir(out_dir);
    save_corpus(data.train, (dir / "train.jsonl").string());
    save_corpus(data.dev, (dir / "dev.jsonl").string());
    save_embedding_store(data.store, (dir / "embeddings.otrk").string());
    const nlohmann::json config = {{"train", "train.jsonl"},
                                   {"dev", "dev.jsonl"},
                                   {"embeddings", "embeddings.otrk"},
                                   {"out_dir", "run"},
                                   {"learning_rate", 1e-3},
                                   {"epochs", 20}};
    write_text((dir / "config.json").string(), config.dump(2) + "\n");
    logger()->info("wrote synthetic corpus ({} train / {} dev questions, d={}) to {}", cfg.train_questions,
                   cfg.dev_questions, cfg.dim, out_dir);
    return kOk;
}

/// Entry point shared by the binary and the tests. `args` excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& stdout_stream = std::cout) {
    CLI::App app{"otrank: optimal-transport alignment and graph-based answer sentence reranking"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    std::string train_path, out, config_path, checkpoint, question_id, window_id, per_question, out_dir;
    std::vector<std::string> splits, embeddings;
    bool combine = false;
    std::uint64_t seed = 0;
    TrainOverrides overrides;
    SyntheticConfig synth;
    bool no_context_labels = false;

    auto* build_freq = app.add_subcommand("build-freq", "Count question frequencies over a training split");
    build_freq->add_option("--train", train_path, "Training corpus (JSONL)")->required();
    build_freq->add_option("--out", out, "Output frequency table (JSON)")->required();

    auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON config");
    train_cmd->add_option("--config", config_path, "Training config (JSON)")->required();
    train_cmd->add_option("--seed", overrides.seed, "Override config seed (default: config value)");
    train_cmd->add_option("--epochs", overrides.epochs, "Override config epochs (default: config value)");
    train_cmd->add_option("--lr", overrides.learning_rate, "Override config learning_rate (default: config value)");
    train_cmd->add_option("--gamma", overrides.gamma, "Override config gamma (default: config value)");
    train_cmd->add_option("--batch-size", overrides.batch_size, "Override config batch_size (default: config value)");
    train_cmd->add_option("--out-dir", overrides.out_dir, "Override config out_dir (default: config value)");

    auto* rerank = app.add_subcommand("rerank", "Write per-question rankings as JSONL");
    rerank->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
    rerank->add_option("--split", splits, "Corpus split (JSONL)")->required();
    rerank->add_option("--embeddings", embeddings, "Embedding store")->required();
    rerank->add_option("--out", out, "Output rankings (JSONL)")->required();

    auto* eval = app.add_subcommand("eval", "Report P@1, MAP and MRR");
    eval->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
    eval->add_option("--split", splits, "Corpus split (JSONL); repeat with --combine-dev-test")->required();
    eval->add_option("--embeddings", embeddings, "Embedding store (once, or once per split)")->required();
    eval->add_flag("--combine-dev-test", combine, "Pool all given splits into one evaluation set");
    eval->add_option("--out", out, "Write the report here instead of stdout");
    eval->add_option("--per-question", per_question, "Optional per-question TSV");

    auto* align = app.add_subcommand("align", "Inspect the alignment of one candidate window");
    align->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
    align->add_option("--split", splits, "Corpus split (JSONL)")->required()->expected(1);
    align->add_option("--embeddings", embeddings, "Embedding store")->required()->expected(1);
    align->add_option("--question-id", question_id, "Question id")->required();
    align->add_option("--window-id", window_id, "Candidate window id")->required();
    align->add_option("--out", out, "Write the report here instead of stdout");

    auto* grad = app.add_subcommand("gradcheck", "Finite-difference audit of the analytic gradients");
    grad->add_option("--seed", seed, "Seed for the micro-model and batch");

    auto* synth_cmd = app.add_subcommand("synth", "Generate a planted-signal synthetic corpus");
    synth_cmd->add_option("--out-dir", out_dir, "Output directory")->required();
    synth_cmd->add_option("--train-questions", synth.train_questions, "Training questions");
    synth_cmd->add_option("--dev-questions", synth.dev_questions, "Dev questions");
    synth_cmd->add_option("--candidates", synth.candidates, "Candidates per question");
    synth_cmd->add_option("--dim", synth.dim, "Embedding dimension");
    synth_cmd->add_option("--seed", synth.seed, "Generator seed");
    synth_cmd->add_flag("--no-context-labels", no_context_labels, "Leave context sentence labels unknown");

    std::vector<const char*> argv{"otrank"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        stdout_stream << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        stdout_stream << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        logger()->error("{}", e.what());
        return kValidation;
    }

    try {
        if (*build_freq) return cmd_build_freq(train_path, out);
        if (*train_cmd) return cmd_train(config_path, overrides);
        if (*rerank) return cmd_rerank(checkpoint, splits, embeddings, out);
        if (*eval) return cmd_eval(checkpoint, splits, embeddings, combine, out, per_question, stdout_stream);
        if (*align) {
            return cmd_align(checkpoint, splits.front(), embeddings.front(), question_id, window_id, out,
                             stdout_stream);
        }
        if (*grad) return cmd_gradcheck(seed, stdout_stream);
        if (*synth_cmd) {
            synth.context_labels = !no_context_labels;
            return cmd_synth(synth, out_dir);
        }
    } catch (const ValidationError& e) {
        logger()->error("{}", e.what());
        return kValidation;
    } catch (const std::exception& e) {
        logger()->error("{}", e.what());
        return kRuntime;
    }
    return kValidation;
}

} // namespace otrank::cli
