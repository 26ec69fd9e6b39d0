#include <gtest/gtest.h>

#include <filesystem>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "otrank/cli.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace otrank;

namespace {

const std::string kGolden = std::string(OTRANK_TEST_DATA) + "/golden/";

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

Outcome run_cli(const std::vector<std::string>& args) {
    std::ostringstream out;
    testing::internal::CaptureStderr();
    const int code = cli::run(args, out);
    return {code, out.str(), testing::internal::GetCapturedStderr()};
}

std::string read(const fs::path& p) { return io::read_file(p.string()); }

std::vector<nlohmann::json> log_without_wallclock(const fs::path& p) {
    std::vector<nlohmann::json> rows;
    std::istringstream in(read(p));
    for (std::string line; std::getline(in, line);) {
        auto j = nlohmann::json::parse(line);
        j.erase("wallclock_s");
        rows.push_back(j);
    }
    return rows;
}

std::vector<double> flatten(const ModelParams& p) {
    std::vector<double> x;
    for_each_tensor(p, [&](const std::string&, std::span<const double> t) { x.insert(x.end(), t.begin(), t.end()); });
    return x;
}

} // namespace

TEST(Cli, UnknownCommandIsValidationError) {
    EXPECT_EQ(run_cli({"frobnicate"}).code, cli::kValidation);
    EXPECT_EQ(run_cli({}).code, cli::kValidation);
}

TEST(Cli, UnknownFlagIsValidationError) {
    EXPECT_EQ(run_cli({"gradcheck", "--nope"}).code, cli::kValidation);
}

TEST(Cli, MissingRequiredFlagIsValidationError) {
    const auto r = run_cli({"eval", "--checkpoint", kGolden + "model.otck"});
    EXPECT_EQ(r.code, cli::kValidation);
    EXPECT_NE(r.err.find("--split"), std::string::npos);
}

TEST(Cli, RerankMissingEmbeddingsNamesPath) {
    const auto dir = testutil::temp_dir();
    const auto missing = (dir / "nowhere.otrk").string();
    const auto r = run_cli({"rerank", "--checkpoint", kGolden + "model.otck", "--split", kGolden + "dev.jsonl",
                            "--embeddings", missing, "--out", (dir / "r.jsonl").string()});
    EXPECT_EQ(r.code, cli::kValidation);
    EXPECT_NE(r.err.find(missing), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(dir / "r.jsonl"));
}

TEST(Cli, MissingCheckpointNamesPath) {
    const auto dir = testutil::temp_dir();
    const auto missing = (dir / "model.otck").string();
    const auto r = run_cli({"eval", "--checkpoint", missing, "--split", kGolden + "dev.jsonl", "--embeddings",
                            kGolden + "embeddings.otrk"});
    EXPECT_EQ(r.code, cli::kValidation);
    EXPECT_NE(r.err.find(missing), std::string::npos);
}

TEST(Cli, CorruptCheckpointIsReported) {
    const auto dir = testutil::temp_dir();
    auto bytes = read(kGolden + "model.otck");
    bytes[bytes.size() / 2] ^= 0x5a;
    testutil::write_text(dir / "bad.otck", bytes);
    const auto r = run_cli({"eval", "--checkpoint", (dir / "bad.otck").string(), "--split", kGolden + "dev.jsonl",
                            "--embeddings", kGolden + "embeddings.otrk"});
    EXPECT_NE(r.code, cli::kOk);
    EXPECT_NE(r.err.find("bad.otck"), std::string::npos) << r.err;
}

TEST(Cli, HelpListsEveryFlagWithDefault) {
    const std::vector<std::pair<std::string, std::vector<std::string>>> commands = {
        {"build-freq", {"--train", "--out"}},
        {"train", {"--config", "--seed", "--epochs", "--lr", "--gamma", "--batch-size", "--out-dir"}},
        {"rerank", {"--checkpoint", "--split", "--embeddings", "--out"}},
        {"eval", {"--checkpoint", "--split", "--embeddings", "--combine-dev-test", "--out", "--per-question"}},
        {"align", {"--checkpoint", "--split", "--embeddings", "--question-id", "--window-id", "--out"}},
        {"gradcheck", {"--seed"}},
        {"synth", {"--out-dir", "--train-questions", "--dev-questions", "--candidates", "--dim", "--seed",
                   "--no-context-labels"}},
    };
    for (const auto& [cmd, flags] : commands) {
        const auto r = run_cli({cmd, "--help"});
        EXPECT_EQ(r.code, cli::kOk) << cmd;
        for (const auto& f : flags) EXPECT_NE(r.out.find(f), std::string::npos) << cmd << " " << f;
    }
    const auto synth = run_cli({"synth", "--help"}).out;
    EXPECT_NE(synth.find("--train-questions UINT [200]"), std::string::npos) << synth;
    EXPECT_NE(synth.find("--dim UINT [16]"), std::string::npos);
    EXPECT_NE(run_cli({"gradcheck", "--help"}).out.find("--seed UINT [0]"), std::string::npos);
    const auto train = run_cli({"train", "--help"}).out;
    for (const auto* f : {"--seed", "--epochs", "--lr", "--gamma", "--batch-size", "--out-dir"}) {
        const auto line = train.substr(train.find(f), train.find('\n', train.find(f)) - train.find(f));
        EXPECT_NE(line.find("default: config value"), std::string::npos) << line;
    }
}

TEST(Cli, EvalMatchesPinnedReport) {
    const auto dir = testutil::temp_dir();
    const auto r = run_cli({"eval", "--checkpoint", kGolden + "model.otck", "--split", kGolden + "dev.jsonl",
                            "--embeddings", kGolden + "embeddings.otrk", "--per-question",
                            (dir / "pq.tsv").string()});
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    EXPECT_EQ(nlohmann::json::parse(r.out), nlohmann::json::parse(read(kGolden + "expected_eval.json")));
    EXPECT_EQ(read(dir / "pq.tsv"), read(kGolden + "expected_per_question.tsv"));
}

TEST(Cli, EvalIsByteIdenticalAcrossRuns) {
    const auto dir = testutil::temp_dir();
    for (const auto* name : {"a.json", "b.json"}) {
        ASSERT_EQ(run_cli({"eval", "--checkpoint", kGolden + "model.otck", "--split", kGolden + "dev.jsonl",
                           "--embeddings", kGolden + "embeddings.otrk", "--out", (dir / name).string()})
                      .code,
                  cli::kOk);
    }
    EXPECT_EQ(read(dir / "a.json"), read(dir / "b.json"));
}

TEST(Cli, SeveralSplitsNeedCombineFlag) {
    const std::vector<std::string> base = {"eval",
                                           "--checkpoint",
                                           kGolden + "model.otck",
                                           "--split",
                                           kGolden + "dev.jsonl",
                                           "--split",
                                           kGolden + "dev.jsonl",
                                           "--embeddings",
                                           kGolden + "embeddings.otrk"};
    EXPECT_EQ(run_cli(base).code, cli::kValidation);
    auto combined = base;
    combined.push_back("--combine-dev-test");
    const auto r = run_cli(combined);
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    const auto j = nlohmann::json::parse(r.out);
    EXPECT_EQ(j["questions"], 8);
    EXPECT_EQ(j["map"], 0.75);
}

TEST(Cli, RerankWritesOneRankingPerQuestion) {
    const auto dir = testutil::temp_dir();
    for (const auto* name : {"a.jsonl", "b.jsonl"}) {
        const auto r = run_cli({"rerank", "--checkpoint", kGolden + "model.otck", "--split", kGolden + "dev.jsonl",
                                "--embeddings", kGolden + "embeddings.otrk", "--out", (dir / name).string()});
        ASSERT_EQ(r.code, cli::kOk) << r.err;
    }
    const auto text = read(dir / "a.jsonl");
    EXPECT_EQ(text, read(dir / "b.jsonl"));
    std::istringstream in(text);
    std::size_t lines = 0;
    for (std::string line; std::getline(in, line); ++lines) {
        const auto j = nlohmann::json::parse(line);
        ASSERT_EQ(j["ranking"].size(), 3u);
        for (std::size_t k = 1; k < 3; ++k) EXPECT_GE(j["ranking"][k - 1]["score"], j["ranking"][k]["score"]);
    }
    EXPECT_EQ(lines, 4u);
}

TEST(Cli, TrainZeroEpochsWritesInitialization) {
    const auto dir = testutil::temp_dir();
    const auto r = run_cli({"train", "--config", kGolden + "config.json", "--epochs", "0", "--out-dir", dir.string()});
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    const auto ck = load_checkpoint((dir / "final.otck").string());
    Rng rng(3);
    EXPECT_EQ(flatten(ck.params), flatten(init_params({4, 16, 2}, rng)));
    EXPECT_EQ(ck.epoch, 0u);
    EXPECT_EQ(read(dir / "checkpoint.otck"), read(dir / "final.otck"));
    EXPECT_TRUE(read(dir / "train_log.jsonl").empty());
}

TEST(Cli, TrainIsReproducibleModuloWallclock) {
    const auto a = testutil::temp_dir() / "a";
    const auto b = testutil::temp_dir() / "b";
    for (const auto& d : {a, b}) {
        const auto r = run_cli({"train", "--config", kGolden + "config.json", "--epochs", "2", "--out-dir", d.string()});
        ASSERT_EQ(r.code, cli::kOk) << r.err;
    }
    EXPECT_EQ(read(a / "final.otck"), read(b / "final.otck"));
    EXPECT_EQ(read(a / "checkpoint.otck"), read(b / "checkpoint.otck"));
    const auto la = log_without_wallclock(a / "train_log.jsonl");
    EXPECT_EQ(la.size(), 2u);
    EXPECT_EQ(la, log_without_wallclock(b / "train_log.jsonl"));
}

TEST(Cli, TrainOverridesApply) {
    const auto dir = testutil::temp_dir();
    const auto r = run_cli({"train", "--config", kGolden + "config.json", "--epochs", "1", "--seed", "9", "--lr",
                            "0.002", "--gamma", "0.5", "--batch-size", "2", "--out-dir", dir.string()});
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    const auto ck = load_checkpoint((dir / "final.otck").string());
    EXPECT_EQ(ck.config.seed, 9u);
    EXPECT_EQ(ck.config.learning_rate, 0.002);
    EXPECT_EQ(ck.config.gamma, 0.5);
    EXPECT_EQ(ck.config.batch_size, 2u);
    EXPECT_EQ(ck.epoch, 1u);
}

TEST(Cli, TrainRejectsInvalidOverride) {
    const auto dir = testutil::temp_dir();
    EXPECT_EQ(run_cli({"train", "--config", kGolden + "config.json", "--lr", "-1", "--out-dir", dir.string()}).code,
              cli::kValidation);
    EXPECT_EQ(run_cli({"train", "--config", (dir / "none.json").string()}).code, cli::kValidation);
    testutil::write_text(dir / "bad.json", "[1, 2]");
    EXPECT_EQ(run_cli({"train", "--config", (dir / "bad.json").string()}).code, cli::kValidation);
}

TEST(Cli, GradcheckPasses) {
    const auto r = run_cli({"gradcheck", "--seed", "4"});
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    const auto j = nlohmann::json::parse(r.out);
    EXPECT_TRUE(j["passed"].get<bool>());
    EXPECT_LE(j["max_rel_error"].get<double>(), 1e-4);
    EXPECT_EQ(j["seed"], 4);
}

TEST(Cli, SynthThenBuildFreq) {
    const auto dir = testutil::temp_dir();
    ASSERT_EQ(run_cli({"synth", "--out-dir", dir.string(), "--train-questions", "5", "--dev-questions", "2",
                       "--candidates", "3", "--dim", "4", "--seed", "1"})
                  .code,
              cli::kOk);
    for (const auto* f : {"train.jsonl", "dev.jsonl", "embeddings.otrk", "embeddings.otrk.json", "config.json"}) {
        EXPECT_TRUE(fs::exists(dir / f)) << f;
    }
    EXPECT_EQ(load_corpus((dir / "train.jsonl").string(), Split::train).instances.size(), 5u);
    const auto r = run_cli({"build-freq", "--train", (dir / "train.jsonl").string(), "--out", (dir / "f.json").string()});
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    const auto j = nlohmann::json::parse(read(dir / "f.json"));
    EXPECT_EQ(j["num_questions"], 5);
}

TEST(Cli, BuildFreqRejectsMissingOutputDirectory) {
    const auto dir = testutil::temp_dir();
    EXPECT_EQ(run_cli({"build-freq", "--train", kGolden + "train.jsonl", "--out", (dir / "no/such/f.json").string()})
                  .code,
              cli::kValidation);
}

TEST(Cli, AlignUnknownIdsAreValidationErrors) {
    const std::vector<std::string> base = {"align", "--checkpoint", kGolden + "model.otck", "--split",
                                           kGolden + "dev.jsonl", "--embeddings", kGolden + "embeddings.otrk"};
    auto q = base;
    q.insert(q.end(), {"--question-id", "nope", "--window-id", "c1"});
    EXPECT_EQ(run_cli(q).code, cli::kValidation);
    auto w = base;
    w.insert(w.end(), {"--question-id", "dev-q0", "--window-id", "nope"});
    const auto r = run_cli(w);
    EXPECT_EQ(r.code, cli::kValidation);
    EXPECT_NE(r.err.find("nope"), std::string::npos);
}
