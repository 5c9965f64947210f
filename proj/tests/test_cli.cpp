#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include <unistd.h>

#include "cli.hpp"

namespace stag::cli {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::vector<char> b;
  EXPECT_TRUE(binio::read_file(p, b)) << p;
  return {b.begin(), b.end()};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("stag_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(std::vector<std::string> args) {
    out_.str("");
    err_.str("");
    return run_cli(std::move(args), out_, err_);
  }

  // small order-task dataset shared by the training tests
  fs::path synth(const fs::path& where) {
    EXPECT_EQ(run({"synth", "--task", "order", "--seed", "7", "--videos-per-class", "10", "--frames", "60", "--out",
                   where.string()}),
              kOk)
        << err_.str();
    return where / "manifest.tsv";
  }

  std::vector<std::string> small_train(const fs::path& manifest, const fs::path& out, const std::string& pipeline) {
    return {"train", "-m", manifest.string(), "--pipeline", pipeline, "--grid-dim", "16", "--hidden-dim", "4",
            "--video-dim", "32", "--clusters", "2", "--iters", "40", "--eval-every", "20", "--batch-size", "8",
            "--out", out.string()};
  }

  fs::path dir_;
  std::ostringstream out_, err_;
};

TEST_F(Cli, SynthWritesManifestFeaturesAndSnapshot) {
  const auto manifest = synth(dir_ / "a");
  EXPECT_TRUE(fs::exists(manifest));
  EXPECT_TRUE(fs::exists(dir_ / "a" / "synth_config.json"));
  EXPECT_NE(out_.str().find("train: 96"), std::string::npos) << out_.str();
  EXPECT_EQ(load_manifest(manifest).entries.size(), 120u);
  const auto snap = nlohmann::json::parse(slurp(dir_ / "a" / "synth_config.json"));
  EXPECT_EQ(snap["command"], "synth");
  EXPECT_EQ(snap["spec"]["frames"], 60);
}

TEST_F(Cli, SynthIsByteIdenticalAcrossRuns) {
  synth(dir_ / "a");
  synth(dir_ / "b");
  for (const auto& e : fs::recursive_directory_iterator(dir_ / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir_ / "a");
    EXPECT_EQ(slurp(e.path()), slurp(dir_ / "b" / rel)) << rel;
  }
}

TEST_F(Cli, SynthTooShortNamesConstraint) {
  EXPECT_EQ(run({"synth", "--frames", "10", "--out", (dir_ / "x").string()}), kData);
  EXPECT_NE(err_.str().find("VideoTooShort"), std::string::npos) << err_.str();
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run({}), kUsage);
  EXPECT_EQ(run({"frobnicate"}), kUsage);
  EXPECT_EQ(run({"train"}), kUsage);  // --manifest is required
  EXPECT_EQ(run({"synth", "--task", "nope"}), kUsage);
  const auto manifest = synth(dir_ / "d");
  EXPECT_EQ(run({"train", "-m", manifest.string(), "--pipeline", "cbp+cbp", "--out", (dir_ / "o").string()}), kUsage);
  EXPECT_EQ(run({"--help"}), kOk);
  EXPECT_NE(out_.str().find("gradcheck"), std::string::npos);
}

TEST_F(Cli, TrainWritesSixOfEachAndEvaluates) {
  const auto manifest = synth(dir_ / "d");
  ASSERT_EQ(run(small_train(manifest, dir_ / "o", "cbp+rnn+cbp")), kOk) << err_.str();
  std::size_t aggregators = 0, svms = 0, csvs = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "o" / "models")) {
    const std::string n = e.path().filename().string();
    aggregators += n.ends_with(".aggregator.stag");
    svms += n.ends_with(".svm.stag");
    csvs += n.ends_with(".train.csv");
  }
  EXPECT_EQ(aggregators, 6u);
  EXPECT_EQ(svms, 6u);
  EXPECT_EQ(csvs, 6u);
  EXPECT_TRUE(fs::exists(dir_ / "o" / "train_config.json"));
  const std::string records = slurp(dir_ / "o" / "models" / "anger.train.csv");
  EXPECT_EQ(records.substr(0, records.find('\n')), "iter,train_loss,val_loss,lr");
  EXPECT_GT(std::count(records.begin(), records.end(), '\n'), 1);

  ASSERT_EQ(run({"evaluate", "-m", manifest.string(), "--split", "val", "--out", (dir_ / "o").string()}), kOk)
      << err_.str();
  for (const char* row : {"Anger", "Sadness", "Average"}) EXPECT_NE(out_.str().find(row), std::string::npos) << row;
  const std::string csv = slurp(dir_ / "o" / "report_val.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "emotion,accuracy");
  EXPECT_NE(csv.find("\naverage,"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_ / "o" / "predictions_val.csv"));

  ASSERT_EQ(run({"embed", "-m", manifest.string(), "--split", "test", "--out", (dir_ / "o").string()}), kOk);
  const std::string emb = slurp(dir_ / "o" / "embeddings_test.csv");
  EXPECT_EQ(std::count(emb.begin(), emb.end(), '\n'), 1 + 12);
}

TEST_F(Cli, PoolingOnlyPipelineSkipsAdam) {
  const auto manifest = synth(dir_ / "d");
  ASSERT_EQ(run(small_train(manifest, dir_ / "o", "cbp")), kOk) << err_.str();
  EXPECT_NE(out_.str().find("no trainable aggregator"), std::string::npos);
  for (Emotion e : kAllEmotions) {
    EXPECT_EQ(slurp(records_path(dir_ / "o" / "models", e)), "iter,train_loss,val_loss,lr\n");
    const auto m = load_model(aggregator_path(dir_ / "o" / "models", e));
    EXPECT_FALSE(m.rnn.has_value());
    EXPECT_FALSE(m.netvlad.has_value());
  }
  EXPECT_NE(out_.str().find("anger: 0 iterations"), std::string::npos) << out_.str();
}

TEST_F(Cli, FixedSeedGivesIdenticalModelsAndReports) {
  const auto manifest = synth(dir_ / "d");
  for (const char* o : {"o1", "o2"}) {
    ASSERT_EQ(run(small_train(manifest, dir_ / o, "cbp+rnn+netvlad")), kOk) << err_.str();
    ASSERT_EQ(run({"evaluate", "-m", manifest.string(), "--split", "test", "--out", (dir_ / o).string()}), kOk);
  }
  // config snapshots record the (differing) output paths
  for (const auto& e : fs::recursive_directory_iterator(dir_ / "o1")) {
    if (!e.is_regular_file() || e.path().string().ends_with("_config.json")) continue;
    const auto rel = fs::relative(e.path(), dir_ / "o1");
    EXPECT_EQ(slurp(e.path()), slurp(dir_ / "o2" / rel)) << rel;
  }
}

TEST_F(Cli, EvaluateWithMissingModelFails) {
  const auto manifest = synth(dir_ / "d");
  ASSERT_EQ(run(small_train(manifest, dir_ / "o", "cbp")), kOk);
  fs::remove(svm_path(dir_ / "o" / "models", Emotion::disgust));
  EXPECT_EQ(run({"evaluate", "-m", manifest.string(), "--out", (dir_ / "o").string()}), kData);
  EXPECT_NE(err_.str().find("disgust.svm.stag"), std::string::npos) << err_.str();
}

TEST_F(Cli, OutputDirectoryFromEnvironment) {
  ::setenv(kOutDirEnv, (dir_ / "env").c_str(), 1);
  EXPECT_EQ(run({"synth", "--videos-per-class", "2", "--frames", "24"}), kOk) << err_.str();
  ::unsetenv(kOutDirEnv);
  EXPECT_TRUE(fs::exists(dir_ / "env" / "manifest.tsv"));
}

TEST_F(Cli, GradcheckReportsEveryComponent) {
  ASSERT_EQ(run({"gradcheck"}), kOk) << err_.str();
  for (const auto& name : gradient_components()) EXPECT_NE(out_.str().find(name), std::string::npos) << name;
  EXPECT_NE(out_.str().find("max rel error"), std::string::npos);
}

TEST_F(Cli, GradcheckCorruptedGradientNamesTheOp) {
  EXPECT_EQ(run({"gradcheck", "--instances", "2", "--corrupt-gradient", "rnn_vanilla"}), kNumerical);
  EXPECT_NE(err_.str().find("rnn_vanilla"), std::string::npos) << err_.str();
  EXPECT_EQ(err_.str().find("netvlad"), std::string::npos);
}

TEST_F(Cli, AblateEmitsOneRowPerPipeline) {
  const auto manifest = synth(dir_ / "d");
  ASSERT_EQ(run({"ablate", "-m", manifest.string(), "--pipelines", "cbp", "rnn+cbp", "cbp+rnn+netvlad", "--grid-dim",
                 "16", "--hidden-dim", "4", "--video-dim", "32", "--clusters", "2", "--iters", "20", "--eval-every",
                 "10", "--batch-size", "8", "--split", "test", "--out", (dir_ / "o").string()}),
            kOk)
      << err_.str();
  const std::string csv = slurp(dir_ / "o" / "ablation.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "pipeline,anger,happiness,surprise,disgust,contentment,sadness,average");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_NE(csv.find("\nrnn+cbp,"), std::string::npos);
  EXPECT_NE(out_.str().find("cbp+rnn+netvlad"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_ / "o" / "ablate_config.json"));
}

}  // namespace
}  // namespace stag::cli
