#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "test_util.hpp"

using namespace mivqa;
using mivqa::testing::quick_run;
using mivqa::testing::TempDir;
using mivqa::testing::write_synthetic_manifest;
namespace fs = std::filesystem;

namespace {

std::vector<PreparedSample> prepared(const Manifest& m, int answers) {
  std::vector<PreparedSample> out;
  for (const auto& r : m.samples) {
    PreparedSample p;
    p.answer_index = std::min(m.answer_index(r.answer), answers - 1);
    p.gt_index = r.gt_index;
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

TEST(Train, TwoEpochsWriteTwoRecordsWithDecreasingLambda) {
  TempDir dir("mivqa_harness_two");
  const auto manifest = write_synthetic_manifest(dir.path, 20, 1);
  const RunConfig run = quick_run(manifest, dir.path, 2);
  const TrainResult r = train(run);
  const auto records = read_metrics_file(run.paths.metrics_file);
  ASSERT_EQ(records.size(), 2u);
  EXPECT_EQ(records[0].epoch, 0);
  EXPECT_EQ(records[1].epoch, 1);
  EXPECT_GT(records[0].lambda, records[1].lambda);
  for (const auto& m : records) {
    EXPECT_EQ(m.lambda, std::max(run.loss.lambda_min, run.loss.lambda0 * std::pow(run.loss.gamma, m.epoch)));
    EXPECT_EQ(m.count, 20u);
    EXPECT_GE(m.word_accuracy, 0.0);
    EXPECT_LE(m.word_accuracy, 1.0);
  }
  EXPECT_TRUE(fs::exists(r.last_checkpoint));
  EXPECT_TRUE(fs::exists(r.best_checkpoint));
  EXPECT_TRUE(fs::exists(sidecar_path(r.last_checkpoint)));
}

TEST(Train, SameConfigGivesIdenticalRecords) {
  TempDir dir("mivqa_harness_det");
  const auto manifest = write_synthetic_manifest(dir.path, 16, 2);
  const auto a = train(quick_run(manifest, dir.path / "a", 2)).history;
  const auto b = train(quick_run(manifest, dir.path / "b", 2)).history;
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].epoch, b[i].epoch);
    EXPECT_EQ(a[i].lambda, b[i].lambda);
    EXPECT_EQ(a[i].mean_loss, b[i].mean_loss);
    EXPECT_EQ(a[i].word_accuracy, b[i].word_accuracy);
    EXPECT_EQ(a[i].image_accuracy, b[i].image_accuracy);
  }
}

TEST(Train, HookCanStopEarly) {
  TempDir dir("mivqa_harness_stop");
  const auto manifest = write_synthetic_manifest(dir.path, 8, 3);
  TrainHooks hooks;
  hooks.on_epoch = [](const Metrics& m) { return m.epoch < 1; };
  EXPECT_EQ(train(quick_run(manifest, dir.path, 5), hooks).history.size(), 2u);
}

TEST(Train, InvalidConfigIsRejected) {
  RunConfig r;
  r.optimizer.epochs = 0;
  try {
    train(r);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ConfigInvalid);
  }
}

TEST(Evaluate, OracleScoresPerfectly) {
  Manifest m;
  m.answer_vocab = {"red", "blue", "<unk>"};
  for (int i = 0; i < 40; ++i) {
    SampleRecord r;
    r.answer = i % 3 == 0 ? "red" : "blue";
    r.gt_index = i % 4;
    m.samples.push_back(r);
  }
  const auto samples = prepared(m, 3);
  const auto oracle = [](const PreparedSample& s) {
    std::vector<double> p(4, 0.0), q(3, 0.0);
    p[static_cast<std::size_t>(s.gt_index)] = 1.0;
    q[static_cast<std::size_t>(s.answer_index)] = 1.0;
    return std::pair{p, q};
  };
  const Metrics metrics = evaluate(std::span<const PreparedSample>(samples), oracle);
  EXPECT_EQ(metrics.word_accuracy, 1.0);
  EXPECT_EQ(metrics.image_accuracy, 1.0);
  EXPECT_EQ(metrics.mean_loss, 0.0);
  EXPECT_EQ(metrics.count, 40u);
}

TEST(Evaluate, UniformPredictorPicksIndexZero) {
  Manifest m;
  m.answer_vocab = {"a", "<unk>"};
  for (int i = 0; i < 8; ++i) {
    SampleRecord r;
    r.answer = "a";
    r.gt_index = i % 4;
    m.samples.push_back(r);
  }
  const auto samples = prepared(m, 2);
  const auto uniform = [](const PreparedSample&) {
    return std::pair{std::vector<double>(4, 0.25), std::vector<double>(2, 0.5)};
  };
  const Metrics metrics = evaluate(std::span<const PreparedSample>(samples), uniform);
  EXPECT_EQ(metrics.image_accuracy, 0.25);
  EXPECT_EQ(metrics.word_accuracy, 1.0);
}

TEST(Evaluate, UntrainedModelIsAtChanceOnImages) {
  TempDir dir("mivqa_harness_chance");
  const auto manifest_path = write_synthetic_manifest(dir.path, 600, 4);
  const Manifest m = read_manifest(manifest_path);
  std::vector<std::string> questions;
  for (const auto& s : m.samples) questions.push_back(s.question);
  ModelConfig cfg = ModelConfig::desk();
  VqaModel<double> model(cfg, WordTokenizer::fit(questions), m.answer_vocab, 9);
  const auto samples = prepare_samples(m, model);
  const Metrics metrics = evaluate(model, std::span<const PreparedSample>(samples));
  const double n = static_cast<double>(samples.size());
  const double sigma = std::sqrt(0.25 * 0.75 / n);
  EXPECT_NEAR(metrics.image_accuracy, 0.25, 4 * sigma);
}

TEST(Checkpoint, RoundTripReproducesPredictions) {
  TempDir dir("mivqa_harness_ckpt");
  const auto manifest = write_synthetic_manifest(dir.path, 12, 5);
  const RunConfig run = quick_run(manifest, dir.path, 1);
  const TrainResult r = train(run);
  const Metrics direct = evaluate<double>(r.last_checkpoint, manifest);
  EXPECT_EQ(direct.word_accuracy, r.history.back().word_accuracy);
  EXPECT_EQ(direct.image_accuracy, r.history.back().image_accuracy);

  const CheckpointInfo info = read_checkpoint_info(r.last_checkpoint);
  EXPECT_EQ(info.epoch, 0);
  EXPECT_EQ(info.config.images, 4);

  Manifest other = read_manifest(manifest);
  other.answer_vocab.insert(other.answer_vocab.begin(), "zebra");
  write_manifest(other, dir.path / "other.jsonl");
  try {
    evaluate<double>(r.last_checkpoint, dir.path / "other.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::VocabMismatch);
  }
}

TEST(RunConfig, LoadsJsonWithRelativePaths) {
  TempDir dir("mivqa_harness_cfg");
  std::ofstream(dir.path / "run.json") << R"({"dim": 32, "heads": 4, "epochs": 3, "learning_rate": 0.002,
    "loss_mode": "word_only", "train_manifest": "data/train.jsonl", "checkpoint_dir": "ck"})";
  const RunConfig r = load_run_config(dir.path / "run.json");
  EXPECT_EQ(r.model.dim, 32);
  EXPECT_EQ(r.optimizer.epochs, 3);
  EXPECT_EQ(r.loss.mode, LossMode::WordOnly);
  EXPECT_EQ(fs::path(r.paths.train_manifest), dir.path / "data/train.jsonl");
  EXPECT_EQ(fs::path(r.paths.checkpoint_dir), dir.path / "ck");

  std::ofstream(dir.path / "bad.json") << R"({"loss_mode": "sometimes"})";
  EXPECT_THROW(load_run_config(dir.path / "bad.json"), Error);
  std::ofstream(dir.path / "bad2.json") << R"({"batch_size": 0})";
  EXPECT_THROW(load_run_config(dir.path / "bad2.json"), Error);
}
