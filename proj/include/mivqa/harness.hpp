#pragma once

// Training, evaluation and metrics bookkeeping.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mivqa/config.hpp"
#include "mivqa/dataset.hpp"
#include "mivqa/error.hpp"
#include "mivqa/losses.hpp"
#include "mivqa/model.hpp"
#include "mivqa/params.hpp"
#include "mivqa/rng.hpp"

namespace mivqa {

struct Metrics {
  int epoch = 0;
  double lambda = 0.0;
  double mean_loss = 0.0;
  double word_accuracy = 0.0;
  double image_accuracy = 0.0;
  double wall_seconds = 0.0;
  std::size_t count = 0;
};

inline nlohmann::ordered_json to_json(const Metrics& m) {
  return {{"epoch", m.epoch},
          {"lambda", m.lambda},
          {"mean_loss", m.mean_loss},
          {"word_accuracy", m.word_accuracy},
          {"image_accuracy", m.image_accuracy},
          {"wall_seconds", m.wall_seconds},
          {"count", m.count}};
}

inline Metrics metrics_from_json(const nlohmann::json& j) {
  Metrics m;
  m.epoch = j.at("epoch").get<int>();
  m.lambda = j.at("lambda").get<double>();
  m.mean_loss = j.at("mean_loss").get<double>();
  m.word_accuracy = j.at("word_accuracy").get<double>();
  m.image_accuracy = j.at("image_accuracy").get<double>();
  m.wall_seconds = j.value("wall_seconds", 0.0);
  m.count = j.value("count", std::size_t{0});
  return m;
}

inline std::vector<Metrics> read_metrics_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::Io, "cannot read " + path.string());
  std::vector<Metrics> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(metrics_from_json(nlohmann::json::parse(line)));
  return out;
}

/// A decoded sample ready for the model.
struct PreparedSample {
  std::vector<Image> images;
  TokenSeq tokens;
  int answer_index = 0;
  int gt_index = 0;
};

inline int answer_index_in(const std::vector<std::string>& vocab, const std::string& answer) {
  auto it = std::find(vocab.begin(), vocab.end(), answer);
  if (it == vocab.end()) it = std::find(vocab.begin(), vocab.end(), kUnknownAnswer);
  require(it != vocab.end(), Errc::VocabMismatch, "answer vocabulary lacks <unk>");
  return static_cast<int>(it - vocab.begin());
}

/// Decodes every sample of `m`, mapping answers through `answer_vocab`.
template <typename T>
std::vector<PreparedSample> prepare_samples(const Manifest& m, const VqaModel<T>& model) {
  std::vector<PreparedSample> out;
  out.reserve(m.count());
  for (std::size_t i = 0; i < m.count(); ++i) {
    LoadedSample s = load_sample(m, i, model.config().image_size);
    PreparedSample p;
    p.images = std::move(s.images);
    p.tokens = model.tokenize(s.question);
    p.answer_index = answer_index_in(model.answers(), m.samples[i].answer);
    p.gt_index = s.gt_index;
    out.push_back(std::move(p));
  }
  return out;
}

/// Accuracy of `predict(sample) -> (image probs, answer probs)` over all
/// samples; argmax ties resolve to the lowest index. `lambda` weights the
/// image term of the reported mean loss.
template <typename Predict>
Metrics evaluate(std::span<const PreparedSample> samples, Predict&& predict, double lambda = 0.0) {
  Metrics m;
  m.count = samples.size();
  m.lambda = lambda;
  if (samples.empty()) return m;
  std::size_t word = 0, image = 0;
  double loss = 0.0;
  for (const auto& s : samples) {
    const auto [p, q] = predict(s);
    word += argmax(q) == s.answer_index;
    image += argmax(p) == s.gt_index;
    using V = std::decay_t<decltype(p[0])>;
    loss += static_cast<double>(combined_loss<V>(q, p, s.answer_index, s.gt_index, lambda));
  }
  m.word_accuracy = static_cast<double>(word) / static_cast<double>(samples.size());
  m.image_accuracy = static_cast<double>(image) / static_cast<double>(samples.size());
  m.mean_loss = loss / static_cast<double>(samples.size());
  return m;
}

template <typename T>
Metrics evaluate(VqaModel<T>& model, std::span<const PreparedSample> samples, double lambda = 0.0) {
  return evaluate(
      samples, [&](const PreparedSample& s) { return model.distributions(s.images, s.tokens); }, lambda);
}

/// Loads a checkpoint and evaluates it on a manifest.
template <typename T = double>
Metrics evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest_path,
                 EncoderPlugins plugins = {}) {
  VqaModel<T> model = load_checkpoint<T>(checkpoint, std::move(plugins));
  const Manifest m = read_manifest(manifest_path);
  require(m.answer_vocab == model.answers(), Errc::VocabMismatch,
          "manifest answer vocabulary differs from the checkpoint's");
  const auto samples = prepare_samples(m, model);
  return evaluate(model, std::span<const PreparedSample>(samples));
}

struct TrainResult {
  std::vector<Metrics> history;
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;
  int best_epoch = -1;
};

struct TrainHooks {
  /// Called after each epoch's metrics are recorded; return false to stop.
  std::function<bool(const Metrics&)> on_epoch;
  EncoderPlugins plugins;
};

/// Mean batch loss after backward; gradients accumulate in the model.
template <typename T>
double accumulate_batch(VqaModel<T>& model, std::span<const PreparedSample> data, std::span<const std::size_t> batch,
                        double lambda) {
  double total = 0.0;
  for (std::size_t idx : batch) {
    const PreparedSample& s = data[idx];
    ag::Graph<T> g;
    const auto f = model.forward(g, s.images, s.tokens);
    const ag::Var loss = combined_loss(g, f.answer_dist.q, f.image_dist.p, s.answer_index, s.gt_index, lambda);
    total += static_cast<double>(g.scalar(loss));
    g.backward(loss);
  }
  return total / static_cast<double>(batch.size());
}

/// Minibatch training with the annealed composite loss. Writes the metrics
/// file and checkpoints (last.bin every epoch, best.bin on improved word
/// accuracy) under the run's paths.
template <typename T = double>
TrainResult train(const RunConfig& run, const TrainHooks& hooks = {}) {
  run.validate();
  require(!run.paths.train_manifest.empty(), Errc::ConfigInvalid, "train_manifest is required");
  const Manifest train_m = read_manifest(run.paths.train_manifest);
  const bool same_split = run.paths.val_manifest.empty() || run.paths.val_manifest == run.paths.train_manifest;
  const Manifest val_m = same_split ? train_m : read_manifest(run.paths.val_manifest);
  std::vector<std::string> answers = train_m.answer_vocab;
  if (run.max_answers > 0) answers = build_answer_vocab(train_m.samples, static_cast<std::size_t>(run.max_answers));

  std::vector<std::string> questions;
  for (const auto& s : train_m.samples) questions.push_back(s.question);
  ModelConfig cfg = run.model;
  cfg.images = train_m.k + 1;
  VqaModel<T> model(cfg, WordTokenizer::fit(questions), answers, run.seed, hooks.plugins);

  const auto train_data = prepare_samples(train_m, model);
  const auto val_data = same_split ? train_data : prepare_samples(val_m, model);

  namespace fs = std::filesystem;
  const fs::path ckpt_dir = run.paths.checkpoint_dir;
  fs::create_directories(ckpt_dir);
  if (fs::path(run.paths.metrics_file).has_parent_path()) fs::create_directories(fs::path(run.paths.metrics_file).parent_path());
  std::ofstream metrics_out(run.paths.metrics_file, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(metrics_out), Errc::Io, "cannot write " + run.paths.metrics_file);

  Adam<T> opt(model.params(), {.learning_rate = run.optimizer.learning_rate});
  Rng shuffle_rng(run.seed, 0x5f1e);
  std::vector<std::size_t> order(train_data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  result.last_checkpoint = ckpt_dir / "last.bin";
  result.best_checkpoint = ckpt_dir / "best.bin";
  double best_word = -1.0;
  const auto bs = static_cast<std::size_t>(run.optimizer.batch_size);
  for (int epoch = 0; epoch < run.optimizer.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lambda = anneal_lambda(epoch, run.loss);
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::span<const std::size_t> batch(order.data() + start, std::min(bs, order.size() - start));
      model.params().zero_grad();
      const double batch_loss = accumulate_batch(model, std::span<const PreparedSample>(train_data), batch, lambda);
      if (!std::isfinite(batch_loss)) {
        fail(Errc::Diverged, "non-finite loss at epoch " + std::to_string(epoch) + "; last good checkpoint: " +
                                 (epoch > 0 ? result.last_checkpoint.string() : std::string("none")));
      }
      loss_sum += batch_loss * static_cast<double>(batch.size());
      opt.step(model.params(), 1.0 / static_cast<double>(batch.size()));
    }
    Metrics m = evaluate(model, std::span<const PreparedSample>(val_data), lambda);
    m.epoch = epoch;
    m.lambda = lambda;
    m.mean_loss = loss_sum / static_cast<double>(order.size());
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    metrics_out << to_json(m).dump() << "\n";
    metrics_out.flush();
    save_checkpoint(model, result.last_checkpoint, epoch, to_json(m));
    if (m.word_accuracy > best_word) {
      best_word = m.word_accuracy;
      result.best_epoch = epoch;
      save_checkpoint(model, result.best_checkpoint, epoch, to_json(m));
    }
    result.history.push_back(m);
    if (hooks.on_epoch && !hooks.on_epoch(m)) break;
  }
  return result;
}

}  // namespace mivqa
