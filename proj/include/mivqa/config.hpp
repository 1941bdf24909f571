#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"
#include "mivqa/error.hpp"

namespace mivqa {

struct ModelConfig {
  int images = 4;           // N, candidate images per sample
  int regions = 196;        // R, grid cells per image
  int region_proposals = 0; // M, detector region features per image (0 = off)
  int region_dim = 2048;    // D_r, width of region proposal features
  int dim = 640;            // D
  int max_question_len = 30;// L
  int answers = 0;          // V, filled from the answer vocabulary
  int heads = 8;
  int fusion_layers = 2;
  int san_layers = 2;
  int token_vocab = 0;      // embedding table rows, filled from the tokenizer
  int image_size = 32;
  int conv1_channels = 8;
  int conv2_channels = 16;

  /// Small configuration used by tests and the bundled shapes dataset.
  static ModelConfig desk() {
    ModelConfig c;
    c.regions = 16;
    c.dim = 64;
    c.max_question_len = 12;
    c.heads = 4;
    return c;
  }

  void validate() const {
    auto pos = [](int v, const char* name) {
      require(v > 0, Errc::ConfigInvalid, std::string(name) + " must be positive");
    };
    pos(images, "images");
    pos(regions, "regions");
    pos(dim, "dim");
    pos(max_question_len, "max_question_len");
    pos(answers, "answers");
    pos(heads, "heads");
    pos(fusion_layers, "fusion_layers");
    pos(san_layers, "san_layers");
    pos(token_vocab, "token_vocab");
    pos(image_size, "image_size");
    pos(conv1_channels, "conv1_channels");
    pos(conv2_channels, "conv2_channels");
    require(region_proposals >= 0, Errc::ConfigInvalid, "region_proposals must be non-negative");
    require(region_proposals == 0 || region_dim > 0, Errc::ConfigInvalid, "region_dim must be positive");
    require(dim % heads == 0, Errc::ConfigInvalid, "dim must be divisible by heads");
  }
};

enum class LossMode { Combined, WordOnly, Annealed };

inline std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::Combined: return "combined";
    case LossMode::WordOnly: return "word_only";
    case LossMode::Annealed: return "annealed";
  }
  return "";
}

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "combined") return LossMode::Combined;
  if (s == "word_only") return LossMode::WordOnly;
  if (s == "annealed") return LossMode::Annealed;
  fail(Errc::ConfigInvalid, "unknown loss mode '" + s + "'");
}

struct LossConfig {
  double lambda0 = 10.0;
  double gamma = 0.7;
  double lambda_min = 0.0;
  LossMode mode = LossMode::Annealed;

  void validate() const {
    require(lambda0 >= 0.0, Errc::ConfigInvalid, "lambda0 must be non-negative");
    require(gamma > 0.0 && gamma <= 1.0, Errc::ConfigInvalid, "gamma must lie in (0, 1]");
    require(lambda_min >= 0.0 && lambda_min <= lambda0, Errc::ConfigInvalid, "lambda_min must lie in [0, lambda0]");
  }
};

struct OptimizerConfig {
  std::string name = "adam";
  double learning_rate = 1e-3;
  int batch_size = 32;
  int epochs = 10;
};

struct RunPaths {
  std::string train_manifest;
  std::string val_manifest;
  std::string checkpoint_dir = "checkpoints";
  std::string metrics_file = "metrics.jsonl";
};

struct RunConfig {
  ModelConfig model = ModelConfig::desk();
  LossConfig loss;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  RunPaths paths;
  /// Cap on the answer vocabulary drawn from the training manifest (0 = all).
  int max_answers = 0;

  void validate() const {
    loss.validate();
    require(optimizer.name == "adam", Errc::ConfigInvalid, "only the adam optimizer is available");
    require(optimizer.epochs >= 1, Errc::ConfigInvalid, "epochs must be at least 1");
    require(optimizer.batch_size >= 1, Errc::ConfigInvalid, "batch_size must be at least 1");
    require(optimizer.learning_rate > 0.0, Errc::ConfigInvalid, "learning_rate must be positive");
  }
};

// ---------------------------------------------------------------------------
// JSON: one flat object; every key optional.

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  return {{"images", c.images},
          {"regions", c.regions},
          {"region_proposals", c.region_proposals},
          {"region_dim", c.region_dim},
          {"dim", c.dim},
          {"max_question_len", c.max_question_len},
          {"answers", c.answers},
          {"heads", c.heads},
          {"fusion_layers", c.fusion_layers},
          {"san_layers", c.san_layers},
          {"token_vocab", c.token_vocab},
          {"image_size", c.image_size},
          {"conv1_channels", c.conv1_channels},
          {"conv2_channels", c.conv2_channels}};
}

namespace detail {

template <typename V>
void read_key(const nlohmann::json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ConfigInvalid, std::string("key '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline void from_json_flat(const nlohmann::json& j, ModelConfig& c) {
  detail::read_key(j, "images", c.images);
  detail::read_key(j, "regions", c.regions);
  detail::read_key(j, "region_proposals", c.region_proposals);
  detail::read_key(j, "region_dim", c.region_dim);
  detail::read_key(j, "dim", c.dim);
  detail::read_key(j, "max_question_len", c.max_question_len);
  detail::read_key(j, "answers", c.answers);
  detail::read_key(j, "heads", c.heads);
  detail::read_key(j, "fusion_layers", c.fusion_layers);
  detail::read_key(j, "san_layers", c.san_layers);
  detail::read_key(j, "token_vocab", c.token_vocab);
  detail::read_key(j, "image_size", c.image_size);
  detail::read_key(j, "conv1_channels", c.conv1_channels);
  detail::read_key(j, "conv2_channels", c.conv2_channels);
}

inline nlohmann::ordered_json to_json(const RunConfig& r) {
  nlohmann::ordered_json j = to_json(r.model);
  j["lambda0"] = r.loss.lambda0;
  j["gamma"] = r.loss.gamma;
  j["lambda_min"] = r.loss.lambda_min;
  j["loss_mode"] = to_string(r.loss.mode);
  j["optimizer"] = r.optimizer.name;
  j["learning_rate"] = r.optimizer.learning_rate;
  j["batch_size"] = r.optimizer.batch_size;
  j["epochs"] = r.optimizer.epochs;
  j["seed"] = r.seed;
  j["max_answers"] = r.max_answers;
  j["train_manifest"] = r.paths.train_manifest;
  j["val_manifest"] = r.paths.val_manifest;
  j["checkpoint_dir"] = r.paths.checkpoint_dir;
  j["metrics_file"] = r.paths.metrics_file;
  return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  require(j.is_object(), Errc::ConfigInvalid, "run config must be a JSON object");
  RunConfig r;
  from_json_flat(j, r.model);
  detail::read_key(j, "lambda0", r.loss.lambda0);
  detail::read_key(j, "gamma", r.loss.gamma);
  detail::read_key(j, "lambda_min", r.loss.lambda_min);
  std::string mode = to_string(r.loss.mode);
  detail::read_key(j, "loss_mode", mode);
  r.loss.mode = parse_loss_mode(mode);
  detail::read_key(j, "optimizer", r.optimizer.name);
  detail::read_key(j, "learning_rate", r.optimizer.learning_rate);
  detail::read_key(j, "batch_size", r.optimizer.batch_size);
  detail::read_key(j, "epochs", r.optimizer.epochs);
  detail::read_key(j, "seed", r.seed);
  detail::read_key(j, "max_answers", r.max_answers);
  detail::read_key(j, "train_manifest", r.paths.train_manifest);
  detail::read_key(j, "val_manifest", r.paths.val_manifest);
  detail::read_key(j, "checkpoint_dir", r.paths.checkpoint_dir);
  detail::read_key(j, "metrics_file", r.paths.metrics_file);
  if (r.paths.val_manifest.empty()) r.paths.val_manifest = r.paths.train_manifest;
  r.validate();
  return r;
}

/// Relative paths inside the file resolve against the file's directory.
inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::ConfigInvalid, "cannot read run config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ConfigInvalid, path.string() + ": " + e.what());
  }
  RunConfig r = run_config_from_json(j);
  const auto base = path.parent_path();
  for (std::string* p : {&r.paths.train_manifest, &r.paths.val_manifest, &r.paths.checkpoint_dir, &r.paths.metrics_file}) {
    if (!p->empty() && std::filesystem::path(*p).is_relative() && !base.empty()) *p = (base / *p).string();
  }
  return r;
}

}  // namespace mivqa
