#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mivqa/autodiff.hpp"
#include "mivqa/config.hpp"
#include "mivqa/encoders.hpp"
#include "mivqa/fusion.hpp"
#include "mivqa/params.hpp"
#include "mivqa/tokenizer.hpp"

namespace mivqa {

/// Index of the largest entry; ties go to the lowest index.
template <typename R>
int argmax(const R& values) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(std::size(values)); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

/// Frozen stand-ins for the trainable encoders. Any may be null.
struct EncoderPlugins {
  std::shared_ptr<const ImageBackbonePlugin> backbone;
  std::shared_ptr<const ImageBackbonePlugin> regions;
  std::shared_ptr<const SequencePlugin> sequence;
};

struct Prediction {
  std::string answer;
  int answer_index = 0;
  int image_index = 0;
  std::vector<double> image_probs;
  std::vector<double> answer_probs;
};

/// Multi-image VQA network: encoders, cross-attention fusion, image scoring,
/// weighted fusion and the stacked-attention answer head.
template <typename T>
class VqaModel {
 public:
  struct Forward {
    ImageFeatures images;
    QuestionFeatures question;
    ImageFeatures context;
    ImageDistribution image_dist;
    FusedImage fused;
    AnswerDistribution answer_dist;
  };

  VqaModel(ModelConfig cfg, WordTokenizer tokenizer, std::vector<std::string> answers, std::uint64_t seed,
           EncoderPlugins plugins = {})
      : cfg_(std::move(cfg)), tokenizer_(std::move(tokenizer)), answers_(std::move(answers)), plugins_(std::move(plugins)) {
    cfg_.token_vocab = tokenizer_.vocab_size();
    cfg_.answers = static_cast<int>(answers_.size());
    cfg_.validate();
    require(cfg_.region_proposals == 0 || plugins_.regions != nullptr, Errc::ConfigInvalid,
            "region_proposals > 0 needs a region feature provider");
    Rng rng(seed, 0x1a17);
    backbone_ = ConvBackbone::create(params_, cfg_, rng);
    if (cfg_.region_proposals > 0) region_proj_ = Linear::create(params_, "regions.proj", cfg_.region_dim, cfg_.dim, rng);
    question_ = LstmEncoder::create(params_, cfg_, rng);
    for (int l = 0; l < cfg_.fusion_layers; ++l)
      fusion_.push_back(CrossAttentionLayer::create(params_, "fusion.layer" + std::to_string(l), cfg_.dim, rng));
    head_ = AnswerHead::create(params_, cfg_, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const WordTokenizer& tokenizer() const { return tokenizer_; }
  const std::vector<std::string>& answers() const { return answers_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  const AnswerHead& answer_head_layers() const { return head_; }
  const std::vector<CrossAttentionLayer>& fusion_layers() const { return fusion_; }

  TokenSeq tokenize(std::string_view question) const {
    return mivqa::tokenize(question, cfg_.max_question_len, tokenizer_);
  }

  /// Grid features, followed by projected region features when enabled.
  ImageFeatures encode_images(ag::Graph<T>& g, std::span<const Image> images) {
    ImageFeatures grid = plugins_.backbone ? mivqa::encode_images(g, *plugins_.backbone, images, cfg_)
                                           : mivqa::encode_images(g, params_, backbone_, images, cfg_);
    if (cfg_.region_proposals == 0) return grid;
    const ImageFeatures regions = mivqa::encode_images(g, *plugins_.regions, images, cfg_.region_proposals, cfg_.region_dim);
    return concat_region_features(g, params_, grid, regions, region_proj_);
  }

  QuestionFeatures encode_question(ag::Graph<T>& g, const TokenSeq& tokens) {
    return plugins_.sequence ? mivqa::encode_question(g, *plugins_.sequence, tokens, cfg_)
                             : mivqa::encode_question(g, params_, question_, tokens, cfg_);
  }

  /// Full pipeline. `forced_image_dist`, when given, replaces the predicted
  /// image distribution in the fusion step.
  Forward forward(ag::Graph<T>& g, std::span<const Image> images, const TokenSeq& tokens,
                  const std::vector<T>* forced_image_dist = nullptr) {
    Forward f;
    f.images = encode_images(g, images);
    f.question = encode_question(g, tokens);
    f.context = cross_attend(g, params_, fusion_, f.images, f.question, cfg_);
    f.image_dist = score_images(g, f.context, f.question);
    ImageDistribution used = f.image_dist;
    if (forced_image_dist) {
      require(forced_image_dist->size() == images.size(), Errc::ShapeMismatch, "forced distribution length");
      used.p = g.constant({static_cast<int>(images.size())}, *forced_image_dist);
    }
    f.fused = fuse_images(g, f.images, used);
    f.answer_dist = mivqa::answer_head(g, params_, head_, f.fused, f.question, cfg_);
    return f;
  }

  /// Answer distribution from a single image, bypassing image selection.
  std::vector<T> answer_single(const Image& image, const TokenSeq& tokens) {
    ag::Graph<T> g(false);
    const Image one[] = {image};
    const ImageFeatures feats = encode_images(g, one);
    const QuestionFeatures q = encode_question(g, tokens);
    const FusedImage fused{ag::reshape(g, feats.values, {feats.rows, feats.dim}), feats.rows, feats.dim};
    return g.take(mivqa::answer_head(g, params_, head_, fused, q, cfg_).q);
  }

  /// (image distribution, answer distribution) without recording gradients.
  std::pair<std::vector<T>, std::vector<T>> distributions(std::span<const Image> images, const TokenSeq& tokens) {
    ag::Graph<T> g(false);
    const Forward f = forward(g, images, tokens);
    return {g.take(f.image_dist.p), g.take(f.answer_dist.q)};
  }

  Prediction predict(std::span<const Image> images, std::string_view question) {
    require(!images.empty(), Errc::MissingImage, "no candidate images");
    std::vector<Image> sized;
    for (const auto& im : images) sized.push_back(resize_nearest(im, cfg_.image_size, cfg_.image_size));
    const auto [p, q] = distributions(sized, tokenize(question));
    Prediction out;
    out.image_probs.assign(p.begin(), p.end());
    out.answer_probs.assign(q.begin(), q.end());
    out.image_index = argmax(p);
    out.answer_index = argmax(q);
    out.answer = answers_[static_cast<std::size_t>(out.answer_index)];
    return out;
  }

 private:
  ModelConfig cfg_;
  WordTokenizer tokenizer_;
  std::vector<std::string> answers_;
  EncoderPlugins plugins_;
  ParameterSet<T> params_;
  ConvBackbone backbone_;
  Linear region_proj_;
  LstmEncoder question_;
  std::vector<CrossAttentionLayer> fusion_;
  AnswerHead head_;
};

// ---------------------------------------------------------------------------
// checkpoints: <stem>.bin (parameters) + <stem>.json (sidecar)

inline constexpr int kCheckpointVersion = 1;

struct CheckpointInfo {
  ModelConfig config;
  std::vector<std::string> answer_vocab;
  std::vector<std::string> tokenizer_vocab;
  int epoch = -1;
  nlohmann::json metrics = nlohmann::json::object();
};

inline std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  return p.replace_extension(".json");
}

template <typename T>
void save_checkpoint(const VqaModel<T>& model, const std::filesystem::path& path, int epoch,
                     const nlohmann::json& metrics = nlohmann::json::object()) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  model.params().save(path.string());
  nlohmann::ordered_json j;
  j["version"] = kCheckpointVersion;
  j["config"] = to_json(model.config());
  j["answer_vocab"] = model.answers();
  j["tokenizer_vocab"] = model.tokenizer().words();
  j["epoch"] = epoch;
  j["metrics"] = metrics;
  std::ofstream out(sidecar_path(path), std::ios::binary);
  require(static_cast<bool>(out), Errc::Io, "cannot write " + sidecar_path(path).string());
  out << j.dump(2) << "\n";
}

inline CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  std::ifstream in(sidecar_path(path));
  require(static_cast<bool>(in), Errc::Io, "cannot read checkpoint sidecar " + sidecar_path(path).string());
  CheckpointInfo info;
  try {
    nlohmann::json j;
    in >> j;
    require(j.at("version").get<int>() == kCheckpointVersion, Errc::ConfigInvalid, "unsupported checkpoint version");
    from_json_flat(j.at("config"), info.config);
    info.answer_vocab = j.at("answer_vocab").get<std::vector<std::string>>();
    info.tokenizer_vocab = j.at("tokenizer_vocab").get<std::vector<std::string>>();
    info.epoch = j.value("epoch", -1);
    info.metrics = j.value("metrics", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ConfigInvalid, sidecar_path(path).string() + ": " + e.what());
  }
  return info;
}

template <typename T>
VqaModel<T> load_checkpoint(const std::filesystem::path& path, EncoderPlugins plugins = {}) {
  const CheckpointInfo info = read_checkpoint_info(path);
  VqaModel<T> model(info.config, WordTokenizer(info.tokenizer_vocab), info.answer_vocab, 0, std::move(plugins));
  model.params().load(path.string());
  return model;
}

}  // namespace mivqa
