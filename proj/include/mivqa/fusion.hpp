#pragma once

// Question/image fusion: cross-attention from image regions onto question
// tokens, a distribution over candidate images, the probability-weighted
// image, and a stacked-attention answer classifier over it.

#include <cmath>
#include <string>
#include <vector>

#include "mivqa/autodiff.hpp"
#include "mivqa/config.hpp"
#include "mivqa/encoders.hpp"
#include "mivqa/params.hpp"

namespace mivqa {

/// Simplex over the N candidate images, shape [N].
struct ImageDistribution {
  ag::Var p;
};

/// Simplex over the V answers, shape [V].
struct AnswerDistribution {
  ag::Var q;
};

/// Probability-weighted image features [R', D].
struct FusedImage {
  ag::Var values;
  int rows = 0;
  int dim = 0;
};

namespace detail {

/// Row weights averaging the real question tokens into a single row.
template <typename T>
ag::RowMix<T> masked_mean(const std::vector<char>& mask) {
  int real = 0;
  for (char m : mask) real += m != 0;
  ag::RowMix<T> mix;
  mix.rows.emplace_back();
  for (std::size_t t = 0; t < mask.size(); ++t)
    if (mask[t]) mix.rows[0].emplace_back(static_cast<int>(t), T(1) / static_cast<T>(real));
  return mix;
}

}  // namespace detail

/// One block: X <- LayerNorm(X + Attn(X Wq, Q Wk, Q Wv) Wo). Image rows are
/// the queries; question tokens supply keys and values.
struct CrossAttentionLayer {
  Linear query, key, value, output;
  ParamId norm_gain, norm_bias;

  template <typename T>
  static CrossAttentionLayer create(ParameterSet<T>& ps, const std::string& name, int dim, Rng& rng) {
    CrossAttentionLayer l;
    l.query = Linear::create(ps, name + ".query", dim, dim, rng);
    // a key bias shifts every score in a row equally, so softmax ignores it
    l.key = Linear::create(ps, name + ".key", dim, dim, rng, Init::Xavier, false);
    l.value = Linear::create(ps, name + ".value", dim, dim, rng);
    l.output = Linear::create(ps, name + ".output", dim, dim, rng);
    l.norm_gain = ps.add(name + ".norm.gain", {dim}, Init::Ones, rng);
    l.norm_bias = ps.add(name + ".norm.bias", {dim}, Init::Zeros, rng);
    return l;
  }
};

/// Contextualises every image region against the question; [N, R', D] in
/// and out. Rows never interact with each other, so each image is processed
/// independently of the others.
template <typename T>
ImageFeatures cross_attend(ag::Graph<T>& g, ParameterSet<T>& ps, const std::vector<CrossAttentionLayer>& layers,
                           const ImageFeatures& img, const QuestionFeatures& q, const ModelConfig& cfg) {
  require(img.dim == cfg.dim && q.dim == cfg.dim, Errc::ShapeMismatch,
          "feature width " + std::to_string(img.dim) + "/" + std::to_string(q.dim) + " vs model width " +
              std::to_string(cfg.dim));
  require(g.shape(img.values) == ag::Shape{img.images * img.rows, img.dim}, Errc::ShapeMismatch, "image features malformed");
  require(g.shape(q.values) == ag::Shape{q.length(), q.dim}, Errc::ShapeMismatch, "question features malformed");
  ag::Var x = img.values;
  for (const auto& layer : layers) {
    const ag::Var qs = layer.query(g, ps, x);
    const ag::Var ks = layer.key(g, ps, q.values);
    const ag::Var vs = layer.value(g, ps, q.values);
    const ag::Var att = ag::multi_head_attention(g, qs, ks, vs, q.mask, cfg.heads);
    x = ag::add(g, x, layer.output(g, ps, att));
    x = ag::layer_norm_rows(g, x, ps.use(g, layer.norm_gain), ps.use(g, layer.norm_bias));
  }
  return {x, img.images, img.rows, img.dim};
}

/// softmax_i( mean_r(ctx[i, r]) . mean_t(q[t]) / sqrt(D) ) over the N images.
template <typename T>
ImageDistribution score_images(ag::Graph<T>& g, const ImageFeatures& ctx, const QuestionFeatures& q) {
  require(ctx.dim == q.dim, Errc::ShapeMismatch, "image and question widths differ");
  ag::RowMix<T> pool;
  for (int i = 0; i < ctx.images; ++i) {
    pool.rows.emplace_back();
    for (int r = 0; r < ctx.rows; ++r) pool.rows.back().emplace_back(i * ctx.rows + r, T(1) / static_cast<T>(ctx.rows));
  }
  const ag::Var pooled = ag::mix_rows(g, ctx.values, std::move(pool));
  const ag::Var qvec = ag::mix_rows(g, q.values, detail::masked_mean<T>(q.mask));
  ag::Var scores = ag::matmul(g, pooled, qvec, false, true);
  scores = ag::scale(g, scores, T(1) / std::sqrt(static_cast<T>(ctx.dim)));
  scores = ag::reshape(g, scores, {ctx.images});
  return {ag::softmax_rows(g, scores)};
}

/// fused[r, d] = sum_i p[i] * img[i, r, d].
template <typename T>
FusedImage fuse_images(ag::Graph<T>& g, const ImageFeatures& img, const ImageDistribution& p) {
  require(g.size(p.p) == static_cast<std::size_t>(img.images), Errc::ShapeMismatch,
          "distribution over " + std::to_string(g.size(p.p)) + " images for " + std::to_string(img.images) + " images");
  const ag::Var flat = ag::reshape(g, img.values, {img.images, img.rows * img.dim});
  const ag::Var row = ag::reshape(g, p.p, {1, img.images});
  const ag::Var fused = ag::matmul(g, row, flat);
  return {ag::reshape(g, fused, {img.rows, img.dim}), img.rows, img.dim};
}

/// Stacked attention over fused regions followed by the answer classifier.
struct AnswerHead {
  struct Hop {
    ParamId image_w;     // [D, D]
    Linear question;     // D -> D
    Linear attention;    // D -> 1, no bias
  };
  std::vector<Hop> hops;
  Linear classifier;  // D -> V

  template <typename T>
  static AnswerHead create(ParameterSet<T>& ps, const ModelConfig& cfg, Rng& rng) {
    AnswerHead h;
    for (int k = 0; k < cfg.san_layers; ++k) {
      const std::string name = "answer.hop" + std::to_string(k);
      Hop hop;
      hop.image_w = ps.add(name + ".image_weight", {cfg.dim, cfg.dim}, Init::Xavier, rng);
      hop.question = Linear::create(ps, name + ".question", cfg.dim, cfg.dim, rng);
      hop.attention = Linear::create(ps, name + ".attention", cfg.dim, 1, rng, Init::Xavier, false);
      h.hops.push_back(hop);
    }
    h.classifier = Linear::create(ps, "answer.classifier", cfg.dim, cfg.answers, rng);
    return h;
  }
};

/// u0 = masked mean of the question; each hop attends over the fused regions
/// conditioned on u and adds the attended vector to u; softmax(u W + b).
template <typename T>
AnswerDistribution answer_head(ag::Graph<T>& g, ParameterSet<T>& ps, const AnswerHead& head, const FusedImage& fused,
                               const QuestionFeatures& q, const ModelConfig& cfg) {
  require(fused.dim == cfg.dim && q.dim == cfg.dim, Errc::ShapeMismatch, "answer head width mismatch");
  ag::Var u = ag::mix_rows(g, q.values, detail::masked_mean<T>(q.mask));
  for (const auto& hop : head.hops) {
    const ag::Var hi = ag::matmul(g, fused.values, ps.use(g, hop.image_w));
    const ag::Var hq = hop.question(g, ps, u);
    const ag::Var h = ag::tanh(g, ag::add_row(g, hi, hq));
    ag::Var logits = hop.attention(g, ps, h);
    logits = ag::reshape(g, logits, {fused.rows});
    const ag::Var att = ag::reshape(g, ag::softmax_rows(g, logits), {1, fused.rows});
    u = ag::add(g, u, ag::matmul(g, att, fused.values));
  }
  const ag::Var logits = ag::reshape(g, head.classifier(g, ps, u), {cfg.answers});
  return {ag::softmax_rows(g, logits)};
}

}  // namespace mivqa
