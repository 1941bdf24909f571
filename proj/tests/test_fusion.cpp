#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "test_util.hpp"

using namespace mivqa;
using mivqa::testing::random_images;
using mivqa::testing::randomize;
using mivqa::testing::shapes_tokenizer;
using mivqa::testing::small_config;

namespace {

std::vector<double> random_values(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1, 1);
  return v;
}

struct FusionParts {
  ModelConfig cfg = small_config(3, 4, 16, 6, 4);
  ParameterSet<double> ps;
  std::vector<CrossAttentionLayer> layers;
  AnswerHead head;

  FusionParts() {
    cfg.answers = 5;
    cfg.token_vocab = 10;
    Rng rng(1);
    for (int l = 0; l < cfg.fusion_layers; ++l)
      layers.push_back(CrossAttentionLayer::create(ps, "f" + std::to_string(l), cfg.dim, rng));
    head = AnswerHead::create(ps, cfg, rng);
    randomize(ps, rng, 0.4);
    for (int l = 0; l < cfg.fusion_layers; ++l) {
      std::fill(ps[layers[static_cast<std::size_t>(l)].norm_gain].value.begin(),
                ps[layers[static_cast<std::size_t>(l)].norm_gain].value.end(), 1.0);
    }
  }

  QuestionFeatures question(ag::Graph<double>& g, Rng& rng, int real) const {
    std::vector<char> mask(static_cast<std::size_t>(cfg.max_question_len), 0);
    std::fill_n(mask.begin(), real, 1);
    auto v = random_values(rng, static_cast<std::size_t>(cfg.max_question_len * cfg.dim));
    for (int t = real; t < cfg.max_question_len; ++t)
      std::fill_n(v.begin() + t * cfg.dim, cfg.dim, 0.0);
    return {g.constant({cfg.max_question_len, cfg.dim}, v), mask, cfg.dim};
  }
};

}  // namespace

TEST(CrossAttend, PreservesShape) {
  FusionParts f;
  Rng rng(2);
  ag::Graph<double> g(false);
  const ImageFeatures img{g.constant({3 * 4, 16}, random_values(rng, 3 * 4 * 16)), 3, 4, 16};
  const auto out = cross_attend(g, f.ps, f.layers, img, f.question(g, rng, 4), f.cfg);
  EXPECT_EQ(out.shape(), (ag::Shape{3, 4, 16}));
}

TEST(CrossAttend, IdenticalImagesStayIdentical) {
  FusionParts f;
  Rng rng(3);
  ag::Graph<double> g(false);
  const auto one = random_values(rng, 4 * 16);
  std::vector<double> v;
  for (int i = 0; i < 3; ++i) v.insert(v.end(), one.begin(), one.end());
  const ImageFeatures img{g.constant({12, 16}, v), 3, 4, 16};
  const auto out = g.take(cross_attend(g, f.ps, f.layers, img, f.question(g, rng, 3), f.cfg).values);
  for (std::size_t j = 0; j < 64; ++j) {
    EXPECT_EQ(out[j], out[64 + j]);
    EXPECT_EQ(out[j], out[128 + j]);
  }
}

TEST(CrossAttend, PermutingImagesPermutesOutput) {
  FusionParts f;
  Rng rng(4);
  const auto v = random_values(rng, 3 * 64);
  const int perm[] = {2, 0, 1};
  std::vector<double> pv;
  for (int i : perm) pv.insert(pv.end(), v.begin() + i * 64, v.begin() + (i + 1) * 64);
  Rng qa(5), qb(5);
  ag::Graph<double> g(false);
  const auto a = g.take(cross_attend(g, f.ps, f.layers, {g.constant({12, 16}, v), 3, 4, 16}, f.question(g, qa, 5), f.cfg).values);
  const auto b = g.take(cross_attend(g, f.ps, f.layers, {g.constant({12, 16}, pv), 3, 4, 16}, f.question(g, qb, 5), f.cfg).values);
  for (int k = 0; k < 3; ++k)
    for (int j = 0; j < 64; ++j)
      EXPECT_NEAR(b[static_cast<std::size_t>(k * 64 + j)], a[static_cast<std::size_t>(perm[k] * 64 + j)], 1e-12);
}

TEST(ScoreImages, IdenticalImagesGiveUniform) {
  Rng rng(6);
  FusionParts f;
  ag::Graph<double> g(false);
  const auto one = random_values(rng, 4 * 16);
  std::vector<double> v;
  for (int i = 0; i < 3; ++i) v.insert(v.end(), one.begin(), one.end());
  const auto p = g.take(score_images(g, {g.constant({12, 16}, v), 3, 4, 16}, f.question(g, rng, 3)).p);
  for (double x : p) EXPECT_NEAR(x, 1.0 / 3.0, 1e-12);
}

TEST(ScoreImages, MatchesDirectFormula) {
  Rng rng(7);
  FusionParts f;
  ag::Graph<double> g(false);
  const auto v = random_values(rng, 3 * 4 * 16);
  const auto q = f.question(g, rng, 2);
  const auto qv = g.value(q.values);
  const auto p = g.take(score_images(g, {g.constant({12, 16}, v), 3, 4, 16}, q).p);
  // softmax over images of <mean of rows, mean of real tokens> / sqrt(D)
  std::vector<double> s(3);
  for (int i = 0; i < 3; ++i)
    for (int d = 0; d < 16; ++d) {
      double img_mean = 0, q_mean = 0;
      for (int r = 0; r < 4; ++r) img_mean += v[static_cast<std::size_t>((i * 4 + r) * 16 + d)] / 4;
      for (int t = 0; t < 2; ++t) q_mean += qv[static_cast<std::size_t>(t * 16 + d)] / 2;
      s[static_cast<std::size_t>(i)] += img_mean * q_mean / 4.0;
    }
  const double z = std::exp(s[0]) + std::exp(s[1]) + std::exp(s[2]);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[static_cast<std::size_t>(i)], std::exp(s[static_cast<std::size_t>(i)]) / z, 1e-12);
}

TEST(FuseImages, OneHotSelectsImage) {
  Rng rng(8);
  ag::Graph<double> g(false);
  const auto v = random_values(rng, 3 * 4 * 16);
  const ImageFeatures img{g.constant({12, 16}, v), 3, 4, 16};
  for (int i = 0; i < 3; ++i) {
    std::vector<double> onehot(3, 0.0);
    onehot[static_cast<std::size_t>(i)] = 1.0;
    const auto fused = g.take(fuse_images(g, img, {g.constant({3}, onehot)}).values);
    for (int j = 0; j < 64; ++j) EXPECT_EQ(fused[static_cast<std::size_t>(j)], v[static_cast<std::size_t>(i * 64 + j)]);
  }
}

TEST(FuseImages, SharedGridAndLinearity) {
  Rng rng(9);
  ag::Graph<double> g(false);
  const auto a = random_values(rng, 4 * 16);
  std::vector<double> same(a);
  same.insert(same.end(), a.begin(), a.end());
  const auto fused_same = g.take(fuse_images(g, {g.constant({8, 16}, same), 2, 4, 16}, {g.constant({2}, {0.3, 0.7})}).values);
  for (std::size_t j = 0; j < a.size(); ++j) EXPECT_NEAR(fused_same[j], a[j], 1e-12);

  std::vector<double> a3(a);
  for (double x : a) a3.push_back(3 * x);
  const auto fused_lin = g.take(fuse_images(g, {g.constant({8, 16}, a3), 2, 4, 16}, {g.constant({2}, {0.5, 0.5})}).values);
  for (std::size_t j = 0; j < a.size(); ++j) EXPECT_NEAR(fused_lin[j], 2 * a[j], 1e-12);
}

TEST(FuseImages, RejectsWrongDistributionLength) {
  ag::Graph<double> g(false);
  const ImageFeatures img{g.constant({8, 2}, std::vector<double>(16, 0.0)), 2, 4, 2};
  EXPECT_THROW(fuse_images(g, img, {g.constant({3}, {0.2, 0.3, 0.5})}), Error);
}

TEST(AnswerHead, SumsToOneWithLengthV) {
  FusionParts f;
  Rng rng(10);
  ag::Graph<double> g(false);
  const FusedImage fused{g.constant({4, 16}, random_values(rng, 64)), 4, 16};
  const auto q = g.take(answer_head(g, f.ps, f.head, fused, f.question(g, rng, 3), f.cfg).q);
  ASSERT_EQ(q.size(), 5u);
  EXPECT_NEAR(std::accumulate(q.begin(), q.end(), 0.0), 1.0, 1e-12);
}

TEST(AnswerHead, ZeroClassifierGivesUniform) {
  FusionParts f;
  f.cfg.answers = 4;
  Rng rng(11);
  ParameterSet<double> ps;
  const AnswerHead head = AnswerHead::create(ps, f.cfg, rng);
  randomize(ps, rng);
  for (ParamId id : {head.classifier.weight, head.classifier.bias})
    std::fill(ps[id].value.begin(), ps[id].value.end(), 0.0);
  ag::Graph<double> g(false);
  const FusedImage fused{g.constant({4, 16}, random_values(rng, 64)), 4, 16};
  for (double x : g.take(answer_head(g, ps, head, fused, f.question(g, rng, 3), f.cfg).q)) EXPECT_DOUBLE_EQ(x, 0.25);
}

TEST(AnswerHead, CrossEntropyGradientAtUniformIsQMinusOneHot) {
  // d(-log softmax(z)_t)/dz at z = 0: analytic identity, autodiff, and
  // central differences must all agree
  const int v = 4, target = 2;
  std::vector<double> z(v, 0.0), grad(v, 0.0);
  ag::Graph<double> g;
  const auto zl = g.leaf({v}, z, grad.data());
  g.backward(ag::nll_of_probs(g, ag::softmax_rows(g, zl), target, kProbClamp));
  auto loss_at = [&] {
    double m = *std::max_element(z.begin(), z.end()), s = 0;
    for (double x : z) s += std::exp(x - m);
    return -(z[target] - m - std::log(s));
  };
  for (int i = 0; i < v; ++i) {
    const double expected = 0.25 - (i == target ? 1.0 : 0.0);
    EXPECT_NEAR(grad[static_cast<std::size_t>(i)], expected, 1e-12);
    const double fd = mivqa::testing::central_difference(loss_at, z[static_cast<std::size_t>(i)], 1e-5);
    EXPECT_LT(mivqa::testing::relative_error(grad[static_cast<std::size_t>(i)], fd), 1e-4);
  }
}

TEST(Model, SingleCandidateGivesCertainty) {
  ModelConfig c = small_config(1);
  VqaModel<double> model(c, shapes_tokenizer(), mivqa::testing::answer_list(5), 3);
  Rng rng(12);
  randomize(model.params(), rng);
  const auto imgs = random_images(rng, 1, 16);
  const Prediction p = model.predict(imgs, "what color is the circle?");
  EXPECT_EQ(p.image_index, 0);
  ASSERT_EQ(p.image_probs.size(), 1u);
  EXPECT_DOUBLE_EQ(p.image_probs[0], 1.0);
}

TEST(Model, ForwardIsPure) {
  VqaModel<double> model(small_config(3), shapes_tokenizer(), mivqa::testing::answer_list(6), 4);
  Rng rng(13);
  randomize(model.params(), rng);
  const auto imgs = random_images(rng, 3, 16);
  const auto tokens = model.tokenize("how many squares are there?");
  const auto a = model.distributions(imgs, tokens);
  const auto b = model.distributions(imgs, tokens);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_EQ(a.first.size(), 3u);
  EXPECT_EQ(a.second.size(), 6u);
}

TEST(Model, DuplicatedImagesScoreEqually) {
  VqaModel<double> model(small_config(3), shapes_tokenizer(), mivqa::testing::answer_list(6), 5);
  Rng rng(14);
  randomize(model.params(), rng);
  auto imgs = random_images(rng, 3, 16);
  imgs[1] = imgs[0];
  const Prediction p = model.predict(imgs, "what shape is the blue object?");
  EXPECT_NEAR(p.image_probs[0], p.image_probs[1], 1e-6);
}

TEST(Argmax, TiesGoToLowestIndex) {
  EXPECT_EQ(argmax(std::vector<double>{0.2, 0.4, 0.4}), 1);
  EXPECT_EQ(argmax(std::vector<double>{0.25, 0.25, 0.25, 0.25}), 0);
}
