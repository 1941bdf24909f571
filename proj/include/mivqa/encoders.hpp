#pragma once

// Image and question encoders. Both produce graph nodes so the built-in
// encoders train end to end; plugin encoders (pretrained backbones, external
// embedding models) enter the graph as constants.

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mivqa/autodiff.hpp"
#include "mivqa/config.hpp"
#include "mivqa/error.hpp"
#include "mivqa/image.hpp"
#include "mivqa/params.hpp"
#include "mivqa/tokenizer.hpp"

namespace mivqa {

/// Per-sample image features [N, R', D], stored as a [N * R', D] node.
struct ImageFeatures {
  ag::Var values;
  int images = 0;
  int rows = 0;
  int dim = 0;

  ag::Shape shape() const { return {images, rows, dim}; }
};

/// Question features [L, D] with the token mask; masked rows are zero.
struct QuestionFeatures {
  ag::Var values;
  std::vector<char> mask;
  int dim = 0;

  int length() const { return static_cast<int>(mask.size()); }
  ag::Shape shape() const { return {length(), dim}; }
};

/// Output dims a plugin promises.
struct FeatureMeta {
  int rows = 0;
  int dim = 0;
};

/// Frozen per-image feature extractor: the output must reshape to
/// [meta.rows, meta.dim]. Pretrained classification or detection backbones
/// plug in here.
class ImageBackbonePlugin {
 public:
  virtual ~ImageBackbonePlugin() = default;
  virtual FeatureMeta metadata() const = 0;
  virtual std::vector<float> extract(const Image& image) const = 0;
  virtual std::string name() const = 0;
};

/// Frozen question encoder returning [L, D] for a token sequence.
class SequencePlugin {
 public:
  virtual ~SequencePlugin() = default;
  virtual FeatureMeta metadata() const = 0;
  virtual std::vector<float> encode(const TokenSeq& tokens) const = 0;
  virtual std::string name() const = 0;
};

/// x W + b.
struct Linear {
  ParamId weight;
  ParamId bias;
  int in = 0;
  int out = 0;

  template <typename T>
  static Linear create(ParameterSet<T>& ps, const std::string& name, int in, int out, Rng& rng, Init init = Init::Xavier,
                       bool with_bias = true) {
    Linear l;
    l.in = in;
    l.out = out;
    l.weight = ps.add(name + ".weight", {in, out}, init, rng);
    if (with_bias) l.bias = ps.add(name + ".bias", {out}, Init::Zeros, rng);
    return l;
  }

  template <typename T>
  ag::Var operator()(ag::Graph<T>& g, ParameterSet<T>& ps, ag::Var x) const {
    const ag::Var y = ag::matmul(g, x, ps.use(g, weight));
    return bias.index < 0 ? y : ag::add_row(g, y, ps.use(g, bias));
  }
};

namespace detail {

/// (grid height, grid width) with h * w == cells and h the largest divisor
/// not above sqrt(cells).
inline std::pair<int, int> grid_for(int cells) {
  int h = 1;
  for (int d = 1; d * d <= cells; ++d)
    if (cells % d == 0) h = d;
  return {h, cells / h};
}

/// im2col indices for a 3x3, stride-2, pad-1 convolution over N stacked
/// [H, W, C] maps. Output rows are (n, oy, ox); columns are (ky, kx, c).
inline std::vector<int> im2col_3x3_s2(int n, int h, int w, int c, int& oh, int& ow) {
  oh = (h + 1) / 2;
  ow = (w + 1) / 2;
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(n) * oh * ow * 9 * c);
  for (int img = 0; img < n; ++img)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int y = oy * 2 + ky - 1;
            const int x = ox * 2 + kx - 1;
            const bool inside = y >= 0 && y < h && x >= 0 && x < w;
            for (int ch = 0; ch < c; ++ch)
              idx.push_back(inside ? ((img * h + y) * w + x) * c + ch : -1);
          }
  return idx;
}

/// Adaptive average pooling of N stacked [H, W] row grids onto gh x gw cells.
template <typename T>
ag::RowMix<T> adaptive_pool(int n, int h, int w, int gh, int gw) {
  ag::RowMix<T> mix;
  for (int img = 0; img < n; ++img)
    for (int cy = 0; cy < gh; ++cy)
      for (int cx = 0; cx < gw; ++cx) {
        const int y0 = cy * h / gh;
        const int y1 = ((cy + 1) * h + gh - 1) / gh;
        const int x0 = cx * w / gw;
        const int x1 = ((cx + 1) * w + gw - 1) / gw;
        const T wgt = T(1) / static_cast<T>((y1 - y0) * (x1 - x0));
        std::vector<std::pair<int, T>> row;
        for (int y = y0; y < y1; ++y)
          for (int x = x0; x < x1; ++x) row.emplace_back((img * h + y) * w + x, wgt);
        mix.rows.push_back(std::move(row));
      }
  return mix;
}

template <typename T>
ag::Var stack_images(ag::Graph<T>& g, std::span<const Image> images) {
  const int h = images[0].height;
  const int w = images[0].width;
  std::vector<T> v;
  v.reserve(images.size() * static_cast<std::size_t>(h) * w * 3);
  for (const auto& im : images) {
    require(im.width == w && im.height == h, Errc::ShapeMismatch, "images in a sample must share one spatial size");
    for (auto px : im.rgb) v.push_back(static_cast<T>(px) / T(255));
  }
  return g.constant({static_cast<int>(images.size()) * h * w, 3}, std::move(v));
}

}  // namespace detail

/// Trainable grid backbone: two 3x3 stride-2 ReLU convolutions, adaptive
/// average pooling onto R cells, and a linear projection to D.
struct ConvBackbone {
  ParamId conv1_w, conv1_b, conv2_w, conv2_b;
  Linear proj;
  int c1 = 0;
  int c2 = 0;

  template <typename T>
  static ConvBackbone create(ParameterSet<T>& ps, const ModelConfig& cfg, Rng& rng) {
    ConvBackbone b;
    b.c1 = cfg.conv1_channels;
    b.c2 = cfg.conv2_channels;
    b.conv1_w = ps.add("backbone.conv1.weight", {27, b.c1}, Init::Xavier, rng);
    b.conv1_b = ps.add("backbone.conv1.bias", {b.c1}, Init::Zeros, rng);
    b.conv2_w = ps.add("backbone.conv2.weight", {9 * b.c1, b.c2}, Init::Xavier, rng);
    b.conv2_b = ps.add("backbone.conv2.bias", {b.c2}, Init::Zeros, rng);
    b.proj = Linear::create(ps, "backbone.proj", b.c2, cfg.dim, rng);
    return b;
  }

  template <typename T>
  ag::Var operator()(ag::Graph<T>& g, ParameterSet<T>& ps, std::span<const Image> images, int regions) const {
    const int n = static_cast<int>(images.size());
    int h = images[0].height;
    int w = images[0].width;
    ag::Var x = detail::stack_images(g, images);
    int oh = 0, ow = 0;
    auto idx = detail::im2col_3x3_s2(n, h, w, 3, oh, ow);
    x = ag::gather(g, x, std::move(idx), {n * oh * ow, 27});
    x = ag::relu(g, ag::add_row(g, ag::matmul(g, x, ps.use(g, conv1_w)), ps.use(g, conv1_b)));
    h = oh;
    w = ow;
    idx = detail::im2col_3x3_s2(n, h, w, c1, oh, ow);
    x = ag::gather(g, x, std::move(idx), {n * oh * ow, 9 * c1});
    x = ag::relu(g, ag::add_row(g, ag::matmul(g, x, ps.use(g, conv2_w)), ps.use(g, conv2_b)));
    const auto [gh, gw] = detail::grid_for(regions);
    x = ag::mix_rows(g, x, detail::adaptive_pool<T>(n, oh, ow, gh, gw));
    return proj(g, ps, x);
  }
};

/// Encodes N images with the built-in backbone: [N, R, D].
template <typename T>
ImageFeatures encode_images(ag::Graph<T>& g, ParameterSet<T>& ps, const ConvBackbone& backbone,
                            std::span<const Image> images, const ModelConfig& cfg) {
  require(!images.empty(), Errc::ShapeMismatch, "at least one image is required");
  const ag::Var v = backbone(g, ps, images, cfg.regions);
  require(g.shape(v) == ag::Shape{static_cast<int>(images.size()) * cfg.regions, cfg.dim}, Errc::ShapeMismatch,
          "backbone produced " + ag::shape_str(g.shape(v)));
  return {v, static_cast<int>(images.size()), cfg.regions, cfg.dim};
}

/// Runs a frozen plugin on every image; its output must reshape to [rows, dim].
template <typename T>
ImageFeatures encode_images(ag::Graph<T>& g, const ImageBackbonePlugin& plugin, std::span<const Image> images, int rows,
                            int dim) {
  require(!images.empty(), Errc::ShapeMismatch, "at least one image is required");
  std::vector<T> v;
  for (const auto& im : images) {
    require(im.width == images[0].width && im.height == images[0].height, Errc::ShapeMismatch,
            "images in a sample must share one spatial size");
    const auto f = plugin.extract(im);
    require(f.size() == static_cast<std::size_t>(rows) * dim, Errc::ShapeMismatch,
            plugin.name() + " returned " + std::to_string(f.size()) + " values, cannot reshape to [" + std::to_string(rows) +
                "," + std::to_string(dim) + "]");
    for (float x : f) v.push_back(static_cast<T>(x));
  }
  const int n = static_cast<int>(images.size());
  return {g.constant({n * rows, dim}, std::move(v)), n, rows, dim};
}

template <typename T>
ImageFeatures encode_images(ag::Graph<T>& g, const ImageBackbonePlugin& plugin, std::span<const Image> images,
                            const ModelConfig& cfg) {
  return encode_images(g, plugin, images, cfg.regions, cfg.dim);
}

/// Appends projected region features after each image's grid rows:
/// [N, R, D] + [N, M, D_r] -> [N, R + M, D].
template <typename T>
ImageFeatures concat_region_features(ag::Graph<T>& g, ParameterSet<T>& ps, const ImageFeatures& grid,
                                     const ImageFeatures& regions, const Linear& projector) {
  require(regions.rows >= 1, Errc::ShapeMismatch, "region features need at least one proposal per image");
  require(regions.images == grid.images, Errc::ShapeMismatch,
          "grid has " + std::to_string(grid.images) + " images, regions " + std::to_string(regions.images));
  require(regions.dim == projector.in, Errc::ShapeMismatch,
          "region width " + std::to_string(regions.dim) + " does not match projector input " + std::to_string(projector.in));
  require(projector.out == grid.dim, Errc::ShapeMismatch, "projector output differs from grid width");
  const ag::Var projected = projector(g, ps, regions.values);
  const ag::Var parts[] = {grid.values, projected};
  const ag::Var stacked = ag::concat_rows<T>(g, parts);
  ag::RowMix<T> order;
  const int n = grid.images;
  for (int i = 0; i < n; ++i) {
    for (int r = 0; r < grid.rows; ++r) order.rows.push_back({{i * grid.rows + r, T(1)}});
    for (int r = 0; r < regions.rows; ++r) order.rows.push_back({{n * grid.rows + i * regions.rows + r, T(1)}});
  }
  return {ag::mix_rows(g, stacked, std::move(order)), n, grid.rows + regions.rows, grid.dim};
}

/// Trainable embedding table followed by a single-layer LSTM. Only the
/// unmasked prefix is run; padded rows of the output are zero.
struct LstmEncoder {
  ParamId embedding;
  ParamId input_w, recur_w, bias;  // gate blocks ordered i, f, g, o
  int dim = 0;
  int vocab = 0;

  template <typename T>
  static LstmEncoder create(ParameterSet<T>& ps, const ModelConfig& cfg, Rng& rng) {
    LstmEncoder e;
    e.dim = cfg.dim;
    e.vocab = cfg.token_vocab;
    e.embedding = ps.add("question.embedding", {cfg.token_vocab, cfg.dim}, Init::Xavier, rng);
    e.input_w = ps.add("question.lstm.input_weight", {cfg.dim, 4 * cfg.dim}, Init::Xavier, rng);
    e.recur_w = ps.add("question.lstm.recurrent_weight", {cfg.dim, 4 * cfg.dim}, Init::Xavier, rng);
    e.bias = ps.add("question.lstm.bias", {4 * cfg.dim}, Init::Zeros, rng);
    // Candidate block starts at zero so an untrained encoder emits zeros and
    // scores every candidate image alike; forget gate biased open.
    const int d = cfg.dim;
    for (ParamId w : {e.input_w, e.recur_w}) {
      auto& v = ps[w].value;
      for (int r = 0; r < d; ++r)
        for (int c = 2 * d; c < 3 * d; ++c) v[static_cast<std::size_t>(r) * 4 * d + c] = T(0);
    }
    auto& b = ps[e.bias].value;
    for (int c = d; c < 2 * d; ++c) b[static_cast<std::size_t>(c)] = T(1);
    return e;
  }

  template <typename T>
  ag::Var operator()(ag::Graph<T>& g, ParameterSet<T>& ps, const TokenSeq& tokens) const {
    const int len = static_cast<int>(tokens.ids.size());
    const int real = tokens.length();
    std::vector<int> idx;
    for (int t = 0; t < real; ++t) {
      const int id = tokens.ids[static_cast<std::size_t>(t)];
      require(id >= 0 && id < vocab, Errc::VocabMismatch,
              "token id " + std::to_string(id) + " outside embedding table of " + std::to_string(vocab));
      for (int c = 0; c < dim; ++c) idx.push_back(id * dim + c);
    }
    const ag::Var emb = ag::gather(g, ps.use(g, embedding), std::move(idx), {real, dim});
    const ag::Var xproj = ag::add_row(g, ag::matmul(g, emb, ps.use(g, input_w)), ps.use(g, bias));
    const ag::Var recur = ps.use(g, recur_w);
    auto slice = [&](ag::Var row, int block) {
      std::vector<int> s(static_cast<std::size_t>(dim));
      for (int c = 0; c < dim; ++c) s[c] = block * dim + c;
      return ag::gather(g, row, std::move(s), {1, dim});
    };
    std::vector<ag::Var> outputs;
    ag::Var h{}, c{};
    for (int t = 0; t < real; ++t) {
      std::vector<int> s(static_cast<std::size_t>(4 * dim));
      for (int k = 0; k < 4 * dim; ++k) s[k] = t * 4 * dim + k;
      ag::Var gates = ag::gather(g, xproj, std::move(s), {1, 4 * dim});
      if (h.valid()) gates = ag::add(g, gates, ag::matmul(g, h, recur));
      const ag::Var i_gate = ag::sigmoid(g, slice(gates, 0));
      const ag::Var f_gate = ag::sigmoid(g, slice(gates, 1));
      const ag::Var cand = ag::tanh(g, slice(gates, 2));
      const ag::Var o_gate = ag::sigmoid(g, slice(gates, 3));
      ag::Var next_c = ag::mul(g, i_gate, cand);
      if (c.valid()) next_c = ag::add(g, next_c, ag::mul(g, f_gate, c));
      c = next_c;
      h = ag::mul(g, o_gate, ag::tanh(g, c));
      outputs.push_back(h);
    }
    if (real < len) outputs.push_back(g.constant({len - real, dim}, std::vector<T>(static_cast<std::size_t>(len - real) * dim, T(0))));
    return ag::concat_rows<T>(g, outputs);
  }
};

/// Encodes a token sequence with the built-in LSTM: [L, D].
template <typename T>
QuestionFeatures encode_question(ag::Graph<T>& g, ParameterSet<T>& ps, const LstmEncoder& encoder, const TokenSeq& tokens,
                                 const ModelConfig& cfg) {
  require(tokens.ids.size() == tokens.mask.size() && !tokens.ids.empty(), Errc::ShapeMismatch, "malformed token sequence");
  require(tokens.length() >= 1, Errc::EmptyQuestion, "token sequence has no real tokens");
  require(static_cast<int>(tokens.ids.size()) == cfg.max_question_len, Errc::ShapeMismatch,
          "token sequence of length " + std::to_string(tokens.ids.size()) + ", model expects " +
              std::to_string(cfg.max_question_len));
  return {encoder(g, ps, tokens), tokens.mask, cfg.dim};
}

/// Encodes with a frozen plugin; masked rows are forced to zero.
template <typename T>
QuestionFeatures encode_question(ag::Graph<T>& g, const SequencePlugin& plugin, const TokenSeq& tokens,
                                 const ModelConfig& cfg) {
  require(tokens.length() >= 1, Errc::EmptyQuestion, "token sequence has no real tokens");
  const int len = static_cast<int>(tokens.ids.size());
  const auto f = plugin.encode(tokens);
  require(f.size() == static_cast<std::size_t>(len) * cfg.dim, Errc::ShapeMismatch,
          plugin.name() + " returned " + std::to_string(f.size()) + " values, expected [" + std::to_string(len) + "," +
              std::to_string(cfg.dim) + "]");
  std::vector<T> v(f.begin(), f.end());
  for (int t = 0; t < len; ++t)
    if (!tokens.mask[static_cast<std::size_t>(t)])
      std::fill_n(v.begin() + static_cast<std::ptrdiff_t>(t) * cfg.dim, cfg.dim, T(0));
  return {g.constant({len, cfg.dim}, std::move(v)), tokens.mask, cfg.dim};
}

// ---------------------------------------------------------------------------
// deterministic stand-ins for pretrained models

/// Pools each image onto a grid and expands the cell colours with fixed
/// sinusoids. Output is a pure function of the pixels.
class StubBackbone final : public ImageBackbonePlugin {
 public:
  StubBackbone(int rows, int dim) : meta_{rows, dim} {}

  FeatureMeta metadata() const override { return meta_; }

  std::vector<float> extract(const Image& im) const override {
    const auto [gh, gw] = detail::grid_for(meta_.rows);
    std::vector<float> out;
    out.reserve(static_cast<std::size_t>(meta_.rows) * meta_.dim);
    for (int cy = 0; cy < gh; ++cy)
      for (int cx = 0; cx < gw; ++cx) {
        double mean[3] = {0, 0, 0};
        int count = 0;
        const int y0 = cy * im.height / gh, y1 = std::max(y0 + 1, (cy + 1) * im.height / gh);
        const int x0 = cx * im.width / gw, x1 = std::max(x0 + 1, (cx + 1) * im.width / gw);
        for (int y = y0; y < std::min(y1, im.height); ++y)
          for (int x = x0; x < std::min(x1, im.width); ++x) {
            for (int c = 0; c < 3; ++c) mean[c] += im.at(x, y)[c] / 255.0;
            ++count;
          }
        const int r = cy * gw + cx;
        for (int d = 0; d < meta_.dim; ++d) {
          const double m = count ? mean[d % 3] / count : 0.0;
          out.push_back(static_cast<float>(m * std::cos(0.37 * d + 0.11 * r)));
        }
      }
    return out;
  }

  std::string name() const override { return "stub-backbone"; }

 private:
  FeatureMeta meta_;
};

/// Hash-seeded embeddings per token id; stands in for a contextual encoder.
class StubSequenceEncoder final : public SequencePlugin {
 public:
  explicit StubSequenceEncoder(int dim) : dim_(dim) {}

  FeatureMeta metadata() const override { return {0, dim_}; }

  std::vector<float> encode(const TokenSeq& tokens) const override {
    std::vector<float> out;
    for (std::size_t t = 0; t < tokens.ids.size(); ++t) {
      Rng rng(static_cast<std::uint64_t>(tokens.ids[t]), t);
      for (int d = 0; d < dim_; ++d) out.push_back(static_cast<float>(rng.uniform(-1.0, 1.0)));
    }
    return out;
  }

  std::string name() const override { return "stub-sequence"; }

 private:
  int dim_;
};

}  // namespace mivqa
