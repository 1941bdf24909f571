#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "mivqa/mivqa.hpp"

namespace mivqa::testing {

inline Image random_image(Rng& rng, int size) {
  Image im(size, size);
  for (auto& px : im.rgb) px = static_cast<std::uint8_t>(rng.range(0, 255));
  return im;
}

inline std::vector<Image> random_images(Rng& rng, int n, int size) {
  std::vector<Image> out;
  for (int i = 0; i < n; ++i) out.push_back(random_image(rng, size));
  return out;
}

inline WordTokenizer shapes_tokenizer() {
  std::vector<std::string> questions;
  for (auto s : synth::kShapes)
    for (auto c : synth::kColors) {
      questions.push_back(synth::question_text(synth::Template::ColorOfShape, synth::to_string(s)));
      questions.push_back(synth::question_text(synth::Template::ShapeOfColor, synth::to_string(c)));
      questions.push_back(synth::question_text(synth::Template::CountShape, synth::to_string(s)));
    }
  return WordTokenizer::fit(questions);
}

inline std::vector<std::string> answer_list(int v) {
  std::vector<std::string> out;
  for (int i = 0; i + 1 < v; ++i) out.push_back("a" + std::to_string(i));
  out.emplace_back(kUnknownAnswer);
  return out;
}

inline ModelConfig small_config(int n = 4, int regions = 16, int dim = 32, int len = 10, int heads = 4) {
  ModelConfig c = ModelConfig::desk();
  c.images = n;
  c.regions = regions;
  c.dim = dim;
  c.max_question_len = len;
  c.heads = heads;
  c.image_size = 16;
  c.conv1_channels = 4;
  c.conv2_channels = 6;
  return c;
}

/// Replaces every parameter with N(0, sd) noise so no component sits at a
/// degenerate initial point.
template <typename T>
void randomize(ParameterSet<T>& ps, Rng& rng, double sd = 0.3) {
  for (auto& e : ps)
    for (auto& x : e.value) x = static_cast<T>(sd * rng.normal());
}

// Independent answer oracle: works from the scene object list only.
inline std::string oracle_answer(const synth::SceneSpec& scene, const std::string& question) {
  std::map<std::string, int> shape_count;
  std::map<std::string, int> color_count;
  std::map<std::string, std::string> color_of, shape_of;
  for (const auto& o : scene.objects) {
    const std::string s = to_string(o.shape), c = to_string(o.color);
    ++shape_count[s];
    ++color_count[c];
    color_of[s] = c;
    shape_of[c] = s;
  }
  const std::string color_prefix = "what color is the ";
  const std::string shape_prefix = "what shape is the ";
  const std::string count_prefix = "how many ";
  if (question.rfind(color_prefix, 0) == 0) {
    const std::string s = question.substr(color_prefix.size(), question.size() - color_prefix.size() - 1);
    return shape_count[s] == 1 ? color_of[s] : "";
  }
  if (question.rfind(shape_prefix, 0) == 0) {
    const std::string rest = question.substr(shape_prefix.size());
    const std::string c = rest.substr(0, rest.find(' '));
    return color_count[c] == 1 ? shape_of[c] : "";
  }
  if (question.rfind(count_prefix, 0) == 0) {
    const std::string rest = question.substr(count_prefix.size());
    const std::string s = rest.substr(0, rest.find("s are there?"));
    static const char* words[] = {"", "one", "two", "three"};
    const int n = shape_count[s];
    return n >= 1 && n <= 3 ? words[n] : "";
  }
  return "";
}

/// Fresh scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

/// Writes a synthetic shapes dataset under `dir` and a k=3 manifest built from
/// it; returns the manifest path.
inline std::filesystem::path write_synthetic_manifest(const std::filesystem::path& dir, int n, std::uint64_t seed,
                                                      int image_size = 32) {
  const auto ds = synth::generate_shapes_dataset({.n_samples = n, .image_size = image_size, .seed = seed});
  synth::write_shapes_dataset(ds, dir);
  const Manifest m = build_multi_image_dataset(read_base_dir(dir, dir), read_pool_dir(dir, dir), {.k = 3, .seed = seed});
  write_manifest(m, dir / "train.jsonl");
  return dir / "train.jsonl";
}

inline RunConfig quick_run(const std::filesystem::path& manifest, const std::filesystem::path& out, int epochs) {
  RunConfig r;
  r.model = small_config();
  r.paths.train_manifest = manifest.string();
  r.paths.checkpoint_dir = (out / "ckpt").string();
  r.paths.metrics_file = (out / "metrics.jsonl").string();
  r.optimizer.epochs = epochs;
  r.optimizer.batch_size = 8;
  r.seed = 3;
  return r;
}

/// Central-difference derivative of f at x[i].
template <typename F, typename T>
T central_difference(F&& f, T& x, std::type_identity_t<T> h) {
  const T saved = x;
  x = saved + h;
  const T up = f();
  x = saved - h;
  const T down = f();
  x = saved;
  return (up - down) / (2 * h);
}

template <typename T>
T relative_error(T a, T b, std::type_identity_t<T> floor = 1e-7) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace mivqa::testing
