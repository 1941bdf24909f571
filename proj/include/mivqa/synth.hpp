#pragma once

// Self-contained shapes dataset: small rendered scenes of coloured circles,
// squares and triangles with templated questions, plus a pool of shape-free
// texture images to serve as distractors.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mivqa/dataset.hpp"
#include "mivqa/error.hpp"
#include "mivqa/image.hpp"
#include "mivqa/rng.hpp"

namespace mivqa::synth {

enum class ShapeKind { Circle, Square, Triangle };
enum class Color { Red, Green, Blue };

inline constexpr std::array<ShapeKind, 3> kShapes{ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle};
inline constexpr std::array<Color, 3> kColors{Color::Red, Color::Green, Color::Blue};
inline constexpr std::array<const char*, 4> kCountWords{"zero", "one", "two", "three"};
inline constexpr const char* kTextureLabel = "texture";

inline std::string to_string(ShapeKind s) {
  switch (s) {
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Square: return "square";
    case ShapeKind::Triangle: return "triangle";
  }
  return "";
}

inline std::string to_string(Color c) {
  switch (c) {
    case Color::Red: return "red";
    case Color::Green: return "green";
    case Color::Blue: return "blue";
  }
  return "";
}

inline std::array<std::uint8_t, 3> rgb_of(Color c) {
  switch (c) {
    case Color::Red: return {220, 40, 40};
    case Color::Green: return {40, 180, 60};
    case Color::Blue: return {40, 70, 220};
  }
  return {0, 0, 0};
}

struct SceneObject {
  ShapeKind shape;
  Color color;
  int x = 0;  // top-left corner of the bounding box
  int y = 0;
  int size = 0;  // bounding-box side

  bool operator==(const SceneObject&) const = default;
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  int image_size = 32;

  bool operator==(const SceneSpec&) const = default;
};

enum class Template { ColorOfShape, ShapeOfColor, CountShape };

struct Question {
  Template kind;
  std::string subject;  // shape or colour word the question is about
  std::string text;
  std::string answer;
};

struct ShapesSample {
  std::string id;
  SceneSpec scene;
  Image image;
  Question question;
};

struct TextureSample {
  std::string id;
  Image image;
};

struct ShapesDataset {
  std::vector<ShapesSample> samples;
  std::vector<TextureSample> pool;
};

struct SynthOptions {
  int n_samples = 200;
  int image_size = 32;
  std::uint64_t seed = 0;
  /// Texture pool size; 0 picks max(8, n_samples).
  int pool_size = 0;
  int max_retries = 64;
};

/// Fraction of the smaller box covered by the intersection of two boxes.
inline double overlap_fraction(const SceneObject& a, const SceneObject& b) {
  const int w = std::min(a.x + a.size, b.x + b.size) - std::max(a.x, b.x);
  const int h = std::min(a.y + a.size, b.y + b.size) - std::max(a.y, b.y);
  if (w <= 0 || h <= 0) return 0.0;
  const int smaller = std::min(a.size, b.size);
  return static_cast<double>(w * h) / static_cast<double>(smaller * smaller);
}

inline bool scene_valid(const SceneSpec& s) {
  if (s.objects.empty() || s.objects.size() > 3) return false;
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    const auto& o = s.objects[i];
    if (o.size < 1 || o.x < 0 || o.y < 0 || o.x + o.size > s.image_size || o.y + o.size > s.image_size) return false;
    for (std::size_t j = 0; j < i; ++j)
      if (overlap_fraction(o, s.objects[j]) > 0.2) return false;
  }
  return true;
}

inline bool covers(const SceneObject& o, double px, double py) {
  const double half = o.size / 2.0;
  const double cx = o.x + half;
  const double cy = o.y + half;
  switch (o.shape) {
    case ShapeKind::Circle:
      return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= half * half;
    case ShapeKind::Square:
      return px >= o.x && px <= o.x + o.size && py >= o.y && py <= o.y + o.size;
    case ShapeKind::Triangle: {
      // apex at top centre, base along the bottom edge
      const double t = (py - o.y) / o.size;
      if (t < 0.0 || t > 1.0) return false;
      return std::abs(px - cx) <= half * t;
    }
  }
  return false;
}

/// Pure function of the scene: later objects paint over earlier ones.
inline Image render(const SceneSpec& s) {
  Image img(s.image_size, s.image_size);
  for (int y = 0; y < s.image_size; ++y)
    for (int x = 0; x < s.image_size; ++x) {
      auto* p = img.at(x, y);
      p[0] = p[1] = p[2] = 150;
    }
  for (const auto& o : s.objects) {
    const auto c = rgb_of(o.color);
    for (int y = o.y; y < o.y + o.size; ++y)
      for (int x = o.x; x < o.x + o.size; ++x)
        if (covers(o, x + 0.5, y + 0.5)) std::copy(c.begin(), c.end(), img.at(x, y));
  }
  return img;
}

inline SceneSpec sample_scene(Rng& rng, int image_size) {
  SceneSpec s;
  s.image_size = image_size;
  const int lo = std::max(4, static_cast<int>(std::lround(image_size * 0.22)));
  const int hi = std::max(lo, static_cast<int>(std::lround(image_size * 0.34)));
  const int count = rng.range(1, 3);
  for (int attempt = 0; attempt < 200 && static_cast<int>(s.objects.size()) < count; ++attempt) {
    SceneObject o;
    o.shape = kShapes[rng.index(3)];
    o.color = kColors[rng.index(3)];
    o.size = rng.range(lo, hi);
    o.x = rng.range(0, image_size - o.size);
    o.y = rng.range(0, image_size - o.size);
    bool ok = true;
    for (const auto& other : s.objects) ok = ok && overlap_fraction(o, other) <= 0.2;
    if (ok) s.objects.push_back(o);
  }
  return s;
}

/// Answers `kind` about `subject` under `scene`; empty when the answer is
/// not unique.
inline std::string answer_for(const SceneSpec& scene, Template kind, const std::string& subject) {
  switch (kind) {
    case Template::ColorOfShape: {
      const SceneObject* hit = nullptr;
      int n = 0;
      for (const auto& o : scene.objects)
        if (to_string(o.shape) == subject) {
          hit = &o;
          ++n;
        }
      return n == 1 ? to_string(hit->color) : std::string{};
    }
    case Template::ShapeOfColor: {
      const SceneObject* hit = nullptr;
      int n = 0;
      for (const auto& o : scene.objects)
        if (to_string(o.color) == subject) {
          hit = &o;
          ++n;
        }
      return n == 1 ? to_string(hit->shape) : std::string{};
    }
    case Template::CountShape: {
      int n = 0;
      for (const auto& o : scene.objects) n += to_string(o.shape) == subject;
      return n >= 1 ? kCountWords[static_cast<std::size_t>(n)] : std::string{};
    }
  }
  return {};
}

inline std::string question_text(Template kind, const std::string& subject) {
  switch (kind) {
    case Template::ColorOfShape: return "what color is the " + subject + "?";
    case Template::ShapeOfColor: return "what shape is the " + subject + " object?";
    case Template::CountShape: return "how many " + subject + "s are there?";
  }
  return {};
}

/// Every answer the generator can produce.
inline std::vector<std::string> answer_space() {
  std::vector<std::string> out;
  for (auto c : kColors) out.push_back(to_string(c));
  for (auto s : kShapes) out.push_back(to_string(s));
  for (int i = 1; i <= 3; ++i) out.emplace_back(kCountWords[static_cast<std::size_t>(i)]);
  return out;
}

inline Image render_texture(Rng& rng, int image_size) {
  Image img(image_size, image_size);
  std::array<std::uint8_t, 3> a{}, b{};
  for (auto& v : a) v = static_cast<std::uint8_t>(rng.range(0, 255));
  for (auto& v : b) v = static_cast<std::uint8_t>(rng.range(0, 255));
  const int kind = rng.range(0, 3);
  const int period = rng.range(2, 6);
  for (int y = 0; y < image_size; ++y)
    for (int x = 0; x < image_size; ++x) {
      auto* p = img.at(x, y);
      switch (kind) {
        case 0:  // uniform noise
          for (int c = 0; c < 3; ++c) p[c] = static_cast<std::uint8_t>(rng.range(0, 255));
          break;
        case 1: {  // stripes
          const auto& col = ((x + y) / period) % 2 ? a : b;
          std::copy(col.begin(), col.end(), p);
          break;
        }
        case 2: {  // checkerboard
          const auto& col = ((x / period) + (y / period)) % 2 ? a : b;
          std::copy(col.begin(), col.end(), p);
          break;
        }
        default: {  // noisy gradient
          const double t = static_cast<double>(x + y) / (2.0 * image_size);
          for (int c = 0; c < 3; ++c) {
            const double v = (1 - t) * a[c] + t * b[c] + rng.range(-20, 20);
            p[c] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
          }
        }
      }
    }
  return img;
}

/// Deterministic in (options). Items whose template never finds a unique
/// answer within max_retries scenes are skipped.
inline ShapesDataset generate_shapes_dataset(const SynthOptions& opt) {
  require(opt.n_samples >= 1, Errc::ConfigInvalid, "n_samples must be at least 1");
  require(opt.image_size >= 16, Errc::ConfigInvalid, "image_size must be at least 16");
  ShapesDataset ds;
  const std::uint64_t scene_seed = derive_seed(opt.seed, 0x5ce7e);
  for (int i = 0; i < opt.n_samples; ++i) {
    Rng rng(scene_seed, static_cast<std::uint64_t>(i));
    const auto kind = static_cast<Template>(rng.index(3));
    for (int attempt = 0; attempt < opt.max_retries; ++attempt) {
      SceneSpec scene = sample_scene(rng, opt.image_size);
      const auto& pick = scene.objects[rng.index(scene.objects.size())];
      const std::string subject = kind == Template::ShapeOfColor ? to_string(pick.color) : to_string(pick.shape);
      std::string answer = answer_for(scene, kind, subject);
      if (answer.empty()) continue;
      char id[32];
      std::snprintf(id, sizeof(id), "shapes-%06d", i);
      ds.samples.push_back({id, scene, render(scene), {kind, subject, question_text(kind, subject), std::move(answer)}});
      break;
    }
  }
  const int pool = opt.pool_size > 0 ? opt.pool_size : std::max(8, opt.n_samples);
  const std::uint64_t tex_seed = derive_seed(opt.seed, 0x7e47);
  for (int i = 0; i < pool; ++i) {
    Rng rng(tex_seed, static_cast<std::uint64_t>(i));
    char id[32];
    std::snprintf(id, sizeof(id), "texture-%06d", i);
    ds.pool.push_back({id, render_texture(rng, opt.image_size)});
  }
  return ds;
}

// ---------------------------------------------------------------------------
// on-disk layout
//
//   DIR/base/base.jsonl   {"id", "image", "question", "answer", "scene"}
//   DIR/base/<id>.ppm     plus <id>.ppm.det.json listing the shapes present
//   DIR/pool/pool.jsonl   {"image", "label"}
//   DIR/pool/<id>.ppm
//   DIR/png/...           optional PNG copies for inspection

inline nlohmann::ordered_json scene_to_json(const SceneSpec& s) {
  nlohmann::ordered_json objs = nlohmann::ordered_json::array();
  for (const auto& o : s.objects) {
    objs.push_back({{"shape", to_string(o.shape)}, {"color", to_string(o.color)}, {"x", o.x}, {"y", o.y}, {"size", o.size}});
  }
  return {{"image_size", s.image_size}, {"objects", objs}};
}

/// Detection sidecar content for a scene: each present shape at confidence 1.
inline nlohmann::ordered_json scene_detections(const SceneSpec& s) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& o : s.objects) j[to_string(o.shape)] = 1.0;
  return j;
}

inline void write_shapes_dataset(const ShapesDataset& ds, const std::filesystem::path& dir, bool png_copies = false) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "base");
  fs::create_directories(dir / "pool");
  if (png_copies) {
    fs::create_directories(dir / "png" / "base");
    fs::create_directories(dir / "png" / "pool");
  }
  std::ofstream base(dir / "base" / "base.jsonl", std::ios::binary);
  require(static_cast<bool>(base), Errc::Io, "cannot write " + (dir / "base" / "base.jsonl").string());
  for (const auto& s : ds.samples) {
    const std::string file = s.id + ".ppm";
    write_ppm(s.image, dir / "base" / file);
    std::ofstream det(dir / "base" / (file + ".det.json"), std::ios::binary);
    det << scene_detections(s.scene).dump() << "\n";
    if (png_copies) write_png(s.image, dir / "png" / "base" / (s.id + ".png"));
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["image"] = file;
    j["question"] = s.question.text;
    j["answer"] = s.question.answer;
    j["scene"] = scene_to_json(s.scene);
    base << j.dump() << "\n";
  }
  std::ofstream pool(dir / "pool" / "pool.jsonl", std::ios::binary);
  require(static_cast<bool>(pool), Errc::Io, "cannot write " + (dir / "pool" / "pool.jsonl").string());
  for (const auto& t : ds.pool) {
    const std::string file = t.id + ".ppm";
    write_ppm(t.image, dir / "pool" / file);
    if (png_copies) write_png(t.image, dir / "png" / "pool" / (t.id + ".png"));
    nlohmann::ordered_json j;
    j["image"] = file;
    j["label"] = kTextureLabel;
    pool << j.dump() << "\n";
  }
}

}  // namespace mivqa::synth

namespace mivqa {

namespace detail {

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::Io, "cannot read " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::ManifestInvalid, path.string() + ": " + e.what());
    }
  }
  return out;
}

/// `dir/file` expressed relative to `relative_to` when that is non-empty.
inline std::string make_ref(const std::filesystem::path& dir, const std::string& file,
                            const std::filesystem::path& relative_to) {
  namespace fs = std::filesystem;
  const fs::path full = fs::absolute(dir / file).lexically_normal();
  if (relative_to.empty()) return full.string();
  return full.lexically_relative(fs::absolute(relative_to).lexically_normal()).generic_string();
}

}  // namespace detail

/// Reads DIR/base.jsonl (or DIR/base/base.jsonl) into base items.
inline std::vector<BaseItem> read_base_dir(const std::filesystem::path& dir, const std::filesystem::path& relative_to = {}) {
  namespace fs = std::filesystem;
  const fs::path d = fs::exists(dir / "base.jsonl") ? dir : dir / "base";
  std::vector<BaseItem> out;
  try {
    for (const auto& j : detail::read_jsonl(d / "base.jsonl")) {
      BaseItem item;
      item.image_ref = detail::make_ref(d, j.at("image").get<std::string>(), relative_to);
      item.question = j.at("question").get<std::string>();
      item.answer = j.at("answer").get<std::string>();
      item.id = j.value("id", std::string{});
      out.push_back(std::move(item));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ManifestInvalid, (d / "base.jsonl").string() + ": " + e.what());
  }
  return out;
}

/// Reads DIR/pool.jsonl (or DIR/pool/pool.jsonl) into a distractor pool.
inline DistractorPool read_pool_dir(const std::filesystem::path& dir, const std::filesystem::path& relative_to = {}) {
  namespace fs = std::filesystem;
  const fs::path d = fs::exists(dir / "pool.jsonl") ? dir : dir / "pool";
  DistractorPool pool;
  try {
    for (const auto& j : detail::read_jsonl(d / "pool.jsonl")) {
      pool.add({detail::make_ref(d, j.at("image").get<std::string>(), relative_to), j.at("label").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ManifestInvalid, (d / "pool.jsonl").string() + ": " + e.what());
  }
  return pool;
}

}  // namespace mivqa
