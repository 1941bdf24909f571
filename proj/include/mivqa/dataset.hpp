#pragma once

// Multi-image sample construction: each single-image (image, question,
// answer) item gets k distractor images drawn from a pool, optionally
// restricted to pool classes that an object detector does not find in the
// ground-truth image.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "mivqa/error.hpp"
#include "mivqa/image.hpp"
#include "mivqa/rng.hpp"

namespace mivqa {

inline constexpr const char* kUnknownAnswer = "<unk>";
inline constexpr const char* kGroundTruthTag = "gt";
inline constexpr int kManifestVersion = 1;

struct SampleRecord {
  std::string sample_id;
  std::string question;
  std::string answer;
  std::vector<std::string> image_refs;
  int gt_index = 0;
  std::vector<std::string> source_tags;

  bool operator==(const SampleRecord&) const = default;
};

/// One single-image VQA item of a base source.
struct BaseItem {
  std::string id;
  std::string image_ref;
  std::string question;
  std::string answer;
};

struct PoolEntry {
  std::string image_ref;
  std::string label;

  bool operator==(const PoolEntry&) const = default;
};

class DistractorPool {
 public:
  DistractorPool() = default;
  explicit DistractorPool(std::vector<PoolEntry> entries) {
    for (auto& e : entries) add(std::move(e));
  }

  void add(PoolEntry e) {
    class_vocab_.insert(e.label);
    entries_.push_back(std::move(e));
  }

  const std::vector<PoolEntry>& entries() const { return entries_; }
  const std::set<std::string>& class_vocab() const { return class_vocab_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<PoolEntry> entries_;
  std::set<std::string> class_vocab_;
};

struct DetectionResult {
  std::map<std::string, double> confidences;  // label -> confidence in [0, 1]

  std::vector<std::string> labels() const {
    std::vector<std::string> out;
    for (const auto& [label, conf] : confidences) out.push_back(label);
    return out;
  }
};

/// Object detector run on a ground-truth image reference.
class DetectorClient {
 public:
  virtual ~DetectorClient() = default;
  virtual DetectionResult detect(const std::string& image_ref) const = 0;
  virtual std::string name() const = 0;
};

/// Maps detector and pool class names onto one comparable form.
///
/// Labels are lowercased, trimmed and naively singularised (one trailing "s"
/// dropped). A synonym entry {detector_label: [pool_labels...]} widens what a
/// detection excludes.
class LabelNormalizer {
 public:
  LabelNormalizer() = default;
  explicit LabelNormalizer(const std::map<std::string, std::vector<std::string>>& synonyms) {
    for (const auto& [key, values] : synonyms) {
      auto& dst = synonyms_[normalize(key)];
      for (const auto& v : values) dst.insert(normalize(v));
    }
  }

  static LabelNormalizer from_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), Errc::Io, "cannot read synonym map " + path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::ConfigInvalid, path.string() + ": " + e.what());
    }
    require(j.is_object(), Errc::ConfigInvalid, path.string() + ": synonym map must be a JSON object");
    std::map<std::string, std::vector<std::string>> m;
    for (auto it = j.begin(); it != j.end(); ++it) {
      require(it->is_array(), Errc::ConfigInvalid, path.string() + ": synonyms of " + it.key() + " must be an array");
      m[it.key()] = it->get<std::vector<std::string>>();
    }
    return LabelNormalizer(m);
  }

  static std::string normalize(std::string_view label) {
    std::size_t b = 0;
    std::size_t e = label.size();
    while (b < e && std::isspace(static_cast<unsigned char>(label[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(label[e - 1]))) --e;
    std::string out(label.substr(b, e - b));
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (out.size() > 1 && out.back() == 's') out.pop_back();
    return out;
  }

  /// Normalised pool labels excluded by a detection.
  std::unordered_set<std::string> excluded(const DetectionResult& det) const {
    std::unordered_set<std::string> out;
    for (const auto& [label, conf] : det.confidences) {
      const std::string n = normalize(label);
      out.insert(n);
      if (auto it = synonyms_.find(n); it != synonyms_.end()) out.insert(it->second.begin(), it->second.end());
    }
    return out;
  }

 private:
  std::map<std::string, std::set<std::string>> synonyms_;
};

/// Pool entries whose normalised class matches no detected class.
inline std::vector<PoolEntry> filter_pool_by_detection(const std::string& gt_image_ref, const DistractorPool& pool,
                                                       const DetectorClient& detector,
                                                       const LabelNormalizer& normalizer = {}) {
  DetectionResult det;
  try {
    det = detector.detect(gt_image_ref);
  } catch (const Error& e) {
    if (e.code() == Errc::DetectorFailure) throw;
    fail(Errc::DetectorFailure, gt_image_ref + ": " + e.what());
  } catch (const std::exception& e) {
    fail(Errc::DetectorFailure, gt_image_ref + ": " + e.what());
  }
  const auto excluded = normalizer.excluded(det);
  std::vector<PoolEntry> out;
  for (const auto& e : pool.entries())
    if (!excluded.contains(LabelNormalizer::normalize(e.label))) out.push_back(e);
  return out;
}

/// Most frequent `max_size` answers (ties lexicographic), then `<unk>`.
inline std::vector<std::string> build_answer_vocab(const std::vector<SampleRecord>& samples, std::size_t max_size) {
  require(max_size >= 1, Errc::ConfigInvalid, "answer vocabulary size must be at least 1");
  std::map<std::string, std::size_t> freq;
  for (const auto& s : samples)
    if (s.answer != kUnknownAnswer) ++freq[s.answer];
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> vocab;
  for (std::size_t i = 0; i < ranked.size() && i < max_size; ++i) vocab.push_back(ranked[i].first);
  vocab.emplace_back(kUnknownAnswer);
  return vocab;
}

struct BuildConfig {
  int k = 3;
  std::uint64_t seed = 0;
  std::size_t max_answers = 1000;
};

struct Manifest {
  std::vector<SampleRecord> samples;
  std::vector<std::string> answer_vocab;
  int k = 3;
  std::uint64_t seed = 0;
  std::string filter_mode = "none";
  /// Directory that relative image references resolve against.
  std::filesystem::path root;

  std::size_t count() const { return samples.size(); }

  int answer_index(const std::string& answer) const {
    auto it = std::find(answer_vocab.begin(), answer_vocab.end(), answer);
    if (it == answer_vocab.end()) it = std::find(answer_vocab.begin(), answer_vocab.end(), kUnknownAnswer);
    return static_cast<int>(it - answer_vocab.begin());
  }

  std::filesystem::path resolve(const std::string& ref) const {
    std::filesystem::path p(ref);
    return p.is_absolute() || root.empty() ? p : root / p;
  }
};

/// Builds one multi-image sample per base item. Sample `i` draws its
/// randomness from (seed, i) alone, so output is independent of build order.
inline Manifest build_multi_image_dataset(const std::vector<BaseItem>& base, const DistractorPool& pool,
                                          const BuildConfig& cfg, const DetectorClient* detector = nullptr,
                                          const LabelNormalizer& normalizer = {}) {
  require(cfg.k >= 1, Errc::ConfigInvalid, "k must be at least 1");
  require(!base.empty(), Errc::EmptyBase, "base source yielded no items");
  Manifest m;
  m.k = cfg.k;
  m.seed = cfg.seed;
  m.filter_mode = detector ? detector->name() : "none";
  m.samples.reserve(base.size());
  const auto k = static_cast<std::size_t>(cfg.k);
  for (std::size_t i = 0; i < base.size(); ++i) {
    const BaseItem& item = base[i];
    Rng rng(cfg.seed, i);
    std::vector<PoolEntry> eligible = detector ? filter_pool_by_detection(item.image_ref, pool, *detector, normalizer)
                                               : pool.entries();
    std::erase_if(eligible, [&](const PoolEntry& e) { return e.image_ref == item.image_ref; });
    // duplicate references in the pool would break distinctness
    std::sort(eligible.begin(), eligible.end(),
              [](const PoolEntry& a, const PoolEntry& b) { return std::tie(a.image_ref, a.label) < std::tie(b.image_ref, b.label); });
    eligible.erase(std::unique(eligible.begin(), eligible.end(),
                               [](const PoolEntry& a, const PoolEntry& b) { return a.image_ref == b.image_ref; }),
                   eligible.end());
    if (eligible.size() < k) {
      fail(Errc::PoolExhausted, "item " + std::to_string(i) + " (" + item.image_ref + ") has " +
                                    std::to_string(eligible.size()) + " eligible distractors, needs " + std::to_string(k));
    }
    const int gt = static_cast<int>(rng.index(k + 1));
    for (std::size_t j = 0; j < k; ++j) std::swap(eligible[j], eligible[j + rng.index(eligible.size() - j)]);

    SampleRecord rec;
    rec.sample_id = item.id.empty() ? "sample-" + std::to_string(i) : item.id;
    rec.question = item.question;
    rec.answer = item.answer;
    rec.gt_index = gt;
    std::size_t next = 0;
    for (std::size_t pos = 0; pos <= k; ++pos) {
      if (static_cast<int>(pos) == gt) {
        rec.image_refs.push_back(item.image_ref);
        rec.source_tags.emplace_back(kGroundTruthTag);
      } else {
        rec.image_refs.push_back(eligible[next].image_ref);
        rec.source_tags.push_back("distractor:" + eligible[next].label);
        ++next;
      }
    }
    m.samples.push_back(std::move(rec));
  }
  m.answer_vocab = build_answer_vocab(m.samples, cfg.max_answers);
  return m;
}

/// Checks the per-record invariants; throws ManifestInvalid.
inline void validate_record(const SampleRecord& r, int k) {
  const std::string where = "sample " + r.sample_id + ": ";
  require(r.image_refs.size() == static_cast<std::size_t>(k) + 1, Errc::ManifestInvalid,
          where + "expected " + std::to_string(k + 1) + " images, got " + std::to_string(r.image_refs.size()));
  require(r.gt_index >= 0 && r.gt_index <= k, Errc::ManifestInvalid, where + "gt_index out of range");
  require(r.source_tags.size() == r.image_refs.size(), Errc::ManifestInvalid, where + "one source tag per image required");
  require(std::count(r.source_tags.begin(), r.source_tags.end(), kGroundTruthTag) == 1 &&
              r.source_tags[static_cast<std::size_t>(r.gt_index)] == kGroundTruthTag,
          Errc::ManifestInvalid, where + "ground-truth tag must appear exactly once, at gt_index");
  std::set<std::string> distinct(r.image_refs.begin(), r.image_refs.end());
  require(distinct.size() == r.image_refs.size(), Errc::ManifestInvalid, where + "image references are not distinct");
  require(!r.question.empty(), Errc::ManifestInvalid, where + "empty question");
}

inline void validate_manifest(const Manifest& m) {
  require(m.k >= 1, Errc::ManifestInvalid, "k must be at least 1");
  require(std::find(m.answer_vocab.begin(), m.answer_vocab.end(), kUnknownAnswer) != m.answer_vocab.end(),
          Errc::ManifestInvalid, "answer vocabulary lacks <unk>");
  const std::set<std::string> vocab(m.answer_vocab.begin(), m.answer_vocab.end());
  std::set<std::string> ids;
  for (const auto& r : m.samples) {
    validate_record(r, m.k);
    require(vocab.contains(r.answer) || r.answer == kUnknownAnswer, Errc::ManifestInvalid,
            "sample " + r.sample_id + ": answer '" + r.answer + "' outside the answer vocabulary");
    require(ids.insert(r.sample_id).second, Errc::ManifestInvalid, "duplicate sample_id " + r.sample_id);
  }
}

/// JSON Lines: a header object, then one object per sample.
inline std::string serialize_manifest(const Manifest& m) {
  using ojson = nlohmann::ordered_json;
  std::string out;
  ojson header;
  header["version"] = kManifestVersion;
  header["k"] = m.k;
  header["seed"] = m.seed;
  header["filter_mode"] = m.filter_mode;
  header["answer_vocab"] = m.answer_vocab;
  header["count"] = m.samples.size();
  out += header.dump() + "\n";
  for (const auto& r : m.samples) {
    ojson j;
    j["sample_id"] = r.sample_id;
    j["question"] = r.question;
    j["answer"] = r.answer;
    j["image_refs"] = r.image_refs;
    j["gt_index"] = r.gt_index;
    j["source_tags"] = r.source_tags;
    out += j.dump() + "\n";
  }
  return out;
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), Errc::Io, "cannot write " + path.string());
  out << serialize_manifest(m);
  require(static_cast<bool>(out), Errc::Io, "write failed for " + path.string());
}

inline Manifest parse_manifest(std::istream& in, const std::filesystem::path& root = {}) {
  Manifest m;
  m.root = root;
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), Errc::ManifestInvalid, "missing header line");
  std::size_t declared = 0;
  try {
    const auto h = nlohmann::json::parse(line);
    require(h.at("version").get<int>() == kManifestVersion, Errc::ManifestInvalid, "unsupported manifest version");
    m.k = h.at("k").get<int>();
    m.seed = h.at("seed").get<std::uint64_t>();
    m.filter_mode = h.at("filter_mode").get<std::string>();
    m.answer_vocab = h.at("answer_vocab").get<std::vector<std::string>>();
    declared = h.at("count").get<std::size_t>();
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      SampleRecord r;
      r.sample_id = j.at("sample_id").get<std::string>();
      r.question = j.at("question").get<std::string>();
      r.answer = j.at("answer").get<std::string>();
      r.image_refs = j.at("image_refs").get<std::vector<std::string>>();
      r.gt_index = j.at("gt_index").get<int>();
      r.source_tags = j.at("source_tags").get<std::vector<std::string>>();
      m.samples.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ManifestInvalid, e.what());
  }
  require(declared == m.samples.size(), Errc::ManifestInvalid,
          "header declares " + std::to_string(declared) + " samples, found " + std::to_string(m.samples.size()));
  validate_manifest(m);
  return m;
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::ManifestInvalid, "cannot open manifest " + path.string());
  return parse_manifest(in, path.parent_path());
}

struct LoadedSample {
  std::vector<Image> images;
  std::string question;
  int answer_index = 0;
  int gt_index = 0;
};

/// Decodes sample `index`, resizing every image to image_size x image_size.
inline LoadedSample load_sample(const Manifest& m, std::size_t index, int image_size) {
  require(index < m.samples.size(), Errc::IndexOutOfRange,
          "sample " + std::to_string(index) + " of a " + std::to_string(m.samples.size()) + "-sample manifest");
  const auto& r = m.samples[index];
  LoadedSample out;
  for (const auto& ref : r.image_refs) {
    Image img;
    try {
      img = read_image(m.resolve(ref));
    } catch (const Error& e) {
      fail(Errc::MissingImage, ref + " (" + e.what() + ")");
    }
    out.images.push_back(resize_nearest(img, image_size, image_size));
  }
  out.question = r.question;
  out.answer_index = m.answer_index(r.answer);
  out.gt_index = r.gt_index;
  return out;
}

// ---------------------------------------------------------------------------
// detectors

/// Reads detections from a JSON sidecar next to the image:
/// `<image>.det.json` = {"label": confidence, ...}.
class SidecarDetector final : public DetectorClient {
 public:
  explicit SidecarDetector(std::filesystem::path root = {}) : root_(std::move(root)) {}

  static std::filesystem::path sidecar_for(const std::filesystem::path& image) {
    return std::filesystem::path(image.string() + ".det.json");
  }

  DetectionResult detect(const std::string& image_ref) const override {
    std::filesystem::path p(image_ref);
    if (!p.is_absolute() && !root_.empty()) p = root_ / p;
    const auto side = sidecar_for(p);
    std::ifstream in(side);
    require(static_cast<bool>(in), Errc::DetectorFailure, image_ref + ": no detection sidecar " + side.string());
    try {
      nlohmann::json j;
      in >> j;
      return parse_detection(j);
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::DetectorFailure, image_ref + ": " + e.what());
    }
  }

  static DetectionResult parse_detection(const nlohmann::json& j) {
    require(j.is_object(), Errc::DetectorFailure, "detection must be a JSON object of label -> confidence");
    DetectionResult r;
    for (auto it = j.begin(); it != j.end(); ++it) {
      const double c = it->get<double>();
      require(c >= 0.0 && c <= 1.0, Errc::DetectorFailure, "confidence of " + it.key() + " outside [0,1]");
      r.confidences[it.key()] = c;
    }
    return r;
  }

  std::string name() const override { return "stub"; }

 private:
  std::filesystem::path root_;
};

/// Runs `command <image path>` and parses its stdout as a detection object.
/// This is the slot for an external detection model or service wrapper.
class CommandDetector final : public DetectorClient {
 public:
  CommandDetector(std::string command, std::filesystem::path root = {}) : command_(std::move(command)), root_(std::move(root)) {}

  DetectionResult detect(const std::string& image_ref) const override {
    std::filesystem::path p(image_ref);
    if (!p.is_absolute() && !root_.empty()) p = root_ / p;
    const std::string cmd = command_ + " '" + p.string() + "'";
    std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen(cmd.c_str(), "r"), pclose);
    require(pipe != nullptr, Errc::DetectorFailure, image_ref + ": cannot run " + command_);
    std::string output;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof(buf), pipe.get())) output.append(buf, n);
    const int status = pclose(pipe.release());
    require(status == 0, Errc::DetectorFailure, image_ref + ": detector command exited with status " + std::to_string(status));
    try {
      return SidecarDetector::parse_detection(nlohmann::json::parse(output));
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::DetectorFailure, image_ref + ": " + e.what());
    }
  }

  std::string name() const override { return "cmd"; }

 private:
  std::string command_;
  std::filesystem::path root_;
};

}  // namespace mivqa
