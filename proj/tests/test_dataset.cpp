#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "test_util.hpp"

using namespace mivqa;
using mivqa::testing::TempDir;
namespace fs = std::filesystem;

namespace {

class FixedDetector final : public DetectorClient {
 public:
  explicit FixedDetector(std::map<std::string, double> conf) : conf_(std::move(conf)) {}
  DetectionResult detect(const std::string&) const override { return {conf_}; }
  std::string name() const override { return "fixed"; }

 private:
  std::map<std::string, double> conf_;
};

class BrokenDetector final : public DetectorClient {
 public:
  DetectionResult detect(const std::string&) const override { throw std::runtime_error("service unavailable"); }
  std::string name() const override { return "broken"; }
};

std::vector<BaseItem> base_items(int n) {
  std::vector<BaseItem> out;
  for (int i = 0; i < n; ++i)
    out.push_back({"item-" + std::to_string(i), "base/" + std::to_string(i) + ".ppm", "what is it?",
                   i % 2 ? "red" : "blue"});
  return out;
}

DistractorPool texture_pool(int n) {
  DistractorPool p;
  for (int i = 0; i < n; ++i) p.add({"pool/" + std::to_string(i) + ".ppm", "texture"});
  return p;
}

std::vector<SampleRecord> with_answers(const std::vector<std::pair<std::string, int>>& counts) {
  std::vector<SampleRecord> out;
  for (const auto& [answer, n] : counts)
    for (int i = 0; i < n; ++i) {
      SampleRecord r;
      r.answer = answer;
      out.push_back(r);
    }
  return out;
}

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return Errc::Io;
}

}  // namespace

TEST(AnswerVocab, OrderedByFrequency) {
  const auto v = build_answer_vocab(with_answers({{"red", 1}, {"no", 3}, {"yes", 5}}), 2);
  EXPECT_EQ(v, (std::vector<std::string>{"yes", "no", "<unk>"}));
}

TEST(AnswerVocab, TiesBreakLexicographically) {
  const auto v = build_answer_vocab(with_answers({{"b", 2}, {"a", 2}}), 2);
  EXPECT_EQ(v, (std::vector<std::string>{"a", "b", "<unk>"}));
}

TEST(AnswerVocab, EmptyInputYieldsOnlyUnknown) {
  EXPECT_EQ(build_answer_vocab({}, 5), (std::vector<std::string>{"<unk>"}));
}

TEST(DetectionFilter, ExcludesDetectedClassesOnly) {
  DistractorPool pool;
  pool.add({"a.ppm", "dog"});
  pool.add({"b.ppm", "guitar"});
  pool.add({"c.ppm", "Person"});
  const auto eligible = filter_pool_by_detection("gt.ppm", pool, FixedDetector({{"dog", 0.9}, {"person", 0.8}}));
  ASSERT_EQ(eligible.size(), 1u);
  EXPECT_EQ(eligible[0].label, "guitar");
}

TEST(DetectionFilter, NoDetectionsKeepsWholePool) {
  DistractorPool pool;
  pool.add({"a.ppm", "dog"});
  pool.add({"b.ppm", "guitar"});
  EXPECT_EQ(filter_pool_by_detection("gt.ppm", pool, FixedDetector({})).size(), 2u);
}

TEST(DetectionFilter, NormalisesPluralsAndSynonyms) {
  DistractorPool pool;
  pool.add({"a.ppm", "Dogs"});
  pool.add({"b.ppm", "puppy"});
  pool.add({"c.ppm", "cat"});
  const LabelNormalizer norm(std::map<std::string, std::vector<std::string>>{{"dog", {"puppy"}}});
  const auto eligible = filter_pool_by_detection("gt.ppm", pool, FixedDetector({{" dog ", 1.0}}), norm);
  ASSERT_EQ(eligible.size(), 1u);
  EXPECT_EQ(eligible[0].label, "cat");
}

TEST(DetectionFilter, DetectorErrorsBecomeDetectorFailure) {
  EXPECT_EQ(code_of([] { filter_pool_by_detection("gt.ppm", texture_pool(3), BrokenDetector()); }),
            Errc::DetectorFailure);
}

TEST(Builder, ProducesKPlusOneDistinctImagesPerSample) {
  const Manifest m = build_multi_image_dataset(base_items(10), texture_pool(20), {.k = 3, .seed = 1});
  ASSERT_EQ(m.count(), 10u);
  for (const auto& r : m.samples) {
    EXPECT_EQ(r.image_refs.size(), 4u);
    EXPECT_EQ(std::set<std::string>(r.image_refs.begin(), r.image_refs.end()).size(), 4u);
    ASSERT_GE(r.gt_index, 0);
    ASSERT_LT(r.gt_index, 4);
    EXPECT_EQ(r.source_tags[static_cast<std::size_t>(r.gt_index)], "gt");
  }
  EXPECT_NO_THROW(validate_manifest(m));
}

TEST(Builder, SameSeedGivesByteIdenticalManifest) {
  const auto a = serialize_manifest(build_multi_image_dataset(base_items(30), texture_pool(40), {.k = 3, .seed = 5}));
  const auto b = serialize_manifest(build_multi_image_dataset(base_items(30), texture_pool(40), {.k = 3, .seed = 5}));
  const auto c = serialize_manifest(build_multi_image_dataset(base_items(30), texture_pool(40), {.k = 3, .seed = 6}));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(Builder, GroundTruthPositionIsBalanced) {
  const Manifest m = build_multi_image_dataset(base_items(1000), texture_pool(50), {.k = 3, .seed = 7});
  std::array<int, 4> counts{};
  for (const auto& r : m.samples) ++counts[static_cast<std::size_t>(r.gt_index)];
  for (int c : counts) {
    EXPECT_GE(c / 1000.0, 0.22);
    EXPECT_LE(c / 1000.0, 0.28);
  }
}

TEST(Builder, ErrorsOnEmptyBaseAndSmallPool) {
  EXPECT_EQ(code_of([] { build_multi_image_dataset({}, texture_pool(5), {.k = 3}); }), Errc::EmptyBase);
  EXPECT_EQ(code_of([] { build_multi_image_dataset(base_items(2), texture_pool(2), {.k = 3}); }), Errc::PoolExhausted);
}

TEST(Builder, DetectorFilteringCanExhaustThePool) {
  DistractorPool pool;
  for (int i = 0; i < 5; ++i) pool.add({"p" + std::to_string(i), "dog"});
  pool.add({"q", "cat"});
  const FixedDetector det({{"dog", 1.0}});
  EXPECT_EQ(code_of([&] { build_multi_image_dataset(base_items(1), pool, {.k = 3}, &det); }), Errc::PoolExhausted);
}

TEST(Manifest, RoundTripsThroughText) {
  const Manifest m = build_multi_image_dataset(base_items(5), texture_pool(10), {.k = 2, .seed = 3});
  std::istringstream in(serialize_manifest(m));
  const Manifest back = parse_manifest(in);
  EXPECT_EQ(back.samples, m.samples);
  EXPECT_EQ(back.answer_vocab, m.answer_vocab);
  EXPECT_EQ(back.k, 2);
  EXPECT_EQ(serialize_manifest(back), serialize_manifest(m));
}

TEST(Manifest, RejectsMalformedRecords) {
  Manifest m = build_multi_image_dataset(base_items(3), texture_pool(10), {.k = 3, .seed = 3});
  m.samples[1].image_refs[0] = m.samples[1].image_refs[1];
  std::istringstream dup(serialize_manifest(m));
  EXPECT_EQ(code_of([&] { parse_manifest(dup); }), Errc::ManifestInvalid);
  std::istringstream junk("{\"version\": 1}\nnot json\n");
  EXPECT_EQ(code_of([&] { parse_manifest(junk); }), Errc::ManifestInvalid);
}

TEST(LoadSample, DecodesImagesAndFallsBackToUnknown) {
  TempDir dir("mivqa_dataset_test");
  const auto ds = synth::generate_shapes_dataset({.n_samples = 10, .image_size = 32, .seed = 2});
  synth::write_shapes_dataset(ds, dir.path);
  Manifest m = build_multi_image_dataset(read_base_dir(dir.path, dir.path), read_pool_dir(dir.path, dir.path),
                                         {.k = 3, .seed = 4});
  m.samples[0].answer = "purple";
  write_manifest(m, dir.path / "m.jsonl");
  m.root = dir.path;

  const LoadedSample s = load_sample(m, 0, 16);
  ASSERT_EQ(s.images.size(), 4u);
  for (const auto& im : s.images) {
    EXPECT_EQ(im.width, 16);
    EXPECT_EQ(im.height, 16);
  }
  EXPECT_EQ(s.question, m.samples[0].question);
  EXPECT_EQ(m.answer_vocab[static_cast<std::size_t>(s.answer_index)], "<unk>");
  EXPECT_EQ(s.gt_index, m.samples[0].gt_index);
  EXPECT_EQ(code_of([&] { load_sample(m, 10, 16); }), Errc::IndexOutOfRange);

  fs::remove(m.resolve(m.samples[1].image_refs[2]));
  EXPECT_EQ(code_of([&] { load_sample(m, 1, 16); }), Errc::MissingImage);
}

TEST(SidecarDetector, ReadsDetectionsAndReportsMissingFiles) {
  TempDir dir("mivqa_sidecar_test");
  std::ofstream(dir.path / "x.ppm.det.json") << R"({"circle": 1.0, "Square": 0.5})";
  const SidecarDetector det(dir.path);
  EXPECT_EQ(det.detect("x.ppm").labels(), (std::vector<std::string>{"Square", "circle"}));
  EXPECT_EQ(code_of([&] { det.detect("y.ppm"); }), Errc::DetectorFailure);
  std::ofstream(dir.path / "z.ppm.det.json") << R"({"circle": 3.0})";
  EXPECT_EQ(code_of([&] { det.detect("z.ppm"); }), Errc::DetectorFailure);
}

TEST(CommandDetector, ParsesCommandOutput) {
  const CommandDetector ok("printf '{\"dog\": 0.75}'; true");
  EXPECT_EQ(ok.detect("anything").confidences.at("dog"), 0.75);
  const CommandDetector bad("false");
  EXPECT_EQ(code_of([&] { bad.detect("anything"); }), Errc::DetectorFailure);
}
