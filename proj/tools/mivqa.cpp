#include <filesystem>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mivqa/mivqa.hpp"

namespace fs = std::filesystem;
using namespace mivqa;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

struct SynthArgs {
  std::string out;
  int n = 200;
  std::uint64_t seed = 0;
  int size = 32;
  int pool = 0;
  bool png = false;
};

struct BuildArgs {
  std::string base;
  std::string pool;
  std::string out;
  int k = 3;
  std::uint64_t seed = 0;
  std::string detector;
  std::string detector_cmd;
  std::string synonyms;
  std::size_t max_answers = 1000;
};

struct PredictArgs {
  std::string checkpoint;
  std::string question;
  std::vector<std::string> images;
};

int run_synth(const SynthArgs& a) {
  synth::SynthOptions opt;
  opt.n_samples = a.n;
  opt.seed = a.seed;
  opt.image_size = a.size;
  opt.pool_size = a.pool;
  const auto ds = synth::generate_shapes_dataset(opt);
  synth::write_shapes_dataset(ds, a.out, a.png);
  std::cout << "wrote " << ds.samples.size() << " samples and " << ds.pool.size() << " pool images to " << a.out << "\n";
  return 0;
}

int run_build(const BuildArgs& a) {
  const fs::path out(a.out);
  const fs::path root = out.has_parent_path() ? out.parent_path() : fs::path(".");
  fs::create_directories(root);
  const auto base = read_base_dir(a.base, root);
  const auto pool = read_pool_dir(a.pool, root);
  BuildConfig cfg;
  cfg.k = a.k;
  cfg.seed = a.seed;
  cfg.max_answers = a.max_answers;
  std::unique_ptr<DetectorClient> detector;
  if (a.detector == "stub") {
    detector = std::make_unique<SidecarDetector>(root);
  } else if (a.detector == "cmd") {
    require(!a.detector_cmd.empty(), Errc::ConfigInvalid, "--detector cmd needs --detector-cmd");
    detector = std::make_unique<CommandDetector>(a.detector_cmd, root);
  } else {
    require(a.detector.empty(), Errc::ConfigInvalid, "unknown detector '" + a.detector + "'");
  }
  const LabelNormalizer normalizer = a.synonyms.empty() ? LabelNormalizer() : LabelNormalizer::from_json_file(a.synonyms);
  const Manifest m = build_multi_image_dataset(base, pool, cfg, detector.get(), normalizer);
  write_manifest(m, out);
  std::cout << "wrote " << m.count() << " samples (" << m.answer_vocab.size() << " answers) to " << a.out << "\n";
  return 0;
}

int run_train(const std::string& config) {
  const RunConfig run = load_run_config(config);
  TrainHooks hooks;
  hooks.on_epoch = [](const Metrics& m) {
    std::cout << to_json(m).dump() << std::endl;
    return true;
  };
  const TrainResult r = train<double>(run, hooks);
  std::cout << "last checkpoint " << r.last_checkpoint.string() << "\nbest checkpoint " << r.best_checkpoint.string()
            << " (epoch " << r.best_epoch << ")\n";
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& manifest) {
  std::cout << to_json(evaluate<double>(checkpoint, manifest)).dump() << "\n";
  return 0;
}

int run_predict(const PredictArgs& a) {
  VqaModel<double> model = load_checkpoint<double>(a.checkpoint);
  std::vector<Image> images;
  for (const auto& p : a.images) images.push_back(read_image(p));
  const Prediction pr = model.predict(images, a.question);
  nlohmann::ordered_json j;
  j["answer"] = pr.answer;
  j["image_index"] = pr.image_index;
  j["image_probs"] = pr.image_probs;
  j["answer_probs"] = pr.answer_probs;
  std::cout << j.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-image visual question answering"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "Generate the synthetic shapes dataset");
  synth_cmd->add_option("--out", sa.out, "Output directory")->required();
  synth_cmd->add_option("--n", sa.n, "Number of samples")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--seed", sa.seed, "Random seed");
  synth_cmd->add_option("--size", sa.size, "Image side in pixels")->check(CLI::Range(8, 1024));
  synth_cmd->add_option("--pool", sa.pool, "Texture pool size (0 = max(8, n))")->check(CLI::NonNegativeNumber);
  synth_cmd->add_flag("--png", sa.png, "Also write PNG copies");

  BuildArgs ba;
  auto* build_cmd = app.add_subcommand("build-dataset", "Build a multi-image manifest");
  build_cmd->add_option("--base", ba.base, "Base dataset directory")->required();
  build_cmd->add_option("--pool", ba.pool, "Distractor pool directory")->required();
  build_cmd->add_option("--out", ba.out, "Output manifest path")->required();
  build_cmd->add_option("--k", ba.k, "Distractors per sample")->check(CLI::PositiveNumber);
  build_cmd->add_option("--seed", ba.seed, "Random seed");
  build_cmd->add_option("--detector", ba.detector, "Detection filter")->check(CLI::IsMember({"stub", "cmd"}));
  build_cmd->add_option("--detector-cmd", ba.detector_cmd, "Command printing detections for an image path");
  build_cmd->add_option("--synonyms", ba.synonyms, "Synonym map JSON");
  build_cmd->add_option("--max-answers", ba.max_answers, "Answer vocabulary cap")->check(CLI::PositiveNumber);

  std::string train_config;
  auto* train_cmd = app.add_subcommand("train", "Train from a run config");
  train_cmd->add_option("--config", train_config, "Run config JSON")->required();

  std::string eval_ckpt, eval_manifest;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint .bin")->required();
  eval_cmd->add_option("--manifest", eval_manifest, "Manifest JSONL")->required();

  PredictArgs pa;
  auto* predict_cmd = app.add_subcommand("predict", "Answer a question over candidate images");
  predict_cmd->add_option("--checkpoint", pa.checkpoint, "Checkpoint .bin")->required();
  predict_cmd->add_option("--question", pa.question, "Question text")->required();
  predict_cmd->add_option("--images", pa.images, "Candidate images")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  try {
    if (*synth_cmd) return run_synth(sa);
    if (*build_cmd) return run_build(ba);
    if (*train_cmd) return run_train(train_config);
    if (*eval_cmd) return run_eval(eval_ckpt, eval_manifest);
    if (*predict_cmd) return run_predict(pa);
  } catch (const Error& e) {
    std::cerr << "error [" << errc_name(e.code()) << "]: " << e.what() << "\n";
    return is_validation_error(e.code()) ? kExitValidation : kExitRuntime;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error [ManifestInvalid]: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
