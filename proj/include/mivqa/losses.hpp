#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

#include "mivqa/autodiff.hpp"
#include "mivqa/config.hpp"
#include "mivqa/error.hpp"

namespace mivqa {

inline constexpr double kProbClamp = 1e-9;

/// -log of the target-class probability, clamped at kProbClamp.
template <typename T>
T cross_entropy(std::span<const T> probs, int target) {
  require(target >= 0 && static_cast<std::size_t>(target) < probs.size(), Errc::TargetOutOfRange,
          "target " + std::to_string(target) + " outside [0," + std::to_string(probs.size()) + ")");
  return -std::log(std::max(probs[static_cast<std::size_t>(target)], static_cast<T>(kProbClamp)));
}

/// Word CE + lambda * image CE.
template <typename T>
T combined_loss(std::span<const T> answer_probs, std::span<const T> image_probs, int answer_target, int image_target,
                double lambda) {
  require(lambda >= 0.0, Errc::ConfigInvalid, "lambda must be non-negative");
  return cross_entropy(answer_probs, answer_target) + static_cast<T>(lambda) * cross_entropy(image_probs, image_target);
}

/// Graph form of combined_loss; returns a scalar node.
template <typename T>
ag::Var combined_loss(ag::Graph<T>& g, ag::Var answer_probs, ag::Var image_probs, int answer_target, int image_target,
                      double lambda) {
  require(lambda >= 0.0, Errc::ConfigInvalid, "lambda must be non-negative");
  const ag::Var word = ag::nll_of_probs(g, answer_probs, answer_target, static_cast<T>(kProbClamp));
  const ag::Var image = ag::nll_of_probs(g, image_probs, image_target, static_cast<T>(kProbClamp));
  const ag::Var terms[] = {word, image};
  const T weights[] = {T(1), static_cast<T>(lambda)};
  return ag::weighted_sum<T>(g, terms, weights);
}

/// Image-loss weight for `epoch` (0-based).
inline double anneal_lambda(int epoch, const LossConfig& cfg) {
  switch (cfg.mode) {
    case LossMode::WordOnly: return 0.0;
    case LossMode::Combined: return cfg.lambda0;
    case LossMode::Annealed: return std::max(cfg.lambda_min, cfg.lambda0 * std::pow(cfg.gamma, epoch));
  }
  return 0.0;
}

}  // namespace mivqa
