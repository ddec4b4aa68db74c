#pragma once

#include <cmath>
#include <numbers>
#include <span>

#include "qflow/captions.hpp"
#include "qflow/errors.hpp"

namespace qflow {

struct RewardConfig {
  double tolerance = 1.0;
  double format_weight = 1.0;
};

inline void validate(const RewardConfig& c) {
  if (!(c.tolerance > 0.0) || !std::isfinite(c.tolerance)) throw InvalidInput("reward tolerance must be positive");
  if (!(c.format_weight >= 0.0) || !std::isfinite(c.format_weight))
    throw InvalidInput("format_weight must be non-negative");
}

/// Cosine tolerance reward: 0.5 (1 + cos(pi x / t)) for x = |pred - mos| < t, else 0.
inline double tolerance_reward(double pred, double mos, double t) {
  if (!(t > 0.0)) throw InvalidInput("tolerance must be positive");
  if (!std::isfinite(pred) || !std::isfinite(mos)) throw InvalidInput("score and mos must be finite");
  const double x = std::abs(pred - mos);
  if (x >= t) return 0.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * x / t));
}

/// Mean tolerance reward of the M score predictions made from one reasoning trace.
inline double trace_reward(std::span<const double> scores, double mos, double t) {
  if (scores.empty()) throw InvalidInput("trace_reward needs at least one score");
  double sum = 0.0;
  for (double s : scores) sum += tolerance_reward(s, mos, t);
  return sum / static_cast<double>(scores.size());
}

/// 1 iff the caption is EOS-terminated within the length limit and a score was emitted.
inline double format_reward(const Caption& caption, bool score_emitted, TokenId eos, std::size_t max_len) {
  return caption.complete(eos) && caption.size() <= max_len && score_emitted ? 1.0 : 0.0;
}

}  // namespace qflow
