#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qflow/errors.hpp"
#include "qflow/parallel.hpp"
#include "qflow/policy.hpp"
#include "qflow/textio.hpp"

namespace qflow {

struct GrpoConfig {
  double clip = 0.2;
  double kl_coeff = 0.04;
  int group_size = 8;
  int scores_per_trace = 4;
  double learning_rate = 0.01;
  int inner_epochs = 1;
  double std_floor = 1e-8;
  /// Literal reading of the objective with the KL term inside the min.
  bool kl_inside_min = false;
};

inline void validate(const GrpoConfig& c) {
  if (!(c.clip > 0.0 && c.clip < 1.0)) throw InvalidInput("grpo.clip must be in (0,1)");
  if (!(c.kl_coeff >= 0.0)) throw InvalidInput("grpo.kl_coeff must be non-negative");
  if (c.group_size < 2) throw InvalidInput("grpo.group_size must be at least 2");
  if (c.scores_per_trace < 1) throw InvalidInput("grpo.scores_per_trace must be at least 1");
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate))
    throw InvalidInput("grpo.learning_rate must be finite and non-negative");
  if (c.inner_epochs < 1) throw InvalidInput("grpo.inner_epochs must be at least 1");
  if (!(c.std_floor > 0.0)) throw InvalidInput("grpo.std_floor must be positive");
}

/// Group-normalized advantages (r - mean) / max(population std, std_floor).
/// A group whose rewards are all equal gets all-zero advantages.
inline std::vector<double> advantages(std::span<const double> rewards, double std_floor) {
  if (rewards.size() < 2) throw InvalidInput("advantages need a group of at least 2 rewards");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(rewards.size(), 0.0);
  const bool all_equal = std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; });
  if (all_equal || sd < std_floor) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / std::max(sd, std_floor);
  return out;
}

inline constexpr double kMinRatio = 1e-6;
inline constexpr double kMaxRatio = 1e6;

/// Probability ratio exp(logp_current - logp_old), clamped to [1e-6, 1e6].
inline double ratio(double logp_current, double logp_old, bool* clamped = nullptr) {
  const double d = std::exp(logp_current - logp_old);
  const double c = std::clamp(d, kMinRatio, kMaxRatio);
  if (clamped) *clamped = c != d;
  return c;
}

/// min(d A, clip(d, 1-eps, 1+eps) A)
inline double clipped_term(double d, double adv, double eps) {
  return std::min(d * adv, std::clamp(d, 1.0 - eps, 1.0 + eps) * adv);
}

/// Exact per-step KL(current || reference) summed over the trajectory's action steps.
inline double kl_penalty(const PolicyParams& p, const PolicyParams& ref, const Trajectory& t) {
  return evaluate_trajectory(p, &ref, t).kl;
}

struct RolloutCandidate {
  Trajectory trajectory;
  double reward = 0.0;
  double logprob_current = 0.0;
  double logprob_old = 0.0;
  double logprob_ref = 0.0;
};

/// Candidates sharing one conditioning input. `weight` scales the group's
/// contribution to a combined objective.
struct RolloutGroup {
  std::vector<RolloutCandidate> candidates;
  std::optional<std::vector<double>> advantages;
  double weight = 1.0;

  std::vector<double> rewards() const {
    std::vector<double> r;
    r.reserve(candidates.size());
    for (const auto& c : candidates) r.push_back(c.reward);
    return r;
  }
};

inline void compute_advantages(RolloutGroup& g, double std_floor) { g.advantages = advantages(g.rewards(), std_floor); }

namespace detail {

struct CandidateTerm {
  double value = 0.0;
  double coef_logprob = 0.0;  // multiplies ∇logπ
  double coef_kl = 0.0;       // multiplies ∇KL
  bool clip_binding = false;
  bool ratio_clamped = false;
};

inline CandidateTerm candidate_term(double logp_current, double logp_old, double adv, double kl, const GrpoConfig& cfg) {
  CandidateTerm t;
  const double d = ratio(logp_current, logp_old, &t.ratio_clamped);
  const double lo = 1.0 - cfg.clip;
  const double hi = 1.0 + cfg.clip;
  const double clipped = std::clamp(d, lo, hi) * adv;
  const double plain = d * adv;
  const bool in_band = d >= lo && d <= hi;
  // The ratio derivative vanishes once clamped to its safety range.
  const double dplain = t.ratio_clamped ? 0.0 : plain;
  if (!cfg.kl_inside_min) {
    t.clip_binding = clipped < plain;
    t.value = std::min(plain, clipped) - cfg.kl_coeff * kl;
    t.coef_logprob = t.clip_binding ? 0.0 : dplain;
    t.coef_kl = -cfg.kl_coeff;
  } else {
    const double second = clipped - cfg.kl_coeff * kl;
    if (plain <= second) {
      t.value = plain;
      t.coef_logprob = dplain;
    } else {
      t.value = second;
      t.clip_binding = !in_band;
      t.coef_logprob = in_band ? dplain : 0.0;
      t.coef_kl = -cfg.kl_coeff;
    }
  }
  return t;
}

}  // namespace detail

/// (1/N) Σ_i [min(d_i A_i, clip(d_i) A_i) - kl_coeff KL_i] from the stored
/// current/old logprobs. The group weight is not applied.
inline double grpo_objective(const RolloutGroup& g, const GrpoConfig& cfg, std::span<const double> kl_values) {
  if (!g.advantages) throw InvalidInput("group advantages have not been computed");
  if (g.advantages->size() != g.candidates.size() || kl_values.size() != g.candidates.size())
    throw InvalidInput("advantages, kl values and candidates must have equal length");
  if (g.candidates.empty()) throw InvalidInput("empty rollout group");
  double sum = 0.0;
  for (std::size_t i = 0; i < g.candidates.size(); ++i) {
    const auto& c = g.candidates[i];
    sum += detail::candidate_term(c.logprob_current, c.logprob_old, (*g.advantages)[i], kl_values[i], cfg).value;
  }
  return sum / static_cast<double>(g.candidates.size());
}

struct UpdateResult {
  PolicyParams params;
  /// Σ_g weight_g J_g, evaluated before the first step.
  double objective = 0.0;
  /// Mean per-candidate KL to the reference before the first step.
  double kl = 0.0;
  double clip_fraction = 0.0;
  std::size_t degenerate_groups = 0;
  std::size_t ratio_clamps = 0;
  /// Unweighted J_g per group, evaluated before the first step.
  std::vector<double> group_objectives;
};

/// Gradient ascent on Σ_g weight_g J_g for cfg.inner_epochs steps. Groups
/// need advantages (computed here when absent) and logprob_old set. Old and
/// reference snapshots are left untouched; the input params are not modified.
inline UpdateResult grpo_update(const PolicyParams& p, const PolicyParams& ref, std::span<RolloutGroup> groups,
                                const GrpoConfig& cfg) {
  validate(cfg);
  UpdateResult res;
  res.params = p;
  for (auto& g : groups) {
    if (!g.advantages) compute_advantages(g, cfg.std_floor);
    if (g.advantages->size() != g.candidates.size()) throw InvalidInput("advantage count mismatch");
    if (std::all_of(g.advantages->begin(), g.advantages->end(), [](double a) { return a == 0.0; }))
      ++res.degenerate_groups;
  }

  struct GroupPass {
    std::optional<PolicyParams> grad;
    double objective = 0.0;
    double kl_sum = 0.0;
    std::size_t clipped = 0;
    std::size_t clamps = 0;
  };

  for (int epoch = 0; epoch < cfg.inner_epochs; ++epoch) {
    const PolicyParams& cur = res.params;
    std::vector<GroupPass> passes(groups.size());
    parallel_for(groups.size(), [&](std::size_t gi) {
      auto& g = groups[gi];
      auto& out = passes[gi];
      const double n = static_cast<double>(g.candidates.size());
      const bool need_grad = g.weight != 0.0;
      for (std::size_t i = 0; i < g.candidates.size(); ++i) {
        auto& c = g.candidates[i];
        const auto v = evaluate_trajectory(cur, &ref, c.trajectory);
        c.logprob_current = v.logprob;
        const auto term = detail::candidate_term(v.logprob, c.logprob_old, (*g.advantages)[i], v.kl, cfg);
        out.objective += term.value / n;
        out.kl_sum += v.kl;
        out.clipped += term.clip_binding ? 1 : 0;
        out.clamps += term.ratio_clamped ? 1 : 0;
        if (!need_grad || (term.coef_logprob == 0.0 && term.coef_kl == 0.0)) continue;
        if (!out.grad) out.grad = cur.zeros_like();
        const double scale = g.weight / n;
        evaluate_trajectory(cur, &ref, c.trajectory, &*out.grad, scale * term.coef_logprob, scale * term.coef_kl);
      }
    });

    auto total = cur.zeros_like();
    double objective = 0.0;
    double kl_sum = 0.0;
    std::size_t clipped = 0;
    std::size_t count = 0;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      if (passes[gi].grad) total.axpy(1.0, *passes[gi].grad);
      objective += groups[gi].weight * passes[gi].objective;
      kl_sum += passes[gi].kl_sum;
      clipped += passes[gi].clipped;
      res.ratio_clamps += passes[gi].clamps;
      count += groups[gi].candidates.size();
    }
    if (!std::isfinite(objective) || !total.all_finite())
      throw NumericalError("non-finite GRPO objective or gradient at inner epoch " + std::to_string(epoch));
    if (epoch == 0) {
      res.objective = objective;
      for (const auto& gp : passes) res.group_objectives.push_back(gp.objective);
      res.kl = count ? kl_sum / static_cast<double>(count) : 0.0;
    }
    if (count) res.clip_fraction += static_cast<double>(clipped) / static_cast<double>(count);
    res.params.axpy(cfg.learning_rate, total);
  }
  res.clip_fraction /= cfg.inner_epochs;
  if (res.ratio_clamps)
    std::clog << "warning: " << res.ratio_clamps << " probability ratio(s) clamped to [1e-6, 1e6]\n";
  return res;
}

}  // namespace qflow
