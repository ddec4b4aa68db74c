#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "fixtures.hpp"
#include "qflow/grpo.hpp"

using namespace qflow;
using Catch::Approx;

namespace {

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

double pop_std(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / v.size());
}

// A group of sampled (caption, score) trajectories from one image.
RolloutGroup sampled_group(const PolicyParams& p, std::uint64_t seed, const std::vector<double>& rewards) {
  Rng rng(seed);
  Conditioning c{fixture::random_vec(rng, p.dims.features), std::nullopt};
  RolloutGroup g;
  const auto caps = sample_captions(p, c, static_cast<int>(rewards.size()), 1.0, rng);
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    RolloutCandidate cand;
    cand.trajectory = Trajectory{c, caps[i], true, static_cast<int>(rng.index(17)), true};
    cand.reward = rewards[i];
    cand.logprob_old = sequence_logprob(p, cand.trajectory);
    cand.logprob_current = cand.logprob_old;
    g.candidates.push_back(cand);
  }
  return g;
}

}  // namespace

TEST_CASE("advantage examples") {
  CHECK(advantages(std::vector<double>{1, 1, 1, 1}, 1e-8) == std::vector<double>{0, 0, 0, 0});
  const auto a = advantages(std::vector<double>{1, 0}, 1e-8);
  CHECK(a[0] == Approx(1.0).margin(1e-12));
  CHECK(a[1] == Approx(-1.0).margin(1e-12));
  const auto b = advantages(std::vector<double>{2, 0, 1}, 1e-8);
  CHECK(b[0] == Approx(1.2247).margin(1e-4));
  CHECK(b[1] == Approx(-1.2247).margin(1e-4));
  CHECK(b[2] == Approx(0.0).margin(1e-12));
  CHECK_THROWS_AS(advantages(std::vector<double>{1}, 1e-8), InvalidInput);
}

TEST_CASE("advantages are standardized and shift invariant") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> r(2 + rng.index(15));
    for (auto& x : r) x = rng.uniform(-3, 3);
    const auto a = advantages(r, 1e-8);
    CHECK(std::abs(mean(a)) < 1e-9);
    CHECK(pop_std(a) == Approx(1.0).margin(1e-6));
    // Power-of-two shifts are exact in floating point.
    auto shifted = r;
    for (auto& x : shifted) x += 4.0;
    const auto b = advantages(shifted, 1e-8);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == Approx(a[i]).margin(1e-12));
  }
}

TEST_CASE("ratio examples and clamping") {
  CHECK(ratio(-3.0, -3.0) == 1.0);
  CHECK(ratio(std::log(2.0), 0.0) == Approx(2.0).margin(1e-15));
  CHECK(ratio(-std::log(4.0), 0.0) == Approx(0.25).margin(1e-15));
  bool clamped = false;
  CHECK(ratio(100.0, 0.0, &clamped) == kMaxRatio);
  CHECK(clamped);
  CHECK(ratio(-100.0, 0.0, &clamped) == kMinRatio);
  CHECK(clamped);
  ratio(0.1, 0.0, &clamped);
  CHECK_FALSE(clamped);
}

TEST_CASE("clipped term over sign and band cases") {
  // Positive advantage: above band, inside band, below band.
  CHECK(clipped_term(1.5, 1.0, 0.2) == Approx(1.2));
  CHECK(clipped_term(1.0, 1.0, 0.2) == Approx(1.0));
  CHECK(clipped_term(0.5, 1.0, 0.2) == Approx(0.5));
  // Negative advantage: above band, inside band, below band.
  CHECK(clipped_term(1.5, -1.0, 0.2) == Approx(-1.5));
  CHECK(clipped_term(1.0, -2.0, 0.2) == Approx(-2.0));
  CHECK(clipped_term(0.5, -1.0, 0.2) == Approx(-0.8));
}

TEST_CASE("clip bound") {
  Rng rng(2);
  for (int i = 0; i < 500; ++i) {
    const double d = rng.uniform(0, 3), a = rng.uniform(-3, 3), e = rng.uniform(0.01, 0.99);
    CHECK(std::abs(clipped_term(d, a, e)) <= std::max(std::abs(d * a), (1 + e) * std::abs(a)) + 1e-15);
  }
}

TEST_CASE("exact KL is non-negative and zero on identical policies") {
  const ModelDims dims;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto in = fixture::random_instance(dims, 3000 + s);
    const auto ref = init_params(dims, 7000 + s, 0.4);
    CHECK(kl_penalty(in.params, ref, in.trajectory) >= 0.0);
    CHECK(std::abs(kl_penalty(in.params, in.params, in.trajectory)) <= 1e-12);
  }
}

TEST_CASE("objective examples") {
  RolloutGroup g;
  g.candidates.resize(2);
  g.candidates[0].reward = 1.0;
  g.candidates[1].reward = 0.0;
  compute_advantages(g, 1e-8);
  GrpoConfig cfg;
  cfg.kl_coeff = 0.0;
  const std::vector<double> zero_kl = {0.0, 0.0};
  CHECK(grpo_objective(g, cfg, zero_kl) == Approx(0.0).margin(1e-15));
  cfg.kl_coeff = 0.04;
  const std::vector<double> half = {0.5, 0.5};
  CHECK(grpo_objective(g, cfg, half) == Approx(-0.02).margin(1e-15));

  RolloutGroup flat;
  flat.candidates.resize(3);
  compute_advantages(flat, 1e-8);
  cfg.kl_coeff = 0.0;
  CHECK(grpo_objective(flat, cfg, std::vector<double>{0.2, 0.1, 0.3}) == 0.0);
  CHECK_THROWS_AS(grpo_objective(flat, cfg, zero_kl), InvalidInput);
  RolloutGroup missing;
  missing.candidates.resize(2);
  CHECK_THROWS_AS(grpo_objective(missing, cfg, zero_kl), InvalidInput);
}

TEST_CASE("objective with the KL term inside the min") {
  RolloutGroup g;
  g.candidates.resize(2);
  g.candidates[0].reward = 1.0;
  g.candidates[1].reward = 0.0;
  // Ratio 0.5 on the positive candidate: min(0.5, 0.8 - 0.04 * 0.5) keeps the plain term, no KL.
  g.candidates[0].logprob_current = std::log(0.5);
  compute_advantages(g, 1e-8);
  GrpoConfig cfg;
  cfg.kl_inside_min = true;
  const std::vector<double> kl = {0.5, 0.5};
  // Second candidate: d=1, A=-1 -> min(-1, -1 - 0.02) = -1.02.
  CHECK(grpo_objective(g, cfg, kl) == Approx((0.5 - 1.02) / 2).margin(1e-12));
  cfg.kl_inside_min = false;
  CHECK(grpo_objective(g, cfg, kl) == Approx((0.5 - 0.02 - 1.0 - 0.02) / 2).margin(1e-12));
}

TEST_CASE("zero advantages and zero KL weight leave params unchanged") {
  const auto p = init_params(ModelDims{}, 41);
  std::vector<RolloutGroup> groups = {sampled_group(p, 1, {0.5, 0.5, 0.5, 0.5})};
  GrpoConfig cfg;
  cfg.kl_coeff = 0.0;
  const auto res = grpo_update(p, p, groups, cfg);
  CHECK(res.params == p);
  CHECK(res.degenerate_groups == 1);
}

TEST_CASE("positive advantage raises the candidate's log-probability") {
  const auto p = init_params(ModelDims{}, 42, 0.2);
  std::vector<RolloutGroup> groups = {sampled_group(p, 2, {1.0, 0.0, 0.0, 0.0})};
  GrpoConfig cfg;
  cfg.kl_coeff = 0.0;
  cfg.learning_rate = 1e-3;
  const auto& best = groups[0].candidates[0].trajectory;
  const double before = sequence_logprob(p, best);
  const auto res = grpo_update(p, p, groups, cfg);
  CHECK(sequence_logprob(res.params, best) > before);
}

TEST_CASE("one small step does not decrease the objective") {
  const auto p = init_params(ModelDims{}, 43, 0.2);
  const auto ref = init_params(ModelDims{}, 44, 0.2);
  std::vector<RolloutGroup> groups = {sampled_group(p, 3, {0.9, 0.1, 0.4, 0.7}), sampled_group(p, 4, {0.0, 1.0, 0.3, 0.2})};
  GrpoConfig cfg;
  cfg.learning_rate = 1e-3;
  const auto step = grpo_update(p, ref, groups, cfg);
  // Evaluate the objective at the new params against the same old logprobs.
  auto again = groups;
  GrpoConfig frozen = cfg;
  frozen.learning_rate = 0.0;
  const auto after = grpo_update(step.params, ref, again, frozen);
  CHECK(after.objective >= step.objective);
}

TEST_CASE("first step is on-policy") {
  const auto p = init_params(ModelDims{}, 45, 0.2);
  std::vector<RolloutGroup> groups = {sampled_group(p, 5, {1.0, 0.2, 0.5, 0.0})};
  GrpoConfig cfg;
  const auto res = grpo_update(p, p, groups, cfg);
  CHECK(res.clip_fraction == 0.0);
  CHECK(res.ratio_clamps == 0);
  for (const auto& c : groups[0].candidates) CHECK(c.logprob_current == c.logprob_old);
}

TEST_CASE("several inner epochs exercise clipping") {
  const auto p = init_params(ModelDims{}, 46, 0.2);
  std::vector<RolloutGroup> groups = {sampled_group(p, 6, {1.0, 0.0, 0.5, 0.2, 0.9, 0.1, 0.3, 0.6})};
  GrpoConfig cfg;
  cfg.inner_epochs = 6;
  cfg.learning_rate = 2.0;
  const auto res = grpo_update(p, p, groups, cfg);
  CHECK(res.clip_fraction > 0.0);
  CHECK(res.params.all_finite());
}

TEST_CASE("group weight scales the update linearly") {
  const auto p = init_params(ModelDims{}, 47, 0.2);
  GrpoConfig cfg;
  cfg.kl_coeff = 0.0;
  std::vector<RolloutGroup> g1 = {sampled_group(p, 7, {1.0, 0.0, 0.5})};
  std::vector<RolloutGroup> g2 = g1;
  g2[0].weight = 2.0;
  auto d1 = grpo_update(p, p, g1, cfg).params;
  auto d2 = grpo_update(p, p, g2, cfg).params;
  d1.axpy(-1.0, p);
  d2.axpy(-1.0, p);
  CHECK(std::sqrt(d2.squared_norm()) == Approx(2.0 * std::sqrt(d1.squared_norm())).epsilon(1e-9));
}

TEST_CASE("non-finite gradients abort the update") {
  auto p = init_params(ModelDims{}, 48, 0.2);
  std::vector<RolloutGroup> groups = {sampled_group(p, 8, {1.0, 0.0})};
  p.scorer_out(0, 0) = std::nan("");
  CHECK_THROWS_AS(grpo_update(p, p, groups, GrpoConfig{}), NumericalError);
}

TEST_CASE("config validation") {
  GrpoConfig c;
  CHECK_NOTHROW(validate(c));
  c.clip = 1.0;
  CHECK_THROWS_AS(validate(c), InvalidInput);
  c = {};
  c.group_size = 1;
  CHECK_THROWS_AS(validate(c), InvalidInput);
  c = {};
  c.scores_per_trace = 0;
  CHECK_THROWS_AS(validate(c), InvalidInput);
  c = {};
  c.kl_coeff = -0.1;
  CHECK_THROWS_AS(validate(c), InvalidInput);
}
