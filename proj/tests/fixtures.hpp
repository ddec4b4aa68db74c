#pragma once

#include <optional>

#include "qflow/policy.hpp"
#include "qflow/rng.hpp"

namespace fixture {

// Random but valid (params, trajectory) instance for gradient checks.
struct Instance {
  qflow::PolicyParams params;
  qflow::Trajectory trajectory;
};

inline qflow::Vec random_vec(qflow::Rng& rng, int n, double sd = 1.0) {
  qflow::Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = rng.normal(0.0, sd);
  return v;
}

inline Instance random_instance(const qflow::ModelDims& dims, std::uint64_t seed, double stddev = 0.4) {
  using namespace qflow;
  Rng rng(derive_seed(seed, {0xf1d}));
  Instance in;
  in.params = init_params(dims, seed, stddev);
  in.params.for_each([&](const char*, auto& t) {
    // Non-zero biases so their gradients are exercised too.
    if (t.cols() == 1) for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, stddev);
  });
  auto& t = in.trajectory;
  const auto mode = rng.index(3);
  if (mode != 1) t.context.image = random_vec(rng, dims.features);
  if (mode != 0) t.context.score_prefix = static_cast<int>(rng.index(static_cast<std::size_t>(dims.bins + 1)));
  const auto len = 1 + rng.index(static_cast<std::size_t>(dims.max_len));
  for (std::size_t i = 0; i + 1 < len; ++i) {
    TokenId tok = static_cast<TokenId>(rng.index(static_cast<std::size_t>(dims.vocab)));
    if (tok == dims.eos) tok = (tok + 1) % dims.vocab;
    t.caption.tokens.push_back(tok);
  }
  // Unterminated at max length half of the time it reaches it.
  if (len < static_cast<std::size_t>(dims.max_len) || rng.uniform() < 0.5) t.caption.tokens.push_back(dims.eos);
  else t.caption.tokens.push_back(static_cast<TokenId>((dims.eos + 1) % dims.vocab));
  if (rng.uniform() < 0.75) t.score_bin = static_cast<int>(rng.index(static_cast<std::size_t>(dims.bins)));
  t.score_sees_image = rng.uniform() < 0.5;
  t.caption_is_action = !t.score_bin || rng.uniform() < 0.7;
  return in;
}

}  // namespace fixture
