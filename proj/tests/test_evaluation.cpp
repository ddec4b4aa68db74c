#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "qflow/evaluation.hpp"

using namespace qflow;
using Catch::Approx;

namespace {

std::vector<double> random_vector(Rng& rng, std::size_t n, bool ties) {
  std::vector<double> v(n);
  for (auto& x : v) x = ties ? static_cast<double>(rng.index(4)) : rng.normal();
  return v;
}

const std::vector<QualityRecord>& test_records() {
  static const auto d = generate_dataset(31, 40);
  return d.records;
}

}  // namespace

TEST_CASE("correlation examples") {
  const std::vector<double> x = {1, 2, 3, 4}, y = {1, 3, 2, 4};
  CHECK(plcc(x, x) == Approx(1.0).margin(1e-15));
  std::vector<double> anti;
  for (double v : x) anti.push_back(-v + 7);
  CHECK(plcc(x, anti) == Approx(-1.0).margin(1e-15));
  CHECK(plcc(x, y) == Approx(0.8).margin(1e-12));
  CHECK(srcc(x, y) == Approx(0.8).margin(1e-12));
  std::vector<double> cubed;
  for (double v : x) cubed.push_back(v * v * v);
  CHECK(srcc(x, cubed) == Approx(1.0).margin(1e-15));
  CHECK(fractional_ranks(std::vector<double>{1, 2, 2, 3}) == std::vector<double>{1, 2.5, 2.5, 4});
}

TEST_CASE("correlation errors") {
  const std::vector<double> c = {2, 2, 2}, x = {1, 2, 3};
  CHECK_THROWS_AS(plcc(c, x), UndefinedCorrelation);
  CHECK_THROWS_AS(srcc(x, c), UndefinedCorrelation);
  CHECK_THROWS_AS(plcc(std::vector<double>{1, 2}, std::vector<double>{1, 2}), InvalidInput);
  CHECK_THROWS_AS(plcc(x, std::vector<double>{1, 2}), InvalidInput);
}

TEST_CASE("correlations match the brute-force oracle") {
  Rng rng(404);
  int checked = 0;
  while (checked < 200) {
    const std::size_t n = 3 + rng.index(48);
    const bool ties = checked % 3 == 0;
    const auto x = random_vector(rng, n, ties);
    const auto y = random_vector(rng, n, ties && checked % 2 == 0);
    const auto constant = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(), [&](double a) { return a == v[0]; });
    };
    if (constant(x) || constant(y)) continue;
    CHECK(plcc(x, y) == Approx(oracle::pearson(x, y)).margin(1e-10));
    CHECK(srcc(x, y) == Approx(oracle::spearman(x, y)).margin(1e-10));
    ++checked;
  }
}

TEST_CASE("metric invariances") {
  Rng rng(12);
  for (int i = 0; i < 50; ++i) {
    const auto x = random_vector(rng, 20, false);
    const auto y = random_vector(rng, 20, false);
    std::vector<double> ax, mx;
    for (double v : x) {
      ax.push_back(3.0 * v + 1.5);
      mx.push_back(std::exp(v));
    }
    CHECK(plcc(ax, y) == Approx(plcc(x, y)).margin(1e-12));
    CHECK(srcc(ax, y) == Approx(srcc(x, y)).margin(1e-12));
    CHECK(srcc(mx, y) == Approx(srcc(x, y)).margin(1e-12));
    CHECK(plcc(x, y) == Approx(plcc(y, x)).margin(1e-15));
    CHECK(srcc(x, y) == Approx(srcc(y, x)).margin(1e-15));
  }
}

TEST_CASE("untrained policies have no skill") {
  // The untrained starting point of a run; a random readout can still
  // correlate by chance, so this is a measured bound, not a structural one.
  const auto v = default_vocabulary();
  const auto d = generate_dataset(2024, 256);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto p = initial_params(ParadigmConfig{}, ModelDims{}, seed);
    CHECK(std::abs(evaluate(p, v, d.records, EvalMode::Image).plcc) < 0.4);
  }
}

TEST_CASE("constant predictions surface as an error") {
  const auto v = default_vocabulary();
  auto p = PolicyParams::zeros(ModelDims{});
  p.cap_hidden_bias.setConstant(1.0);
  p.cap_out.row(0).setConstant(50.0);
  p.scorer_out.setConstant(0.1);
  CHECK_THROWS_AS(evaluate(p, v, test_records(), EvalMode::Text), UndefinedCorrelation);
}

TEST_CASE("gap report") {
  const auto v = default_vocabulary();
  const auto p = init_params(ModelDims{}, 4, 0.3);
  const auto r = gap_report(p, v, test_records());
  REQUIRE(r.conditions.size() == 3);
  REQUIRE(r.gap_plcc);
  CHECK(*r.gap_plcc == r.find(EvalMode::Image)->plcc - r.find(EvalMode::Text)->plcc);
  CHECK(*r.gap_srcc == r.find(EvalMode::Image)->srcc - r.find(EvalMode::Text)->srcc);
  for (const auto& c : r.conditions) {
    CHECK(c.n == test_records().size());
    CHECK(std::abs(c.plcc) <= 1.0);
  }
  CHECK(gap_report(p, v, test_records()) == r);
  const auto body = serialize_report(r);
  const auto lines = text::split(body, '\n');
  std::vector<std::string> ls(lines.begin(), lines.end());
  CHECK(parse_report(ls) == r);
  CHECK_THROWS_AS(gap_report(p, v, std::span(test_records()).first(2)), InvalidInput);
}

TEST_CASE("text and stripped agree when no caption holds score words") {
  // Remove score words from the vocabulary's view: a vocabulary with none.
  const auto base = default_vocabulary();
  std::vector<std::string> toks;
  for (TokenId i = 0; i < base.size(); ++i) toks.push_back(base.token(i));
  const Vocabulary plain(toks, {});
  const auto p = init_params(ModelDims{}, 5, 0.3);
  const auto preds = predict_conditions(p, plain, test_records(), all_modes());
  CHECK(preds[1].scores == preds[2].scores);
}

TEST_CASE("attention traces and histogram") {
  const auto v = default_vocabulary();
  const auto p = init_params(ModelDims{}, 6, 0.3);
  for (auto mode : all_modes()) {
    const EvalMode modes[] = {mode};
    const auto preds = predict_conditions(p, v, test_records(), modes).front();
    for (const auto& t : preds.traces) {
      double s = 0.0;
      for (double w : t.weights) s += w;
      CHECK(s == Approx(1.0).margin(1e-6));
      CHECK(t.has_image_slot() == (mode == EvalMode::Image));
    }
    const auto h = aggregate_attention(preds.traces);
    for (std::size_t i = 1; i < h.entries.size(); ++i) CHECK(h.entries[i - 1].mean_weight >= h.entries[i].mean_weight);
    // Weighted by occurrence, the means sum back to one per prediction.
    double total = 0.0;
    for (const auto& e : h.entries) total += e.mean_weight * static_cast<double>(e.count);
    CHECK(total == Approx(static_cast<double>(preds.traces.size())).margin(1e-6));

    const auto text = serialize_histogram(h, v);
    const auto parts = text::split(text, '\n');
    std::vector<std::string> ls(parts.begin(), parts.end());
    const auto back = parse_histogram(ls, v);
    REQUIRE(back.entries.size() == h.entries.size());
    for (std::size_t i = 0; i < h.entries.size(); ++i) {
      CHECK(back.entries[i].label == h.entries[i].label);
      CHECK(back.entries[i].mean_weight == h.entries[i].mean_weight);
      CHECK(back.entries[i].count == h.entries[i].count);
    }
  }
}

TEST_CASE("image slot alone takes all attention") {
  const auto p = init_params(ModelDims{}, 7, 0.3);
  const auto& rec = test_records()[0];
  const auto [d, t] = score_distribution(p, &rec.features, nullptr);
  const AttentionTrace traces[] = {t};
  const auto h = aggregate_attention(traces);
  REQUIRE(h.entries.size() == 1);
  CHECK(h.entries[0].label == kImageSlot);
  CHECK(h.entries[0].mean_weight == 1.0);
  CHECK(slot_label_name(kImageSlot, default_vocabulary()) == "IMAGE_SLOT");
}

TEST_CASE("histogram parse errors") {
  const auto v = default_vocabulary();
  CHECK_THROWS_AS(parse_histogram({"IMAGE_SLOT,0.5"}, v), ParseError);
  CHECK_THROWS_AS(parse_histogram({"zebra,0.5,3"}, v), ParseError);
  CHECK_THROWS_AS(parse_histogram({"good,1.5,3"}, v), InvariantViolation);
}
