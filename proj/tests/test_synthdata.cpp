#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "oracles.hpp"
#include "qflow/synthdata.hpp"

using namespace qflow;
using Catch::Approx;

namespace {

SceneAttributes attrs(double b, double n, double e, double c) { return SceneAttributes{b, n, e, c}; }

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("qflow_synth_" + name)).string();
}

}  // namespace

TEST_CASE("mos oracle boundary values") {
  CHECK(mos_oracle(attrs(0, 0, 0, 0.5), 0.0) == 5.0);
  CHECK(mos_oracle(attrs(0.5, 0, 0, 0.5), 0.0) == Approx(4.2).margin(1e-12));
  // Worst distortions with neutral composition: 5 - 1.6 - 1.2 - 0.8 = 1.4.
  CHECK(mos_oracle(attrs(1, 1, 1, 0.5), 0.0) == Approx(1.4).margin(1e-12));
  // Clamped from below.
  CHECK(mos_oracle(attrs(1, 1, 1, 0.0), -0.25) == 1.0);
  // Clamped from above.
  CHECK(mos_oracle(attrs(0, 0, 0, 1.0), 0.25) == 5.0);
}

TEST_CASE("mos oracle rejects bad inputs") {
  CHECK_THROWS_AS(mos_oracle(attrs(1.1, 0, 0, 0), 0.0), InvalidInput);
  CHECK_THROWS_AS(mos_oracle(attrs(0, -0.01, 0, 0), 0.0), InvalidInput);
  CHECK_THROWS_AS(mos_oracle(attrs(0, 0, std::nan(""), 0), 0.0), InvalidInput);
  CHECK_THROWS_AS(mos_oracle(attrs(0, 0, 0, 0), 0.3), InvalidInput);
}

TEST_CASE("generation is deterministic and seed sensitive") {
  const auto a = generate_dataset(7, 4);
  const auto b = generate_dataset(7, 4);
  const auto c = generate_dataset(8, 4);
  CHECK(serialize_dataset(a) == serialize_dataset(b));
  CHECK(a == b);
  CHECK(a.records[0].features != c.records[0].features);
  CHECK_THROWS_AS(generate_dataset(7, 0), InvalidInput);
}

TEST_CASE("generated records satisfy range invariants") {
  const auto d = generate_dataset(7, 512);
  REQUIRE(d.records.size() == 512);
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    const auto& r = d.records[i];
    CHECK(r.id == static_cast<std::int64_t>(i));
    CHECK(r.mos >= 1.0);
    CHECK(r.mos <= 5.0);
    CHECK(r.features.size() == 16);
    CHECK(r.features.allFinite());
    for (double v : {r.attributes.blur, r.attributes.noise, r.attributes.exposure_error, r.attributes.composition}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK_NOTHROW(check_record(r, i + 2));
  }
}

TEST_CASE("blur correlates negatively with mos") {
  const auto d = generate_dataset(11, 256);
  std::vector<double> blur, mos;
  for (const auto& r : d.records) {
    blur.push_back(r.attributes.blur);
    mos.push_back(r.mos);
  }
  CHECK(oracle::pearson(blur, mos) < 0.0);
}

TEST_CASE("dataset save/load round trip") {
  for (std::uint64_t seed : {1ULL, 2ULL, 99ULL}) {
    const auto d = generate_dataset(seed, 37, DataConfig{5});
    const auto path = tmp_path("rt.data");
    save_dataset(d, path);
    const auto back = load_dataset(path);
    CHECK(back == d);
    CHECK(serialize_dataset(back) == serialize_dataset(d));
  }
}

TEST_CASE("dataset parse errors") {
  auto lines = text::read_lines([] {
    const auto p = tmp_path("err.data");
    save_dataset(generate_dataset(3, 3), p);
    return p;
  }());
  REQUIRE(lines.size() == 4);

  SECTION("truncated record names its line") {
    auto bad = lines;
    bad[2] = bad[2].substr(0, bad[2].size() / 2);
    try {
      parse_dataset(bad);
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
      CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
  }
  SECTION("version mismatch") {
    auto bad = lines;
    bad[0].replace(bad[0].find("v1"), 2, "v2");
    CHECK_THROWS_AS(parse_dataset(bad), FormatError);
  }
  SECTION("mos out of range") {
    auto bad = lines;
    auto parts = text::split(bad[1], '|');
    bad[1] = std::string(parts[0]) + "|" + std::string(parts[1]) + "|7.0|" + std::string(parts[3]);
    CHECK_THROWS_AS(parse_dataset(bad), InvariantViolation);
  }
  SECTION("non-contiguous ids") {
    auto bad = lines;
    bad[2].replace(0, 1, "5");
    CHECK_THROWS_AS(parse_dataset(bad), InvariantViolation);
  }
}

TEST_CASE("split is a seeded two-thirds partition") {
  const auto d = generate_dataset(5, 768);
  const auto s = split_dataset(d, 2.0 / 3.0, 42);
  CHECK(s.train.size() == 512);
  CHECK(s.test.size() == 256);
  std::vector<std::int64_t> ids;
  for (const auto& r : s.train) ids.push_back(r.id);
  for (const auto& r : s.test) ids.push_back(r.id);
  std::sort(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); ++i) CHECK(ids[i] == static_cast<std::int64_t>(i));
  const auto again = split_dataset(d, 2.0 / 3.0, 42);
  CHECK(again.test.front().id == s.test.front().id);
  const auto renumbered = as_dataset(s.test, d.seed);
  CHECK(renumbered.records.back().id == 255);
}
