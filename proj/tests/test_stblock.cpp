#include <map>
#include <set>

#include "doctest.h"
#include "pulsegrid/stblock.hpp"

using namespace pulsegrid;

namespace {

STBlock random_block(std::size_t t, std::size_t s, double fs, uint64_t seed) {
  STBlock b{std::vector<double>(t * s * s), t, s, fs};
  Rng rng(seed);
  for (auto& v : b.values) v = rng.normal();
  return b;
}

}  // namespace

TEST_CASE("sampler draws the advertised count and length") {
  for (std::size_t s : {1u, 2u, 4u, 8u}) {
    for (std::size_t k : {1u, 4u}) {
      STBlock b = random_block(120, s, 10.0, 7 * s + k);
      Rng rng(derive_seed(1, "sampler", s, k));
      auto samples = sample_block(b, k, rng);
      CHECK(samples.size() == s * s * k);

      std::map<std::pair<std::size_t, std::size_t>, std::size_t> per_cell;
      for (const auto& [spec, wf] : samples) {
        CHECK(spec.dt == 60);
        CHECK(spec.t0 + spec.dt <= b.t);
        CHECK(wf.samples.size() == spec.dt);
        CHECK(wf.fs == b.fs);
        ++per_cell[{spec.h, spec.w}];
      }
      CHECK(per_cell.size() == s * s);
      for (const auto& [cell, count] : per_cell) CHECK(count == k);
    }
  }
}

TEST_CASE("sampler copies slices verbatim") {
  STBlock b = random_block(64, 2, 10.0, 42);
  Rng rng(5);
  for (const auto& [spec, wf] : sample_block(b, 3, rng)) {
    bool identical = true;
    for (std::size_t ti = 0; ti < spec.dt; ++ti) {
      identical = identical && (wf.samples[ti] == b.at(spec.t0 + ti, spec.h, spec.w));
    }
    CHECK(identical);
  }
}

TEST_CASE("odd block length floors the window and keeps both start extremes reachable") {
  STBlock b = random_block(101, 1, 10.0, 3);
  Rng rng(11);
  auto samples = sample_block(b, 400, rng);
  std::size_t lo = b.t, hi = 0;
  for (const auto& [spec, wf] : samples) {
    CHECK(spec.dt == 50);
    CHECK(spec.t0 <= 51);
    lo = std::min(lo, spec.t0);
    hi = std::max(hi, spec.t0);
  }
  CHECK(lo == 0);
  CHECK(hi == 51);
}

TEST_CASE("tiny block enumerates its start frames") {
  std::set<std::size_t> starts;
  for (uint64_t seed = 0; seed < 50; ++seed) {
    STBlock b = random_block(4, 1, 2.0, seed);
    Rng rng(seed);
    auto samples = sample_block(b, 1, rng);
    REQUIRE(samples.size() == 1);
    CHECK(samples[0].first.dt == 2);
    CHECK(samples[0].first.t0 <= 2);
    starts.insert(samples[0].first.t0);
  }
  CHECK(starts == std::set<std::size_t>{0, 1, 2});
}

TEST_CASE("sampler replays per seed and varies across seeds") {
  STBlock b = random_block(200, 2, 10.0, 9);
  auto run = [&](uint64_t seed) {
    Rng rng(seed);
    std::vector<std::size_t> t0s;
    for (const auto& [spec, wf] : sample_block(b, 4, rng)) t0s.push_back(spec.t0);
    return t0s;
  };
  CHECK(run(123) == run(123));

  std::set<std::vector<std::size_t>> distinct;
  for (uint64_t seed = 0; seed < 100; ++seed) distinct.insert(run(seed));
  CHECK(distinct.size() > 95);
}

TEST_CASE("sampler rejects short or malformed blocks") {
  STBlock b = random_block(19, 1, 10.0, 1);
  Rng rng(1);
  CHECK_THROWS_AS(sample_block(b, 1, rng), BlockTooShort);

  STBlock bad{std::vector<double>(30 * 9, 0.0), 30, 3, 10.0};
  CHECK_THROWS_AS(validate_block(bad), Error);

  STBlock mismatched{std::vector<double>(10, 0.0), 30, 1, 10.0};
  CHECK_THROWS_AS(validate_block(mismatched), Error);
}

TEST_CASE("spatial average reduces cells to their mean") {
  STBlock b = random_block(40, 1, 10.0, 21);
  Waveform avg = spatial_average(b);
  CHECK(avg.samples == b.values);

  STBlock quad{std::vector<double>(20 * 4), 20, 2, 10.0};
  for (std::size_t ti = 0; ti < 20; ++ti) {
    quad.at(ti, 0, 0) = 1.0;
    quad.at(ti, 0, 1) = 2.0;
    quad.at(ti, 1, 0) = 3.0;
    quad.at(ti, 1, 1) = 6.0;
  }
  Waveform q = spatial_average(quad);
  for (double v : q.samples) CHECK(v == doctest::Approx(3.0));
}

TEST_CASE("identical cells average to themselves") {
  STBlock b{std::vector<double>(30 * 4), 30, 2, 10.0};
  Rng rng(8);
  for (std::size_t ti = 0; ti < 30; ++ti) {
    double v = rng.normal();
    for (std::size_t h = 0; h < 2; ++h) {
      for (std::size_t w = 0; w < 2; ++w) b.at(ti, h, w) = v;
    }
  }
  Waveform avg = spatial_average(b);
  for (std::size_t ti = 0; ti < 30; ++ti) CHECK(avg.samples[ti] == b.at(ti, 0, 0));
}

TEST_CASE("spatial average commutes with temporal slicing") {
  STBlock b = random_block(80, 4, 10.0, 77);
  Waveform full = spatial_average(b);

  STBlock sliced{std::vector<double>(30 * 16), 30, 4, 10.0};
  for (std::size_t ti = 0; ti < 30; ++ti) {
    for (std::size_t h = 0; h < 4; ++h) {
      for (std::size_t w = 0; w < 4; ++w) sliced.at(ti, h, w) = b.at(ti + 25, h, w);
    }
  }
  Waveform part = spatial_average(sliced);
  bool identical = true;
  for (std::size_t ti = 0; ti < 30; ++ti) {
    identical = identical && (part.samples[ti] == full.samples[ti + 25]);
  }
  CHECK(identical);
}
