#include <cmath>
#include <set>

#include "doctest.h"
#include "pulsegrid/common.hpp"

using namespace pulsegrid;

TEST_CASE("derive_seed separates streams and replays") {
  uint64_t a = derive_seed(42, "sampler", 0, 0);
  uint64_t b = derive_seed(42, "sampler", 0, 0);
  CHECK(a == b);
  CHECK(derive_seed(42, "sampler", 1, 0) != a);
  CHECK(derive_seed(42, "sampler", 0, 1) != a);
  CHECK(derive_seed(42, "pairs", 0, 0) != a);
  CHECK(derive_seed(43, "sampler", 0, 0) != a);
}

TEST_CASE("rng draws are deterministic per seed") {
  Rng r1(7), r2(7), r3(8);
  bool same = true, diff = false;
  for (int i = 0; i < 32; ++i) {
    uint64_t v = r1.next_u64();
    same = same && (v == r2.next_u64());
    diff = diff || (v != r3.next_u64());
  }
  CHECK(same);
  CHECK(diff);
}

TEST_CASE("uniform_int stays in range and hits every value") {
  Rng r(123);
  std::set<int64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    int64_t v = r.uniform_int(-3, 3);
    CHECK(v >= -3);
    CHECK(v <= 3);
    seen.insert(v);
  }
  CHECK(seen.size() == 7);
  CHECK(r.uniform_int(5, 5) == 5);
  CHECK_THROWS_AS(r.uniform_int(2, 1), Error);
}

TEST_CASE("normal draws have roughly standard moments") {
  Rng r(99);
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double v = r.normal();
    sum += v;
    sq += v * v;
  }
  double mean = sum / n;
  double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.03);
  CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("fnv1a64 is order sensitive") {
  const char a[] = "ab";
  const char b[] = "ba";
  CHECK(fnv1a64(a, 2) != fnv1a64(b, 2));
  CHECK(fnv1a64(a, 2) == fnv1a64(a, 2));
}

TEST_CASE("atomic_write_file round trips") {
  auto dir = std::filesystem::temp_directory_path() / "pulsegrid_test_io";
  auto path = dir / "nested" / "blob.bin";
  std::string payload("pulsegrid\0payload", 17);
  atomic_write_file(path, payload);
  auto back = read_binary_file(path);
  CHECK(std::string(back.begin(), back.end()) == payload);
  std::filesystem::remove_all(dir);
}
