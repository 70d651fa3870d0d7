#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "pulsegrid/model.hpp"
#include "pulsegrid/signal.hpp"

using namespace pulsegrid;

namespace {

Tensor4 random_clip(std::size_t t, uint64_t seed) {
  Tensor4 x(3, t, RppgEncoder::kInputSide, RppgEncoder::kInputSide);
  Rng rng(seed);
  for (double& v : x.v) v = 0.5 + 0.1 * rng.normal();
  return x;
}

ModelConfig tiny_config(std::size_t s_out) {
  ModelConfig cfg;
  cfg.s_out = s_out;
  cfg.base_channels = 1;
  cfg.frame_rate = 10.0;
  return cfg;
}

}  // namespace

TEST_CASE("standardized clips have zero mean and unit variance") {
  Tensor4 x = random_clip(20, 1);
  Tensor4 y = standardize_clip(x, nullptr);
  double mean = 0.0;
  for (double v : y.v) mean += v;
  mean /= static_cast<double>(y.size());
  CHECK(std::fabs(mean) < 1e-10);
  double var = 0.0;
  for (double v : y.v) var += (v - mean) * (v - mean);
  var /= static_cast<double>(y.size());
  CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("standardization erases a power-of-two intensity rescale exactly") {
  Tensor4 x = random_clip(20, 2);
  Tensor4 scaled = x;
  for (double& v : scaled.v) v *= 4.0;
  Tensor4 a = standardize_clip(x, nullptr);
  Tensor4 b = standardize_clip(scaled, nullptr);
  CHECK(a.v == b.v);
}

TEST_CASE("standardizing a constant clip yields exact silence") {
  Tensor4 x(3, 20, RppgEncoder::kInputSide, RppgEncoder::kInputSide);
  std::fill(x.v.begin(), x.v.end(), 0.25);
  Tensor4 y = standardize_clip(x, nullptr);
  for (std::size_t i = 0; i < y.size(); i += 997) CHECK(y.v[i] == 0.0);
}

TEST_CASE("standardize backward matches finite differences") {
  // Small tensors so the quadratic coupling through the statistics is strong.
  Tensor4 x(2, 2, 3, 3), proj(2, 2, 3, 3);
  Rng rng(7);
  for (double& v : x.v) v = rng.normal();
  for (double& v : proj.v) v = rng.normal();

  StandardizeCtx ctx;
  standardize_clip(x, &ctx);
  Tensor4 dy = proj;
  Tensor4 dx = standardize_backward(ctx, dy);

  auto eval = [&]() {
    Tensor4 y = standardize_clip(x, nullptr);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += y.v[i] * proj.v[i];
    return acc;
  };
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); i += 2) {
    const double keep = x.v[i];
    x.v[i] = keep + h;
    const double up = eval();
    x.v[i] = keep - h;
    const double down = eval();
    x.v[i] = keep;
    const double num = (up - down) / (2.0 * h);
    CHECK(num == doctest::Approx(dx.v[i]).epsilon(1e-5));
  }
}

TEST_CASE("the encoder produces the advertised grid for every supported shape") {
  for (const std::size_t s : {std::size_t{1}, std::size_t{2}, std::size_t{4}, std::size_t{8}}) {
    RppgEncoder model(tiny_config(s), 42);
    for (const std::size_t t : {std::size_t{50}, std::size_t{100}, std::size_t{300}}) {
      Tensor4 clip = random_clip(t, 1000 + t);
      STBlock block = model.forward(clip, false);
      CHECK(block.t == t);
      CHECK(block.s == s);
      CHECK(block.fs == 10.0);
      REQUIRE(block.values.size() == t * s * s);
      for (double v : block.values) CHECK(std::isfinite(v));
      validate_block(block);
    }
  }
}

TEST_CASE("inference is deterministic and repeatable") {
  RppgEncoder model(tiny_config(2), 3);
  Tensor4 clip = random_clip(40, 9);
  STBlock a = model.forward(clip, false);
  STBlock b = model.forward(clip, false);
  CHECK(a.values == b.values);

  RppgEncoder again(tiny_config(2), 3);
  STBlock c = again.forward(clip, false);
  CHECK(a.values == c.values);
}

TEST_CASE("different init seeds give different networks") {
  RppgEncoder a(tiny_config(2), 1);
  RppgEncoder b(tiny_config(2), 2);
  Tensor4 clip = random_clip(40, 11);
  STBlock ya = a.forward(clip, false);
  STBlock yb = b.forward(clip, false);
  CHECK(ya.values != yb.values);
}

TEST_CASE("a single-cell output equals the mean of the full grid") {
  // Same seed means identical weights; only the pooling target differs, and
  // the head is linear, so averaging commutes with it.
  RppgEncoder wide(tiny_config(8), 21);
  RppgEncoder narrow(tiny_config(1), 21);
  Tensor4 clip = random_clip(50, 22);
  STBlock grid = wide.forward(clip, false);
  STBlock single = narrow.forward(clip, false);
  REQUIRE(grid.t == single.t);
  for (std::size_t ti = 0; ti < grid.t; ++ti) {
    double mean = 0.0;
    for (std::size_t h = 0; h < 8; ++h)
      for (std::size_t w = 0; w < 8; ++w) mean += grid.at(ti, h, w);
    mean /= 64.0;
    CHECK(std::fabs(mean - single.at(ti, 0, 0)) < 1e-5);
  }
}

TEST_CASE("forward rejects malformed clips") {
  RppgEncoder model(tiny_config(2), 5);
  CHECK_THROWS_AS(model.forward(Tensor4(3, 50, 64, 64), false), BadShape);
  CHECK_THROWS_AS(model.forward(Tensor4(1, 50, 128, 128), false), BadShape);
  CHECK_THROWS_AS(model.forward(Tensor4(3, 19, 128, 128), false), TooShort);
}

TEST_CASE("config validation rejects unsupported grids") {
  ModelConfig cfg = tiny_config(3);
  CHECK_THROWS_AS(RppgEncoder(cfg, 0), Error);
  cfg = tiny_config(2);
  cfg.base_channels = 0;
  CHECK_THROWS_AS(RppgEncoder(cfg, 0), Error);
  cfg = tiny_config(2);
  cfg.frame_rate = 0.0;
  CHECK_THROWS_AS(RppgEncoder(cfg, 0), Error);
}

TEST_CASE("the forward counter tracks encoder passes") {
  RppgEncoder model(tiny_config(2), 6);
  CHECK(model.forward_count() == 0);
  Tensor4 clip = random_clip(40, 13);
  model.forward(clip, false);
  model.forward(clip, true);
  CHECK(model.forward_count() == 2);
  model.reset_forward_count();
  CHECK(model.forward_count() == 0);
}

TEST_CASE("parameter count follows the architecture arithmetic") {
  std::size_t prev = 0;
  for (const std::size_t c : {std::size_t{1}, std::size_t{2}, std::size_t{4}}) {
    ModelConfig cfg = tiny_config(2);
    cfg.base_channels = c;
    RppgEncoder model(cfg, 0);
    // Independent tally from the layer shapes.
    const std::size_t d = 2 * c;
    std::size_t expect = 0;
    expect += c * 3 * 1 * 5 * 5 + c + 2 * c;                 // stem conv + bn
    expect += d * c * 27 + d + 2 * d;                        // stage 1
    expect += 3 * (d * d * 27 + d + 2 * d);                  // stages 2-4
    expect += 2 * (d * d * 4 + d + 2 * d);                   // temporal upsamplers
    expect += 1 * d * 1 * 1 * 1 + 1;                         // head
    CHECK(model.parameter_count() == expect);
    CHECK(model.parameter_count() > prev);
    prev = model.parameter_count();
  }
}

TEST_CASE("an output frame ignores frames outside its temporal window") {
  RppgEncoder model(tiny_config(2), 31);
  const std::size_t t_len = 100, probe = 30;
  const auto [lo, hi] = model.temporal_dependency_range(probe, t_len);
  CHECK(lo <= probe);
  CHECK(hi >= probe);
  CHECK(hi - lo + 1 < t_len / 2);  // locality: nowhere near the whole clip
  REQUIRE(hi < t_len - 1);
  REQUIRE(lo > 0);

  Tensor4 x(3, t_len, 128, 128);
  Rng rng(32);
  for (double& v : x.v) v = rng.normal();
  Tensor4 y = model.forward_raw(x, false);

  // Rewriting everything after the window must leave the probed frame alone.
  Tensor4 x_after = x;
  Rng noise(33);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = hi + 1; t < t_len; ++t) {
      double* f = x_after.frame(c, t);
      for (std::size_t i = 0; i < x.plane(); ++i) f[i] = noise.normal();
    }
  Tensor4 y_after = model.forward_raw(x_after, false);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t w = 0; w < 2; ++w)
      CHECK(y.at(0, probe, h, w) == y_after.at(0, probe, h, w));

  // Same on the leading side.
  Tensor4 x_before = x;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < lo; ++t) {
      double* f = x_before.frame(c, t);
      for (std::size_t i = 0; i < x.plane(); ++i) f[i] = noise.normal();
    }
  Tensor4 y_before = model.forward_raw(x_before, false);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t w = 0; w < 2; ++w)
      CHECK(y.at(0, probe, h, w) == y_before.at(0, probe, h, w));

  // Sanity: frames inside the window do reach the probe.
  Tensor4 x_inside = x;
  {
    double* f = x_inside.frame(0, probe);
    for (std::size_t i = 0; i < x.plane(); ++i) f[i] += 1.0;
  }
  Tensor4 y_inside = model.forward_raw(x_inside, false);
  bool changed = false;
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t w = 0; w < 2; ++w)
      if (y.at(0, probe, h, w) != y_inside.at(0, probe, h, w)) changed = true;
  CHECK(changed);
}

TEST_CASE("input gradient stays inside the spatial footprint of one cell") {
  RppgEncoder model(tiny_config(2), 41);
  const std::size_t t_len = 40;
  const auto [plo, phi] = model.spatial_dependency_range(0);
  CHECK(plo == 0);
  REQUIRE(phi < 127);  // a far corner must sit outside the footprint

  Tensor4 x(3, t_len, 128, 128);
  Rng rng(42);
  for (double& v : x.v) v = rng.normal();
  Tape tape;
  Tensor4 y = model.forward_raw(x, false, &tape);

  Tensor4 dy(1, y.t, y.h, y.w);
  const std::size_t probe_t = 20;
  dy.at(0, probe_t, 0, 0) = 1.0;
  Tensor4 dx = model.backward_raw(tape, dy, false);

  const auto [tlo, thi] = model.temporal_dependency_range(probe_t, t_len);
  std::size_t inside_nonzero = 0, inside_total = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t h = 0; h < 128; ++h)
        for (std::size_t w = 0; w < 128; ++w) {
          const double g = dx.at(c, t, h, w);
          if (h > phi || w > phi || t < tlo || t > thi) {
            CHECK(g == 0.0);
          } else {
            ++inside_total;
            if (g != 0.0) ++inside_nonzero;
          }
        }
  CHECK(inside_total > 0);
  // With average pooling everywhere the footprint is densely connected.
  CHECK(inside_nonzero > inside_total / 2);
}

TEST_CASE("end-to-end gradients agree with finite differences") {
  ModelConfig cfg = tiny_config(2);
  RppgEncoder model(cfg, 51);
  const std::size_t t_len = 20;
  Tensor4 x = random_clip(t_len, 52);
  Tensor4 proj(1, t_len, 2, 2);
  Rng rng(53);
  for (double& v : proj.v) v = rng.normal();

  auto eval = [&]() {
    Tensor4 std_in = standardize_clip(x, nullptr);
    Tensor4 y = model.forward_raw(std_in, true);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += y.v[i] * proj.v[i];
    return acc;
  };

  Tape tape;
  StandardizeCtx sctx;
  Tensor4 std_in = standardize_clip(x, &sctx);
  Tensor4 y = model.forward_raw(std_in, true, &tape);
  for (Param* p : model.parameters()) std::fill(p->g.begin(), p->g.end(), 0.0);
  Tensor4 d_std = model.backward_raw(tape, proj, true);
  Tensor4 dx = standardize_backward(sctx, d_std);

  std::size_t checked = 0;
  auto diff_at = [&](std::vector<double>& buf, std::size_t i, double h) {
    const double keep = buf[i];
    buf[i] = keep + h;
    const double up = eval();
    buf[i] = keep - h;
    const double down = eval();
    buf[i] = keep;
    return (up - down) / (2.0 * h);
  };
  auto check_coord = [&](std::vector<double>& buf, std::size_t i, double analytic) {
    const double num = diff_at(buf, i, 1e-5);
    const double wide = diff_at(buf, i, 4e-5);
    const double scale = std::max({std::fabs(num), std::fabs(analytic), 1e-4});
    // A difference that moves with the step size straddles a relu kink;
    // the quotient is meaningless there, so only stable coordinates count.
    if (std::fabs(num - wide) > 5e-4 * scale) return;
    if (std::fabs(num) < 1e-7 && std::fabs(analytic) < 1e-7) return;
    CHECK(std::fabs(num - analytic) <= 2e-3 * scale);
    ++checked;
  };

  // A scatter of raw-input pixels.
  const std::size_t stride = x.size() / 7 + 1;
  for (std::size_t i = 0; i < x.size(); i += stride) check_coord(x.v, i, dx.v[i]);
  // One coordinate from every parameter tensor.
  for (Param* p : model.parameters()) {
    const std::size_t mid = p->count() / 2;
    check_coord(p->w, mid, p->g[mid]);
  }
  CHECK(checked >= 15);
}

TEST_CASE("parameter gradients demand a training tape") {
  RppgEncoder model(tiny_config(2), 61);
  Tensor4 x = random_clip(20, 62);
  Tape tape;
  STBlock block = model.forward(x, false, &tape);
  STBlock d_block = block;
  std::fill(d_block.values.begin(), d_block.values.end(), 1.0);
  CHECK_THROWS_AS(model.backward(tape, d_block, true), Error);
  // Input gradients alone are fine on an eval tape.
  Tensor4 dx = model.backward(tape, d_block, false);
  CHECK(dx.size() == x.size());
}

TEST_CASE("checkpoints restore the network bit for bit") {
  const std::filesystem::path dir = std::filesystem::temp_directory_path() / "pulsegrid_model_ckpt";
  std::filesystem::create_directories(dir);
  const auto path = dir / "encoder.ckpt";

  ModelConfig cfg = tiny_config(4);
  cfg.init_gain = 0.5;
  RppgEncoder model(cfg, 71);
  // Drift the running statistics away from their defaults first.
  Tensor4 clip = random_clip(30, 72);
  model.forward(clip, true);
  model.save(path);

  RppgEncoder restored{read_checkpoint(path)};
  CHECK(restored.config().s_out == 4);
  CHECK(restored.config().base_channels == 1);
  CHECK(restored.config().frame_rate == 10.0);
  CHECK(restored.config().init_gain == 0.5);
  CHECK(restored.parameter_count() == model.parameter_count());

  STBlock a = model.forward(clip, false);
  STBlock b = restored.forward(clip, false);
  CHECK(a.values == b.values);

  // Truncated checkpoints must be rejected loudly.
  const std::vector<char> blob = read_binary_file(path);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size() / 2));
  }
  CHECK_THROWS_AS(read_checkpoint(path), CorruptCheckpoint);
  std::filesystem::remove_all(dir);
}

TEST_CASE("model config json survives a round trip") {
  ModelConfig cfg;
  cfg.s_out = 8;
  cfg.base_channels = 3;
  cfg.frame_rate = 29.97;
  cfg.init_gain = 0.123456789012345;
  ModelConfig back = ModelConfig::from_json(cfg.to_json());
  CHECK(back.s_out == 8);
  CHECK(back.base_channels == 3);
  CHECK(back.frame_rate == cfg.frame_rate);
  CHECK(back.init_gain == cfg.init_gain);
}
