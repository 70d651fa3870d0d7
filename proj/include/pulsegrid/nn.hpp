#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pulsegrid/common.hpp"

namespace pulsegrid {

// Dense (channel, time, height, width) grid, row major with width fastest.
struct Tensor4 {
  std::size_t c = 0, t = 0, h = 0, w = 0;
  std::vector<double> v;

  Tensor4() = default;
  Tensor4(std::size_t c_, std::size_t t_, std::size_t h_, std::size_t w_)
      : c(c_), t(t_), h(h_), w(w_), v(c_ * t_ * h_ * w_, 0.0) {}

  std::size_t size() const { return c * t * h * w; }
  std::size_t plane() const { return h * w; }

  double& at(std::size_t ci, std::size_t ti, std::size_t hi, std::size_t wi) {
    return v[((ci * t + ti) * h + hi) * w + wi];
  }
  double at(std::size_t ci, std::size_t ti, std::size_t hi, std::size_t wi) const {
    return v[((ci * t + ti) * h + hi) * w + wi];
  }
  // Start of one channel's frame, a contiguous h*w run.
  double* frame(std::size_t ci, std::size_t ti) { return v.data() + (ci * t + ti) * plane(); }
  const double* frame(std::size_t ci, std::size_t ti) const {
    return v.data() + (ci * t + ti) * plane();
  }
  bool same_shape(const Tensor4& o) const {
    return c == o.c && t == o.t && h == o.h && w == o.w;
  }
};

// Named parameter block with its gradient accumulator.
struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> w;
  std::vector<double> g;

  Param() = default;
  Param(std::string n, std::vector<std::size_t> s);
  std::size_t count() const { return w.size(); }
};

// ---------------------------------------------------------------------------
// Layers. Each forward optionally records a Ctx; backward consumes it and
// accumulates parameter gradients in place. Stride-1 convolutions only; all
// striding happens in pooling layers.

class Conv3d {
 public:
  Conv3d(std::string name, std::size_t cin, std::size_t cout, std::array<std::size_t, 3> kernel,
         std::array<std::size_t, 3> pad);
  void init(Rng& rng, double gain);

  struct Ctx {
    Tensor4 x;
  };
  Tensor4 forward(const Tensor4& x, Ctx* ctx) const;
  // Returns d input; adds into weight.g / bias.g when param_grads is set.
  Tensor4 backward(const Ctx& ctx, const Tensor4& dy, bool param_grads);

  std::size_t cin() const { return cin_; }
  std::size_t cout() const { return cout_; }
  Param weight, bias;

 private:
  std::size_t cin_, cout_;
  std::array<std::size_t, 3> k_, p_;
  std::size_t patch_rows_;
};

class AvgPool3d {
 public:
  explicit AvgPool3d(std::array<std::size_t, 3> kernel) : k_(kernel) {}

  struct Ctx {
    std::size_t c = 0, t = 0, h = 0, w = 0;  // input shape
  };
  Tensor4 forward(const Tensor4& x, Ctx* ctx) const;
  Tensor4 backward(const Ctx& ctx, const Tensor4& dy) const;

 private:
  std::array<std::size_t, 3> k_;  // kernel == stride; floor semantics
};

class BatchNorm3d {
 public:
  BatchNorm3d(std::string name, std::size_t channels);

  struct Ctx {
    bool training = false;
    std::vector<double> invstd;  // per channel, as used in this forward
    Tensor4 xhat;                // saved only in training mode
  };
  // Training mode normalizes with this call's statistics and refreshes the
  // running estimates; eval mode applies the stored running statistics.
  Tensor4 forward(const Tensor4& x, bool training, Ctx* ctx);
  Tensor4 backward(const Ctx& ctx, const Tensor4& dy, bool param_grads);

  std::string name;
  Param gamma, beta;
  std::vector<double> running_mean, running_var;

 private:
  std::size_t channels_;
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;
};

class Relu {
 public:
  struct Ctx {
    std::vector<uint8_t> pass;
  };
  static Tensor4 forward(const Tensor4& x, Ctx* ctx);
  static Tensor4 backward(const Ctx& ctx, const Tensor4& dy);
};

// Transposed convolution along time only: kernel 4, stride 2, padding 1,
// which doubles the frame count exactly.
class ConvTransposeTemporal {
 public:
  ConvTransposeTemporal(std::string name, std::size_t cin, std::size_t cout);
  void init(Rng& rng, double gain);

  struct Ctx {
    Tensor4 x;
  };
  Tensor4 forward(const Tensor4& x, Ctx* ctx) const;
  Tensor4 backward(const Ctx& ctx, const Tensor4& dy, bool param_grads);

  Param weight;  // (cin, cout, 4)
  Param bias;

  static constexpr std::size_t kKernel = 4;
  static constexpr std::size_t kStride = 2;
  static constexpr std::size_t kPad = 1;

 private:
  std::size_t cin_, cout_;
};

// Linear interpolation along time to an exact target length (half-sample
// aligned). A matching length degenerates to identity.
class TemporalResize {
 public:
  struct Ctx {
    std::size_t t_in = 0;
  };
  static Tensor4 forward(const Tensor4& x, std::size_t t_out, Ctx* ctx);
  static Tensor4 backward(const Ctx& ctx, const Tensor4& dy);

  // Source position for an output frame, align-corners-false convention.
  static double src_pos(std::size_t o, std::size_t t_in, std::size_t t_out);
};

// Spatial adaptive average pooling to s x s; time and channels pass through.
class AdaptivePoolSpatial {
 public:
  struct Ctx {
    std::size_t h = 0, w = 0;  // input spatial shape
  };
  static Tensor4 forward(const Tensor4& x, std::size_t s, Ctx* ctx);
  static Tensor4 backward(const Ctx& ctx, const Tensor4& dy);

  // Half-open input range pooled into output index i of out_len.
  static std::pair<std::size_t, std::size_t> region(std::size_t i, std::size_t in_len,
                                                    std::size_t out_len);
};

// ---------------------------------------------------------------------------
// Optimizer.

class AdamW {
 public:
  struct Config {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW(std::vector<Param*> params, Config cfg);
  void zero_grad();
  void step();

  uint64_t step_count() const { return step_count_; }
  // Flat optimizer state for checkpointing, one entry per parameter.
  std::vector<std::pair<std::string, std::vector<double>*>> state_tensors();
  void set_step_count(uint64_t n) { step_count_ = n; }

  Config config;

 private:
  std::vector<Param*> params_;
  std::vector<std::vector<double>> m_, v_;
  uint64_t step_count_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoint container: magic, JSON header, raw tensor payload, content hash.

struct CorruptCheckpoint : Error {
  using Error::Error;
};

struct Checkpoint {
  std::string config_json;
  std::vector<std::pair<std::string, std::vector<double>>> tensors;

  const std::vector<double>* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const std::string& config_json,
                      const std::vector<std::pair<std::string, const std::vector<double>*>>& tensors);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace pulsegrid
