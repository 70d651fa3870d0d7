#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pulsegrid/common.hpp"
#include "pulsegrid/nn.hpp"
#include "pulsegrid/stblock.hpp"

namespace pulsegrid {

struct BadShape : Error {
  using Error::Error;
};

struct ModelConfig {
  std::size_t s_out = 2;
  std::size_t base_channels = 4;
  double frame_rate = 30.0;
  double init_gain = 0.35;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& json);
};

// Whole-clip standardization applied in front of the network: one mean and
// one variance across every channel, frame and pixel.
struct StandardizeCtx {
  Tensor4 y;
  double invstd = 0.0;
};
Tensor4 standardize_clip(const Tensor4& x, StandardizeCtx* ctx);
Tensor4 standardize_backward(const StandardizeCtx& ctx, const Tensor4& dy);

// Activation record for one encoder pass; lets two forwards coexist before
// either is walked backward.
struct Tape {
  bool training = false;
  std::size_t t_in = 0;
  StandardizeCtx std_ctx;
  Conv3d::Ctx stem_conv;
  BatchNorm3d::Ctx stem_bn;
  Relu::Ctx stem_relu;
  AvgPool3d::Ctx enc_pool[4];
  Conv3d::Ctx enc_conv[4];
  BatchNorm3d::Ctx enc_bn[4];
  Relu::Ctx enc_relu[4];
  ConvTransposeTemporal::Ctx up_t[2];
  BatchNorm3d::Ctx up_bn[2];
  Relu::Ctx up_relu[2];
  TemporalResize::Ctx resize;
  AdaptivePoolSpatial::Ctx pool_s;
  Conv3d::Ctx head;
};

// Encoder from an rgb clip to a t x s x s spatiotemporal signal block. The
// spatial stem halves nothing; four pooled stages shrink 128 -> 8 while the
// middle two also halve time, and two transposed-convolution stages bring the
// frame count back before the spatial grid is pooled to s x s.
class RppgEncoder {
 public:
  explicit RppgEncoder(const ModelConfig& cfg, uint64_t init_seed = 0);
  explicit RppgEncoder(const Checkpoint& ckpt);

  const ModelConfig& config() const { return cfg_; }

  // Full pass: validate, standardize, run the network. Input must be
  // (3, t, 128, 128) with t covering at least two seconds of video.
  STBlock forward(const Tensor4& video, bool training, Tape* tape = nullptr);
  // Network only, on an already-standardized tensor; returns (1, t, s, s).
  Tensor4 forward_raw(const Tensor4& x, bool training, Tape* tape = nullptr);

  // Gradient with respect to the raw input clip given d loss / d block.
  Tensor4 backward(const Tape& tape, const STBlock& d_block, bool param_grads);
  Tensor4 backward_raw(const Tape& tape, const Tensor4& dy, bool param_grads);

  std::vector<Param*> parameters();
  std::size_t parameter_count() const;
  // Parameters plus normalization running statistics; what a checkpoint holds.
  std::vector<std::pair<std::string, std::vector<double>*>> state_tensors();

  void save(const std::filesystem::path& path) const;

  uint64_t forward_count() const { return forward_count_; }
  void reset_forward_count() { forward_count_ = 0; }

  // Inclusive input-frame range a given output frame can depend on.
  std::pair<std::size_t, std::size_t> temporal_dependency_range(std::size_t t_out,
                                                                std::size_t t_len) const;
  // Inclusive input-pixel range feeding one output cell index (per axis).
  std::pair<std::size_t, std::size_t> spatial_dependency_range(std::size_t cell) const;

  static constexpr std::size_t kInputSide = 128;

 private:
  void load_state(const Checkpoint& ckpt);
  std::size_t min_frames() const;

  ModelConfig cfg_;
  Conv3d stem_conv_;
  BatchNorm3d stem_bn_;
  AvgPool3d enc_pool_[4];
  Conv3d enc_conv_[4];
  BatchNorm3d enc_bn_[4];
  ConvTransposeTemporal up_t_[2];
  BatchNorm3d up_bn_[2];
  Conv3d head_;
  uint64_t forward_count_ = 0;
};

}  // namespace pulsegrid
