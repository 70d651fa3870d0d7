#include "pulsegrid/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

namespace pulsegrid {

namespace {

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

// Pull one numeric value out of a flat machine-written JSON object.
double json_number(const std::string& json, const std::string& key) {
  const std::string pat = "\"" + key + "\":";
  const std::size_t at = json.find(pat);
  if (at == std::string::npos)
    throw CorruptCheckpoint("CorruptCheckpoint: config missing key " + key);
  const char* start = json.c_str() + at + pat.size();
  char* end = nullptr;
  const double val = std::strtod(start, &end);
  if (end == start) throw CorruptCheckpoint("CorruptCheckpoint: config key " + key + " not numeric");
  return val;
}

// One step of a layer chain, viewed along a single axis.
struct SpanOp {
  enum Kind { kConv, kPool, kTconv, kResize, kRegion } kind;
  std::size_t k = 0, pad = 0;
  std::size_t in_len = 0, out_len = 0;
  std::size_t region_out = 0;  // kRegion: output grid size
};

// Inclusive input range that an inclusive output range can draw on.
std::pair<std::size_t, std::size_t> propagate(const SpanOp& op, std::size_t lo, std::size_t hi) {
  const std::size_t last = op.in_len - 1;
  auto clamp = [last](long x) {
    if (x < 0) return static_cast<std::size_t>(0);
    return std::min(static_cast<std::size_t>(x), last);
  };
  switch (op.kind) {
    case SpanOp::kConv: {
      const long a = static_cast<long>(lo) - static_cast<long>(op.pad);
      const long b = static_cast<long>(hi) + static_cast<long>(op.k - 1 - op.pad);
      return {clamp(a), clamp(b)};
    }
    case SpanOp::kPool:
      return {clamp(static_cast<long>(lo * op.k)), clamp(static_cast<long>(hi * op.k + op.k - 1))};
    case SpanOp::kTconv: {
      // o = 2 i - pad + m with m in [0, k)
      long a = static_cast<long>(lo) + static_cast<long>(op.pad) - static_cast<long>(op.k - 1);
      a = a >= 0 ? (a + 1) / 2 : 0;
      const long b = (static_cast<long>(hi) + static_cast<long>(op.pad)) / 2;
      return {clamp(a), clamp(b)};
    }
    case SpanOp::kResize: {
      const double s0 = TemporalResize::src_pos(lo, op.in_len, op.out_len);
      const double s1 = TemporalResize::src_pos(hi, op.in_len, op.out_len);
      const long a = static_cast<long>(std::floor(s0));
      const long b = static_cast<long>(std::floor(s1)) + 1;
      return {clamp(a), clamp(b)};
    }
    case SpanOp::kRegion: {
      const auto r0 = AdaptivePoolSpatial::region(lo, op.in_len, op.region_out);
      const auto r1 = AdaptivePoolSpatial::region(hi, op.in_len, op.region_out);
      return {r0.first, r1.second - 1};
    }
  }
  return {0, last};
}

std::pair<std::size_t, std::size_t> propagate_chain(const std::vector<SpanOp>& ops,
                                                    std::size_t lo, std::size_t hi) {
  for (auto it = ops.rbegin(); it != ops.rend(); ++it) {
    const auto [a, b] = propagate(*it, lo, hi);
    lo = a;
    hi = b;
  }
  return {lo, hi};
}

}  // namespace

std::string ModelConfig::to_json() const {
  return "{\"s_out\":" + std::to_string(s_out) +
         ",\"base_channels\":" + std::to_string(base_channels) +
         ",\"frame_rate\":" + format_double(frame_rate) +
         ",\"init_gain\":" + format_double(init_gain) + "}";
}

ModelConfig ModelConfig::from_json(const std::string& json) {
  ModelConfig cfg;
  cfg.s_out = static_cast<std::size_t>(json_number(json, "s_out"));
  cfg.base_channels = static_cast<std::size_t>(json_number(json, "base_channels"));
  cfg.frame_rate = json_number(json, "frame_rate");
  cfg.init_gain = json_number(json, "init_gain");
  return cfg;
}

Tensor4 standardize_clip(const Tensor4& x, StandardizeCtx* ctx) {
  const std::size_t n = x.size();
  if (n == 0) throw BadShape("BadShape: empty clip");
  Tensor4 y(x.c, x.t, x.h, x.w);
  // A flat clip carries no signal; map it to exact silence instead of
  // amplifying summation residue. Anything else divides by the plain standard
  // deviation, which keeps power-of-two intensity rescales exactly invisible.
  bool constant = true;
  for (double v : x.v)
    if (v != x.v[0]) {
      constant = false;
      break;
    }
  if (constant) {
    if (ctx) {
      ctx->invstd = 0.0;
      ctx->y = y;
    }
    return y;
  }
  double sum = 0.0;
  for (double v : x.v) sum += v;
  const double mean = sum / static_cast<double>(n);
  double sq = 0.0;
  for (double v : x.v) {
    const double d = v - mean;
    sq += d * d;
  }
  const double invstd = 1.0 / std::sqrt(sq / static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) y.v[i] = (x.v[i] - mean) * invstd;
  if (ctx) {
    ctx->invstd = invstd;
    ctx->y = y;
  }
  return y;
}

Tensor4 standardize_backward(const StandardizeCtx& ctx, const Tensor4& dy) {
  const std::size_t n = dy.size();
  double s0 = 0.0, s1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    s0 += dy.v[i];
    s1 += dy.v[i] * ctx.y.v[i];
  }
  const double c0 = s0 / static_cast<double>(n);
  const double c1 = s1 / static_cast<double>(n);
  Tensor4 dx(dy.c, dy.t, dy.h, dy.w);
  for (std::size_t i = 0; i < n; ++i)
    dx.v[i] = ctx.invstd * (dy.v[i] - c0 - ctx.y.v[i] * c1);
  return dx;
}

namespace {

void validate_config(const ModelConfig& cfg) {
  if (cfg.s_out != 1 && cfg.s_out != 2 && cfg.s_out != 4 && cfg.s_out != 8)
    throw Error("ModelConfig: s_out must be 1, 2, 4 or 8");
  if (cfg.base_channels == 0) throw Error("ModelConfig: base_channels must be positive");
  if (!(cfg.frame_rate > 0.0)) throw Error("ModelConfig: frame_rate must be positive");
  if (!(cfg.init_gain > 0.0)) throw Error("ModelConfig: init_gain must be positive");
}

}  // namespace

RppgEncoder::RppgEncoder(const ModelConfig& cfg, uint64_t init_seed)
    : cfg_((validate_config(cfg), cfg)),
      stem_conv_("stem.conv", 3, cfg.base_channels, {1, 5, 5}, {0, 2, 2}),
      stem_bn_("stem.bn", cfg.base_channels),
      enc_pool_{AvgPool3d({1, 2, 2}), AvgPool3d({2, 2, 2}), AvgPool3d({2, 2, 2}),
                AvgPool3d({1, 2, 2})},
      enc_conv_{Conv3d("enc1.conv", cfg.base_channels, 2 * cfg.base_channels, {3, 3, 3}, {1, 1, 1}),
                Conv3d("enc2.conv", 2 * cfg.base_channels, 2 * cfg.base_channels, {3, 3, 3},
                       {1, 1, 1}),
                Conv3d("enc3.conv", 2 * cfg.base_channels, 2 * cfg.base_channels, {3, 3, 3},
                       {1, 1, 1}),
                Conv3d("enc4.conv", 2 * cfg.base_channels, 2 * cfg.base_channels, {3, 3, 3},
                       {1, 1, 1})},
      enc_bn_{BatchNorm3d("enc1.bn", 2 * cfg.base_channels),
              BatchNorm3d("enc2.bn", 2 * cfg.base_channels),
              BatchNorm3d("enc3.bn", 2 * cfg.base_channels),
              BatchNorm3d("enc4.bn", 2 * cfg.base_channels)},
      up_t_{ConvTransposeTemporal("up1.tconv", 2 * cfg.base_channels, 2 * cfg.base_channels),
            ConvTransposeTemporal("up2.tconv", 2 * cfg.base_channels, 2 * cfg.base_channels)},
      up_bn_{BatchNorm3d("up1.bn", 2 * cfg.base_channels),
             BatchNorm3d("up2.bn", 2 * cfg.base_channels)},
      head_("head.conv", 2 * cfg.base_channels, 1, {1, 1, 1}, {0, 0, 0}) {
  Rng rng(derive_seed(init_seed, "model-init"));
  stem_conv_.init(rng, cfg_.init_gain);
  for (auto& c : enc_conv_) c.init(rng, cfg_.init_gain);
  for (auto& t : up_t_) t.init(rng, cfg_.init_gain);
  head_.init(rng, cfg_.init_gain);
}

RppgEncoder::RppgEncoder(const Checkpoint& ckpt)
    : RppgEncoder(ModelConfig::from_json(ckpt.config_json), 0) {
  load_state(ckpt);
}

std::size_t RppgEncoder::min_frames() const {
  const auto two_seconds =
      static_cast<std::size_t>(std::ceil(2.0 * cfg_.frame_rate - 1e-9));
  return std::max<std::size_t>(two_seconds, 4);
}

STBlock RppgEncoder::forward(const Tensor4& video, bool training, Tape* tape) {
  if (video.c != 3 || video.h != kInputSide || video.w != kInputSide)
    throw BadShape("BadShape: expected a 3x t x 128 x 128 clip, got " +
                   std::to_string(video.c) + "x" + std::to_string(video.t) + "x" +
                   std::to_string(video.h) + "x" + std::to_string(video.w));
  if (video.t < min_frames())
    throw TooShort("TooShort: clip has " + std::to_string(video.t) +
                   " frames, need at least " + std::to_string(min_frames()));
  StandardizeCtx local;
  StandardizeCtx* sctx = tape ? &tape->std_ctx : &local;
  Tensor4 x = standardize_clip(video, sctx);
  Tensor4 y = forward_raw(x, training, tape);
  STBlock block;
  block.t = y.t;
  block.s = cfg_.s_out;
  block.fs = cfg_.frame_rate;
  block.values = std::move(y.v);
  return block;
}

Tensor4 RppgEncoder::forward_raw(const Tensor4& x, bool training, Tape* tape) {
  ++forward_count_;
  if (tape) {
    tape->training = training;
    tape->t_in = x.t;
  }
  auto* t = tape;
  Tensor4 h = stem_conv_.forward(x, t ? &t->stem_conv : nullptr);
  h = stem_bn_.forward(h, training, t ? &t->stem_bn : nullptr);
  h = Relu::forward(h, t ? &t->stem_relu : nullptr);
  for (int i = 0; i < 4; ++i) {
    h = enc_pool_[i].forward(h, t ? &t->enc_pool[i] : nullptr);
    h = enc_conv_[i].forward(h, t ? &t->enc_conv[i] : nullptr);
    h = enc_bn_[i].forward(h, training, t ? &t->enc_bn[i] : nullptr);
    h = Relu::forward(h, t ? &t->enc_relu[i] : nullptr);
  }
  for (int i = 0; i < 2; ++i) {
    h = up_t_[i].forward(h, t ? &t->up_t[i] : nullptr);
    h = up_bn_[i].forward(h, training, t ? &t->up_bn[i] : nullptr);
    h = Relu::forward(h, t ? &t->up_relu[i] : nullptr);
  }
  h = TemporalResize::forward(h, x.t, t ? &t->resize : nullptr);
  h = AdaptivePoolSpatial::forward(h, cfg_.s_out, t ? &t->pool_s : nullptr);
  h = head_.forward(h, t ? &t->head : nullptr);
  return h;
}

Tensor4 RppgEncoder::backward(const Tape& tape, const STBlock& d_block, bool param_grads) {
  Tensor4 dy(1, d_block.t, d_block.s, d_block.s);
  if (d_block.values.size() != dy.size())
    throw BadShape("BadShape: block gradient size mismatch");
  dy.v = d_block.values;
  Tensor4 dx = backward_raw(tape, dy, param_grads);
  return standardize_backward(tape.std_ctx, dx);
}

Tensor4 RppgEncoder::backward_raw(const Tape& tape, const Tensor4& dy, bool param_grads) {
  if (param_grads && !tape.training)
    throw Error("RppgEncoder: parameter gradients need a training-mode tape");
  Tensor4 g = head_.backward(tape.head, dy, param_grads);
  g = AdaptivePoolSpatial::backward(tape.pool_s, g);
  g = TemporalResize::backward(tape.resize, g);
  for (int i = 1; i >= 0; --i) {
    g = Relu::backward(tape.up_relu[i], g);
    g = up_bn_[i].backward(tape.up_bn[i], g, param_grads);
    g = up_t_[i].backward(tape.up_t[i], g, param_grads);
  }
  for (int i = 3; i >= 0; --i) {
    g = Relu::backward(tape.enc_relu[i], g);
    g = enc_bn_[i].backward(tape.enc_bn[i], g, param_grads);
    g = enc_conv_[i].backward(tape.enc_conv[i], g, param_grads);
    g = enc_pool_[i].backward(tape.enc_pool[i], g);
  }
  g = Relu::backward(tape.stem_relu, g);
  g = stem_bn_.backward(tape.stem_bn, g, param_grads);
  g = stem_conv_.backward(tape.stem_conv, g, param_grads);
  return g;
}

std::vector<Param*> RppgEncoder::parameters() {
  std::vector<Param*> out = {&stem_conv_.weight, &stem_conv_.bias, &stem_bn_.gamma,
                             &stem_bn_.beta};
  for (int i = 0; i < 4; ++i) {
    out.push_back(&enc_conv_[i].weight);
    out.push_back(&enc_conv_[i].bias);
    out.push_back(&enc_bn_[i].gamma);
    out.push_back(&enc_bn_[i].beta);
  }
  for (int i = 0; i < 2; ++i) {
    out.push_back(&up_t_[i].weight);
    out.push_back(&up_t_[i].bias);
    out.push_back(&up_bn_[i].gamma);
    out.push_back(&up_bn_[i].beta);
  }
  out.push_back(&head_.weight);
  out.push_back(&head_.bias);
  return out;
}

std::size_t RppgEncoder::parameter_count() const {
  std::size_t n = 0;
  auto add = [&n](const Param& p) { n += p.count(); };
  add(stem_conv_.weight);
  add(stem_conv_.bias);
  add(stem_bn_.gamma);
  add(stem_bn_.beta);
  for (int i = 0; i < 4; ++i) {
    add(enc_conv_[i].weight);
    add(enc_conv_[i].bias);
    add(enc_bn_[i].gamma);
    add(enc_bn_[i].beta);
  }
  for (int i = 0; i < 2; ++i) {
    add(up_t_[i].weight);
    add(up_t_[i].bias);
    add(up_bn_[i].gamma);
    add(up_bn_[i].beta);
  }
  add(head_.weight);
  add(head_.bias);
  return n;
}

std::vector<std::pair<std::string, std::vector<double>*>> RppgEncoder::state_tensors() {
  std::vector<std::pair<std::string, std::vector<double>*>> out;
  for (Param* p : parameters()) out.emplace_back(p->name, &p->w);
  auto add_bn = [&out](BatchNorm3d& bn) {
    out.emplace_back(bn.name + ".running_mean", &bn.running_mean);
    out.emplace_back(bn.name + ".running_var", &bn.running_var);
  };
  add_bn(stem_bn_);
  for (auto& bn : enc_bn_) add_bn(bn);
  for (auto& bn : up_bn_) add_bn(bn);
  return out;
}

void RppgEncoder::save(const std::filesystem::path& path) const {
  auto* self = const_cast<RppgEncoder*>(this);
  std::vector<std::pair<std::string, const std::vector<double>*>> tensors;
  for (const auto& [name, vec] : self->state_tensors()) tensors.emplace_back(name, vec);
  write_checkpoint(path, cfg_.to_json(), tensors);
}

void RppgEncoder::load_state(const Checkpoint& ckpt) {
  auto mine = state_tensors();
  for (auto& [name, vec] : mine) {
    const std::vector<double>* src = ckpt.find(name);
    if (!src)
      throw CorruptCheckpoint("CorruptCheckpoint: tensor " + name + " missing");
    if (src->size() != vec->size())
      throw CorruptCheckpoint("CorruptCheckpoint: tensor " + name + " has " +
                              std::to_string(src->size()) + " values, expected " +
                              std::to_string(vec->size()));
    *vec = *src;
  }
  for (const auto& [name, vec] : ckpt.tensors) {
    if (name.rfind("opt.", 0) == 0) continue;  // optimizer state rides along in train checkpoints
    bool known = false;
    for (const auto& [mname, mvec] : mine)
      if (mname == name) known = true;
    if (!known)
      throw CorruptCheckpoint("CorruptCheckpoint: unexpected tensor " + name);
  }
}

std::pair<std::size_t, std::size_t> RppgEncoder::temporal_dependency_range(
    std::size_t t_out, std::size_t t_len) const {
  std::vector<SpanOp> ops;
  std::size_t len = t_len;
  auto conv = [&ops, &len]() {
    ops.push_back({SpanOp::kConv, 3, 1, len, len, 0});
  };
  auto pool = [&ops, &len]() {
    ops.push_back({SpanOp::kPool, 2, 0, len, len / 2, 0});
    len /= 2;
  };
  conv();            // enc1 (temporal kernel 3 at full rate)
  pool();            // enc2
  conv();
  pool();            // enc3
  conv();
  conv();            // enc4 (no temporal pooling)
  for (int i = 0; i < 2; ++i) {
    ops.push_back({SpanOp::kTconv, ConvTransposeTemporal::kKernel, ConvTransposeTemporal::kPad,
                   len, 2 * len, 0});
    len *= 2;
  }
  if (len != t_len) ops.push_back({SpanOp::kResize, 0, 0, len, t_len, 0});
  return propagate_chain(ops, t_out, t_out);
}

std::pair<std::size_t, std::size_t> RppgEncoder::spatial_dependency_range(std::size_t cell) const {
  std::vector<SpanOp> ops;
  std::size_t len = kInputSide;
  ops.push_back({SpanOp::kConv, 5, 2, len, len, 0});  // stem
  for (int i = 0; i < 4; ++i) {
    ops.push_back({SpanOp::kPool, 2, 0, len, len / 2, 0});
    len /= 2;
    ops.push_back({SpanOp::kConv, 3, 1, len, len, 0});
  }
  ops.push_back({SpanOp::kRegion, 0, 0, len, cfg_.s_out, cfg_.s_out});
  return propagate_chain(ops, cell, cell);
}

}  // namespace pulsegrid
