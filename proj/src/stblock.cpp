#include "pulsegrid/stblock.hpp"

namespace pulsegrid {

void validate_block(const STBlock& block) {
  if (block.s != 1 && block.s != 2 && block.s != 4 && block.s != 8) {
    throw Error("STBlock: spatial length must be 1, 2, 4, or 8");
  }
  if (!(block.fs > 0.0)) throw Error("STBlock: frame rate must be positive");
  if (block.values.size() != block.t * block.s * block.s) {
    throw Error("STBlock: value count does not match T*S*S");
  }
  if (static_cast<double>(block.t) + 1e-9 < 2.0 * block.fs) {
    throw BlockTooShort("STBlock: need at least 2 s of frames");
  }
}

std::vector<std::pair<SampleSpec, Waveform>> sample_block(const STBlock& block, std::size_t k,
                                                          Rng& rng) {
  validate_block(block);
  if (k < 1) throw Error("sample_block: need at least one draw per cell");

  std::size_t dt = block.t / 2;
  auto t0_max = static_cast<int64_t>(block.t - dt);
  std::vector<std::pair<SampleSpec, Waveform>> out;
  out.reserve(block.s * block.s * k);
  for (std::size_t h = 0; h < block.s; ++h) {
    for (std::size_t w = 0; w < block.s; ++w) {
      for (std::size_t draw = 0; draw < k; ++draw) {
        auto t0 = static_cast<std::size_t>(rng.uniform_int(0, t0_max));
        Waveform wf{std::vector<double>(dt), block.fs};
        for (std::size_t ti = 0; ti < dt; ++ti) wf.samples[ti] = block.at(t0 + ti, h, w);
        out.emplace_back(SampleSpec{h, w, t0, dt}, std::move(wf));
      }
    }
  }
  return out;
}

Waveform spatial_average(const STBlock& block) {
  validate_block(block);
  Waveform out{std::vector<double>(block.t), block.fs};
  auto cells = static_cast<double>(block.s * block.s);
  for (std::size_t ti = 0; ti < block.t; ++ti) {
    double acc = 0.0;
    for (std::size_t h = 0; h < block.s; ++h) {
      for (std::size_t w = 0; w < block.s; ++w) acc += block.at(ti, h, w);
    }
    out.samples[ti] = acc / cells;
  }
  return out;
}

}  // namespace pulsegrid
