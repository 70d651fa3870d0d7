#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "pulsegrid/common.hpp"
#include "pulsegrid/signal.hpp"

namespace pulsegrid {

struct BlockTooShort : Error {
  using Error::Error;
};

// T x S x S grid of per-cell pulse traces at a common frame rate. Values are
// stored frame-major: index (t, h, w) maps to t*s*s + h*s + w, matching the
// encoder's output layout.
struct STBlock {
  std::vector<double> values;
  std::size_t t = 0;
  std::size_t s = 0;
  double fs = 0.0;

  double& at(std::size_t ti, std::size_t h, std::size_t w) {
    return values[(ti * s + h) * s + w];
  }
  double at(std::size_t ti, std::size_t h, std::size_t w) const {
    return values[(ti * s + h) * s + w];
  }
};

// Shape and duration contract: S in {1, 2, 4, 8}, at least 2 s of frames,
// value count T*S*S. Throws BlockTooShort or Error.
void validate_block(const STBlock& block);

// One temporal slice of one spatial cell: frames [t0, t0 + dt) at (h, w).
struct SampleSpec {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t t0 = 0;
  std::size_t dt = 0;
};

// K random draws per spatial cell, each floor(T/2) frames long with the start
// frame uniform over [0, T - dt]. Draw order is fixed (rows, then columns,
// then the K draws), so a seeded rng replays the exact sample list. Every
// waveform is a verbatim copy of its block slice.
std::vector<std::pair<SampleSpec, Waveform>> sample_block(const STBlock& block, std::size_t k,
                                                          Rng& rng);

// Mean over the S*S cells at every frame.
Waveform spatial_average(const STBlock& block);

}  // namespace pulsegrid
