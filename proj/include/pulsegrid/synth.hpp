#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pulsegrid/common.hpp"
#include "pulsegrid/ingest.hpp"
#include "pulsegrid/signal.hpp"

namespace pulsegrid {

struct InvalidSpec : Error {
  using Error::Error;
};
struct RangeTooNarrow : Error {
  using Error::Error;
};

// Half-open pixel rectangle [x0, x0 + w) x [y0, y0 + h).
struct Rect {
  std::size_t x0 = 0;
  std::size_t y0 = 0;
  std::size_t w = 0;
  std::size_t h = 0;

  bool contains(std::size_t x, std::size_t y) const {
    return x >= x0 && x < x0 + w && y >= y0 && y < y0 + h;
  }
  bool disjoint(const Rect& o) const {
    return x0 + w <= o.x0 || o.x0 + o.w <= x0 || y0 + h <= o.y0 || o.y0 + o.h <= y0;
  }
};

// A periodic patch that flashes at its own frequency, independent of the
// pulse — the planted confounder for robustness experiments.
struct Distractor {
  Rect region;
  double frequency_hz = 0.0;
};

// Recipe for one synthetic face video. Defaults give a 128 px frame whose
// skin region crops to exactly the full frame through the standard landmark
// path, a pulse too weak to see in any single pixel but strong in the
// region mean, and no distractor.
struct SynthSpec {
  double hr_bpm = 75.0;
  double duration_s = 60.0;
  double fps = 10.0;
  std::size_t image_size = 128;
  Rect skin_region{11, 11, 107, 107};
  double pulse_amplitude = 0.02;  // fractional intensity modulation
  double noise_std = 0.04;        // per-pixel Gaussian sigma
  double hr_drift = 0.0;          // total linear HR change over the video, bpm
  std::optional<Distractor> distractor;

  std::string to_json() const;
  static SynthSpec from_json(const std::string& text);
};

// Everything generate() knows about a finished video: the frames, the exact
// modulation waveform used (ground truth), the instantaneous HR per frame,
// and a landmark track tracing the skin-region corners so the ingest crop
// path runs unmodified.
struct SynthVideo {
  std::vector<Image> frames;
  double fps = 0.0;
  Waveform ground_truth;
  std::vector<double> hr_bpm;
  LandmarkTrack landmarks;
};

// Render the video for a spec. Deterministic in (spec, seed); pixel values
// are snapped to the 16-bit storage lattice so a store round trip is exact.
// Throws InvalidSpec when the spec breaks its invariants.
SynthVideo generate(const SynthSpec& spec, std::uint64_t seed);

// Render only frames [t0, t1) of the same video; frame t of any range is
// bit-identical to frame t of the full render. Ground truth, HR, and
// landmarks still cover only the requested range.
SynthVideo generate_range(const SynthSpec& spec, std::uint64_t seed, std::size_t t0,
                          std::size_t t1);

// The per-frame pulse waveform value and instantaneous HR for a spec:
// a fundamental at the (linearly drifting) heart rate plus a 0.3-amplitude
// second harmonic.
void pulse_series(const SynthSpec& spec, std::size_t t0, std::size_t t1,
                  std::vector<double>* wave, std::vector<double>* hr);

struct CohortParams {
  std::size_t n_videos = 6;
  double hr_lo_bpm = 55.0;
  double hr_hi_bpm = 150.0;
  double clip_length_s = 10.0;  // training window
  SynthSpec base;               // per-video template; hr_bpm is overwritten
  // Optional flashing-patch confounder. Leaving both bounds at zero keeps the
  // cohort clean; setting them plants a distractor in every video, with rates
  // spread evenly over [lo, hi] bpm so no single frequency gives it away.
  double distractor_lo_bpm = 0.0;
  double distractor_hi_bpm = 0.0;
  Rect distractor_region{0, 0, 10, 10};
};

// Files make_cohort leaves under out_dir.
struct CohortLayout {
  std::filesystem::path train_manifest;  // 10 s training clips, random offsets
  std::filesystem::path eval_manifest;   // one full-length clip per video
  std::vector<std::string> sources;      // video ids, "v0", "v1", ...
  std::vector<double> hr_bpm;            // target HR assigned to each video
};

// Generate n videos with HRs spread at least 5 bpm apart across
// [hr_lo, hr_hi], push each through the landmark crop path, and write
// training clips, whole-video eval clips, and ground-truth waveform files
// (gt/<source>.txt) in the ingest store formats. Throws RangeTooNarrow when
// the range cannot hold n HRs at that spacing, InvalidSpec for a bad base
// spec or n < 2.
CohortLayout make_cohort(const CohortParams& params, std::uint64_t seed,
                         const std::filesystem::path& out_dir);

}  // namespace pulsegrid
