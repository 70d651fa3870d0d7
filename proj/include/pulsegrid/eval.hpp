#pragma once

#include <cstddef>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "pulsegrid/common.hpp"
#include "pulsegrid/ingest.hpp"
#include "pulsegrid/model.hpp"
#include "pulsegrid/signal.hpp"

namespace pulsegrid {

// One scored test window. Degenerate windows (a trace whose window carries no
// band power, so no rate can be read off) keep their row with valid = false
// and NaN measurements; they are counted but never averaged.
struct WindowRow {
  std::string source;      // originating video id
  std::string file;        // clip path as listed in the manifest
  std::size_t window = 0;  // index within the clip, first window is 0
  double hr_pred = std::numeric_limits<double>::quiet_NaN();  // bpm
  double hr_true = std::numeric_limits<double>::quiet_NaN();  // bpm
  double ipr = std::numeric_limits<double>::quiet_NaN();
  bool valid = false;
};

// Per-clip results that exist independently of ground truth: the full-length
// rPPG estimate always, HRV only when the trace supports peak detection.
struct VideoEval {
  std::string source;
  std::string file;
  Waveform rppg;
  bool gt_missing = false;  // no reference for this clip; it contributes no rows
  std::optional<HRVReport> hrv;
};

// Windowed agreement study over one manifest. Aggregates are plain
// recomputations over the valid rows, so a reader can verify them from the
// row dump alone.
struct EvalReport {
  double window_s = 0.0;
  std::vector<WindowRow> rows;
  Agreement agreement;  // over valid rows; MAE/RMSE are NaN when none exist
  double mean_ipr = std::numeric_limits<double>::quiet_NaN();
  std::size_t n_windows = 0;
  std::size_t n_valid = 0;
  std::size_t n_degenerate = 0;
  std::vector<VideoEval> videos;
  std::string config_json;        // model configuration echo
  std::string checkpoint_digest;  // filled by the caller, see file_digest
};

// Spatially averaged pulse estimate for one preprocessed clip; length matches
// the clip's frame count. Inference only — running statistics are untouched,
// so repeated calls reproduce the same waveform bit for bit.
Waveform infer_rppg(const Tensor4& clip, RppgEncoder& model);

// Score every clip of a manifest in non-overlapping windows of window_s
// seconds (the short tail is dropped; no sample lands in two windows).
// Both the predicted and the reference rate come from the same band-limited
// spectral-peak estimator, so estimator bias cancels in the agreement
// numbers. Reference lookup per source uses the manifest's extra block:
// a gt_file series when present, else a fixed hr_bpm. Clips with neither
// still get their rPPG emitted but contribute no rows.
EvalReport evaluate(const std::filesystem::path& manifest_path, RppgEncoder& model,
                    double window_s = 30.0);

// Content digest of a file (16 hex digits), for tying a report to the exact
// checkpoint it scored.
std::string file_digest(const std::filesystem::path& path);

// Row dump: one CSV line per window, header included, doubles at full
// precision.
std::string report_csv(const EvalReport& report);

// Summary document: aggregates, per-video flags and HRV, run metadata.
std::string report_json(const EvalReport& report);

// Where the model looked: per-frame map of input-gradient magnitude,
// channel-reduced and normalized so the strongest pixel of the clip is 1.
// A clip whose gradient vanishes everywhere yields the all-zero map with
// degenerate set.
struct SaliencyMap {
  std::vector<double> values;  // t * side * side, frame-major
  std::size_t t = 0;
  std::size_t side = 0;
  bool degenerate = false;

  double* frame(std::size_t ti) { return values.data() + ti * side * side; }
  const double* frame(std::size_t ti) const { return values.data() + ti * side * side; }
  double at(std::size_t ti, std::size_t y, std::size_t x) const {
    return values[(ti * side + y) * side + x];
  }
};

// Gradient saliency against a reference pulse: score the Pearson correlation
// between the spatially averaged rPPG and `reference`, backpropagate it to
// the input pixels, and reduce |gradient| over channels per frame. The
// reference must have one sample per clip frame (LengthMismatch otherwise).
// A constant trace on either side has no usable correlation direction and
// yields the degenerate map.
SaliencyMap saliency(const Tensor4& clip, RppgEncoder& model, const Waveform& reference);

// Reference-free variant: score the projection of the trace onto a frozen
// standardized copy of itself. (A full two-sided correlation of a trace with
// its own frozen copy is stationary — its gradient vanishes identically — so
// the frozen side's statistics are held fixed to leave a usable direction.)
SaliencyMap saliency(const Tensor4& clip, RppgEncoder& model);

// One grayscale image per frame (frame_%06zu.ppm) under dir.
void write_saliency_frames(const std::filesystem::path& dir, const SaliencyMap& map);

// The clip re-rendered with saliency highlighted in red, written as a raw
// video directory (alpha scales the highlight strength).
void write_saliency_overlay(const std::filesystem::path& dir, const Tensor4& clip,
                            const SaliencyMap& map, double frame_rate, double alpha = 0.6);

}  // namespace pulsegrid
