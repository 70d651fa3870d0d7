#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "pulsegrid/common.hpp"
#include "pulsegrid/ingest.hpp"
#include "pulsegrid/model.hpp"
#include "pulsegrid/nn.hpp"

namespace pulsegrid {

struct SingleVideo : Error {
  using Error::Error;
};
struct Interrupted : Error {
  using Error::Error;
};
struct BadConfig : Error {
  using Error::Error;
};

// Knobs of one training run. The defaults are the reference recipe; tests
// shrink the model and shorten the clips to fit their time budgets.
struct TrainConfig {
  double clip_length_s = 10.0;  // training window, seconds; 5, 10 or 30
  std::size_t k = 4;            // sampled waveforms per spatial cell
  std::size_t s_out = 2;        // spatial grid of the encoder output
  std::size_t base_channels = 4;
  double learning_rate = 1e-5;
  double weight_decay = 0.0;
  std::size_t epochs = 30;
  std::size_t grad_accum = 1;        // pairs folded into each optimizer update
  std::uint64_t seed = 1;
  std::size_t ipr_eval_every = 20;   // steps between monitor sweeps; 0 disables
  std::size_t stop_after_steps = 0;  // halt point for resume drills; 0 = run to the end

  std::string to_json() const;
  // Missing fields keep their defaults; an unknown field throws BadConfig.
  static TrainConfig from_json(const std::string& text);
};

// Field sanity: the window on its supported grid, at least two samples per
// spectrum set, a legal spatial grid, nonnegative rates. Throws BadConfig.
void validate_config(const TrainConfig& cfg);

// The encoder a fresh run starts from: architecture fields out of cfg,
// weights drawn from the run seed, frame rate from the data.
RppgEncoder init_model(const TrainConfig& cfg, double frame_rate);

// One epoch's pairing, as index pairs into manifest.entries. Clips from the
// most numerous sources pair off first (ties broken at random), so a
// balanced cohort pairs every clip exactly once; the two members of a pair
// always come from different sources, and clips that cannot pair
// cross-source sit the epoch out. Reshuffles deterministically per
// (seed, epoch). Throws SingleVideo on fewer than two distinct sources.
std::vector<std::pair<std::size_t, std::size_t>> make_pairs(const Manifest& manifest,
                                                            std::uint64_t seed,
                                                            std::size_t epoch);

// Scalars reported by one optimization step.
struct StepStats {
  double loss = 0.0;
  double lp = 0.0;  // within-video attraction term
  double ln = 0.0;  // cross-video repulsion term
};

// Drives optimization of one encoder; owns the optimizer and the gradient
// accumulation window.
class Trainer {
 public:
  Trainer(RppgEncoder* model, const TrainConfig& cfg);

  // One pair of equal-length clips through the contrastive objective: a
  // single training forward per clip, sampled spectra on both blocks, loss,
  // backward — and, once grad_accum pairs have accumulated, one optimizer
  // update. The rng drives waveform sampling only.
  StepStats train_step(const Tensor4& clip_a, const Tensor4& clip_b, Rng& rng);

  AdamW& opt() { return opt_; }

 private:
  RppgEncoder* model_;
  TrainConfig cfg_;
  AdamW opt_;
  std::size_t accum_fill_ = 0;
};

// A held-out clip with its reference heart rate, for convergence monitoring.
struct MonitorClip {
  std::filesystem::path file;
  double hr_bpm = 0.0;
  std::size_t frames = 0;  // cap on leading frames used; 0 = whole clip
};

// Monitor clips out of a manifest whose extra block records per-source heart
// rates, the way synthetic cohorts write them. Empty when no such block.
std::vector<MonitorClip> monitor_set(const std::filesystem::path& manifest_path,
                                     std::size_t frames = 0);

// Mean irrelevant-power ratio of the eval-mode spatial average over the
// monitor clips. A clip whose output carries no band power counts as 1, the
// worst ratio, so a collapsed model cannot look converged.
double monitor_ipr(RppgEncoder& model, const std::vector<MonitorClip>& monitors);

// Artifacts fit leaves in the run directory.
struct FitResult {
  std::filesystem::path final_checkpoint;   // weights after the last step
  std::filesystem::path best_checkpoint;    // lowest-IPR weights; empty when unmonitored
  std::filesystem::path resume_checkpoint;  // full training state, refreshed every step
  std::filesystem::path log_file;
  std::size_t steps = 0;  // completed across every session of the run
  double first_ipr = std::numeric_limits<double>::quiet_NaN();
  double last_ipr = std::numeric_limits<double>::quiet_NaN();
  double best_ipr = std::numeric_limits<double>::quiet_NaN();
};

// Run — or resume — a training session in run_dir: epochs x pairs steps, one
// comma-separated log line per step (step, loss, lp, ln, wall seconds, and
// the sweep IPR when one ran), periodic monitor sweeps, and atomically
// replaced checkpoints. A populated run directory picks up exactly where it
// stopped and replays the identical step sequence. Throws SingleVideo,
// BadConfig when the config contradicts the manifest or an earlier session
// of the same run, and Interrupted — after persisting clean resume state —
// when the stop flag rises or stop_after_steps is reached.
FitResult fit(const std::filesystem::path& manifest_path, const TrainConfig& cfg,
              const std::filesystem::path& run_dir,
              const std::vector<MonitorClip>& monitors = {},
              const std::atomic<bool>* stop = nullptr);

}  // namespace pulsegrid
