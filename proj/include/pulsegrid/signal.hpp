#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "pulsegrid/common.hpp"

namespace pulsegrid {

// Pulse-rate band shared by every spectral routine, in Hz (39.6 to 249.6 bpm).
inline constexpr double kBandLowHz = 0.66;
inline constexpr double kBandHighHz = 4.16;

// Spectral grid spacings: coarse for the training objective, fine for the
// test-time heart-rate readout (0.1 bpm).
inline constexpr double kTrainPsdResolutionHz = 1.0 / 60.0;
inline constexpr double kTestPsdResolutionHz = 1.0 / 600.0;

// Half width of the window around the reference frequency used by
// irrelevant_power_ratio (3 bpm).
inline constexpr double kIprHalfWindowHz = 0.05;

struct TooShort : Error {
  using Error::Error;
};
struct ConstantSignal : Error {
  using Error::Error;
};
struct OutOfBand : Error {
  using Error::Error;
};
struct NoPeaks : Error {
  using Error::Error;
};
struct TooFewPeaks : Error {
  using Error::Error;
};
struct LengthMismatch : Error {
  using Error::Error;
};

// A uniformly sampled 1-d signal, arbitrary units.
struct Waveform {
  std::vector<double> samples;
  double fs = 0.0;  // sampling rate, Hz

  double duration_s() const { return static_cast<double>(samples.size()) / fs; }
};

// Power spectrum on an ascending grid restricted to [kBandLowHz, kBandHighHz],
// normalized to unit sum.
struct BandPSD {
  std::vector<double> freqs;  // Hz, ascending, all inside the band
  std::vector<double> power;  // nonnegative, sums to 1
  double resolution = 0.0;    // grid spacing, Hz
};

// Spectral heart-rate-variability summary of an inter-beat-interval series.
struct HRVReport {
  double rf_hz = 0.0;  // respiration frequency: spectral peak in [0.15, 0.4] Hz
  double lf_nu = 0.0;  // low-frequency power, normalized units
  double hf_nu = 0.0;  // high-frequency power, normalized units
  double lf_hf = 0.0;  // LF/HF ratio; +inf when the HF band is empty
  bool zero_hf = false;
};

// Band-limited mean-removed periodogram of a fixed-length signal, with an
// analytic gradient so spectra can sit inside a training objective.
//
// The signal is mean-removed and conceptually zero-padded until the DFT bin
// spacing drops to the requested resolution; only bins inside the pulse band
// (and below Nyquist) are evaluated, so cost is O(n_bins * n_samples) rather
// than a full transform. Powers are normalized to sum to one, which caps the
// spectral distances the losses consume.
class PsdTransform {
 public:
  // Throws TooShort for n_samples < 2 and Error when the band holds no bins
  // at this sampling rate.
  PsdTransform(std::size_t n_samples, double fs, double resolution);

  std::size_t n_samples() const { return n_; }
  std::size_t n_bins() const { return freqs_.size(); }
  const std::vector<double>& freqs() const { return freqs_; }
  // Realized grid spacing; never coarser than the requested resolution.
  double resolution() const { return resolution_; }

  // Intermediates kept for the backward pass: raw DFT parts per band bin,
  // normalized output, and pre-normalization band power.
  struct State {
    std::vector<double> re, im;
    std::vector<double> power;
    double total = 0.0;
  };

  // Normalized band power. Throws ConstantSignal when the signal carries no
  // band power to normalize.
  std::vector<double> forward(const std::vector<double>& x, State* state = nullptr) const;

  // Gradient of a scalar loss with respect to the input samples, given the
  // gradient with respect to the normalized powers of the same forward call.
  std::vector<double> backward(const State& state, const std::vector<double>& d_power) const;

 private:
  std::size_t n_;
  double fs_;
  double resolution_;
  std::size_t n_padded_;
  std::vector<double> freqs_;
  std::vector<double> cos_, sin_;  // n_bins x n_samples, row major
};

// One-shot band-limited PSD of a waveform. Same estimator as PsdTransform;
// construct a PsdTransform directly when transforming many equal-length
// signals.
BandPSD compute_psd(const Waveform& w, double resolution = kTestPsdResolutionHz);

// Heart rate in bpm: 60 times the argmax frequency, ties toward the lower
// frequency.
double estimate_hr(const BandPSD& psd);

// Fraction of band power outside +/- half_window of hr_true_bpm. 0 means all
// power sits in the window; lower is better.
double irrelevant_power_ratio(const BandPSD& psd, double hr_true_bpm,
                              double half_window_hz = kIprHalfWindowHz);

// Zero-phase band-pass via DFT masking: bins outside [lo_hz, hi_hz] are
// zeroed and the signal reconstructed. Output is zero mean.
Waveform bandpass(const Waveform& w, double lo_hz = kBandLowHz, double hi_hz = kBandHighHz);

// Systolic peak picking: strict local maxima, greedily kept by descending
// amplitude under a minimum separation of half the dominant period. The input
// should be band-passed first. Returns ascending sample indices.
std::vector<std::size_t> detect_peaks(const Waveform& w);

// HRV features from peak indices. Inter-beat intervals are resampled at 4 Hz
// by linear interpolation, the low band is [0.04, 0.15) Hz and the high band
// [0.15, 0.4] Hz (boundary bin counted high). When the high band carries no
// power the report is flagged and lf_hf is +inf.
HRVReport hrv_metrics(const std::vector<std::size_t>& peak_indices, double fs);

struct Agreement {
  double mae = 0.0;
  double rmse = 0.0;
  // Pearson correlation; absent when either sequence is constant.
  std::optional<double> r;
};

Agreement agreement_metrics(const std::vector<double>& pred, const std::vector<double>& truth);

}  // namespace pulsegrid
