#include "pulsegrid/signal.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace pulsegrid {

namespace {

// Tolerance for band-edge comparisons on frequency grids.
constexpr double kEdgeEps = 1e-9;

double mean_of(const std::vector<double>& x) {
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

bool all_equal(const std::vector<double>& x) {
  for (double v : x) {
    if (v != x.front()) return false;
  }
  return true;
}

void check_spectrum(const BandPSD& psd, const char* who) {
  if (psd.freqs.empty() || psd.freqs.size() != psd.power.size()) {
    throw Error(std::string(who) + ": malformed spectrum");
  }
}

}  // namespace

PsdTransform::PsdTransform(std::size_t n_samples, double fs, double resolution)
    : n_(n_samples), fs_(fs) {
  if (n_ < 2) throw TooShort("PsdTransform: need at least 2 samples");
  if (!(fs > 0.0)) throw Error("PsdTransform: sampling rate must be positive");
  if (!(resolution > 0.0)) throw Error("PsdTransform: resolution must be positive");

  // Pad until the bin spacing reaches the requested resolution; an already
  // long signal keeps its natural spacing.
  n_padded_ = std::max(n_, static_cast<std::size_t>(std::ceil(fs / resolution - kEdgeEps)));
  resolution_ = fs / static_cast<double>(n_padded_);

  // Band bins, excluding DC and anything past Nyquist.
  auto k_lo = static_cast<std::size_t>(std::ceil(kBandLowHz / resolution_ - kEdgeEps));
  k_lo = std::max<std::size_t>(k_lo, 1);
  auto k_hi = static_cast<std::size_t>(std::floor(kBandHighHz / resolution_ + kEdgeEps));
  k_hi = std::min(k_hi, n_padded_ / 2);
  if (k_hi < k_lo) throw Error("PsdTransform: no spectral bins inside the band");

  std::size_t bins = k_hi - k_lo + 1;
  freqs_.resize(bins);
  cos_.resize(bins * n_);
  sin_.resize(bins * n_);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t b = 0; b < bins; ++b) {
    std::size_t k = k_lo + b;
    freqs_[b] = static_cast<double>(k) * resolution_;
    double* cr = cos_.data() + b * n_;
    double* sr = sin_.data() + b * n_;
    for (std::size_t t = 0; t < n_; ++t) {
      // k*t stays far below 2^53; reducing mod the padded length keeps the
      // trig argument in one turn.
      std::size_t rem = (k * t) % n_padded_;
      double theta = two_pi * static_cast<double>(rem) / static_cast<double>(n_padded_);
      cr[t] = std::cos(theta);
      sr[t] = std::sin(theta);
    }
  }
}

std::vector<double> PsdTransform::forward(const std::vector<double>& x, State* state) const {
  if (x.size() != n_) throw Error("PsdTransform: input length mismatch");
  if (all_equal(x)) throw ConstantSignal("PsdTransform: constant input");

  double m = mean_of(x);
  std::vector<double> xm(n_);
  for (std::size_t t = 0; t < n_; ++t) xm[t] = x[t] - m;

  std::size_t bins = freqs_.size();
  std::vector<double> re(bins), im(bins);
  std::vector<double> out(bins);
  double total = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    const double* cr = cos_.data() + b * n_;
    const double* sr = sin_.data() + b * n_;
    double a = 0.0, c = 0.0;
    for (std::size_t t = 0; t < n_; ++t) {
      a += xm[t] * cr[t];
      c += xm[t] * sr[t];
    }
    re[b] = a;
    im[b] = c;
    out[b] = a * a + c * c;
    total += out[b];
  }
  if (!(total > 0.0)) throw ConstantSignal("PsdTransform: no band power to normalize");
  for (std::size_t b = 0; b < bins; ++b) out[b] /= total;

  if (state != nullptr) {
    state->re = std::move(re);
    state->im = std::move(im);
    state->power = out;
    state->total = total;
  }
  return out;
}

std::vector<double> PsdTransform::backward(const State& state,
                                           const std::vector<double>& d_power) const {
  std::size_t bins = freqs_.size();
  if (state.power.size() != bins || state.re.size() != bins || d_power.size() != bins) {
    throw Error("PsdTransform: backward state/gradient length mismatch");
  }
  // Quotient rule through the unit-sum normalization:
  // d raw_b = (d out_b - sum_j d out_j * out_j) / total.
  double dot = 0.0;
  for (std::size_t b = 0; b < bins; ++b) dot += d_power[b] * state.power[b];

  std::vector<double> g(n_, 0.0);
  for (std::size_t b = 0; b < bins; ++b) {
    double coef = (d_power[b] - dot) / state.total;
    if (coef == 0.0) continue;
    double cr2 = 2.0 * coef * state.re[b];
    double ci2 = 2.0 * coef * state.im[b];
    const double* cr = cos_.data() + b * n_;
    const double* sr = sin_.data() + b * n_;
    for (std::size_t t = 0; t < n_; ++t) g[t] += cr2 * cr[t] + ci2 * sr[t];
  }
  // Mean removal projects the mean out of the gradient as well.
  double gm = mean_of(g);
  for (std::size_t t = 0; t < n_; ++t) g[t] -= gm;
  return g;
}

BandPSD compute_psd(const Waveform& w, double resolution) {
  if (w.samples.size() < 2) throw TooShort("compute_psd: need at least 2 samples");
  if (!(w.fs > 0.0)) throw Error("compute_psd: sampling rate must be positive");
  if (resolution > 0.05 + kEdgeEps) throw Error("compute_psd: resolution coarser than 0.05 Hz");
  PsdTransform tf(w.samples.size(), w.fs, resolution);
  BandPSD psd;
  psd.power = tf.forward(w.samples);
  psd.freqs = tf.freqs();
  psd.resolution = tf.resolution();
  return psd;
}

double estimate_hr(const BandPSD& psd) {
  check_spectrum(psd, "estimate_hr");
  std::size_t best = 0;
  for (std::size_t i = 1; i < psd.power.size(); ++i) {
    // Strict comparison keeps the lower frequency on ties.
    if (psd.power[i] > psd.power[best]) best = i;
  }
  return 60.0 * psd.freqs[best];
}

double irrelevant_power_ratio(const BandPSD& psd, double hr_true_bpm, double half_window_hz) {
  check_spectrum(psd, "irrelevant_power_ratio");
  double f0 = hr_true_bpm / 60.0;
  if (f0 < kBandLowHz - kEdgeEps || f0 > kBandHighHz + kEdgeEps) {
    throw OutOfBand("irrelevant_power_ratio: reference frequency outside the band");
  }
  double total = 0.0, inside = 0.0;
  for (std::size_t i = 0; i < psd.power.size(); ++i) {
    total += psd.power[i];
    if (std::abs(psd.freqs[i] - f0) <= half_window_hz + kEdgeEps) inside += psd.power[i];
  }
  if (!(total > 0.0)) throw Error("irrelevant_power_ratio: zero total power");
  return std::clamp(1.0 - inside / total, 0.0, 1.0);
}

Waveform bandpass(const Waveform& w, double lo_hz, double hi_hz) {
  std::size_t n = w.samples.size();
  if (n < 2) throw TooShort("bandpass: need at least 2 samples");
  if (!(w.fs > 0.0)) throw Error("bandpass: sampling rate must be positive");
  if (!(lo_hz >= 0.0) || !(hi_hz > lo_hz)) throw Error("bandpass: bad band edges");

  constexpr double two_pi = 2.0 * std::numbers::pi;
  std::vector<double> tc(n), ts(n);
  for (std::size_t j = 0; j < n; ++j) {
    double theta = two_pi * static_cast<double>(j) / static_cast<double>(n);
    tc[j] = std::cos(theta);
    ts[j] = std::sin(theta);
  }

  double m = mean_of(w.samples);
  std::vector<double> xm(n);
  for (std::size_t t = 0; t < n; ++t) xm[t] = w.samples[t] - m;

  // Only in-band bins are ever computed; everything else is implicitly zeroed.
  std::size_t half = n / 2;
  std::vector<double> out(n, 0.0);
  for (std::size_t k = 1; k <= half; ++k) {
    double fk = static_cast<double>(k) * w.fs / static_cast<double>(n);
    if (fk < lo_hz - kEdgeEps || fk > hi_hz + kEdgeEps) continue;
    double a = 0.0, c = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      std::size_t idx = (k * t) % n;
      a += xm[t] * tc[idx];
      c += xm[t] * ts[idx];
    }
    // The Nyquist bin is its own mirror; every other bin pairs with n-k.
    double scale = (2 * k == n) ? 1.0 : 2.0;
    for (std::size_t t = 0; t < n; ++t) {
      std::size_t idx = (k * t) % n;
      out[t] += scale * (a * tc[idx] + c * ts[idx]);
    }
  }
  for (std::size_t t = 0; t < n; ++t) out[t] /= static_cast<double>(n);
  return Waveform{std::move(out), w.fs};
}

std::vector<std::size_t> detect_peaks(const Waveform& w) {
  const auto& x = w.samples;
  std::size_t n = x.size();
  if (n < 3) throw NoPeaks("detect_peaks: signal too short");

  // Local maxima, treating a run of equal values as one candidate at its
  // midpoint. A sampled peak can land exactly between two samples and tie
  // them bit for bit, which a strictly-greater scan would drop.
  std::vector<std::size_t> cand;
  for (std::size_t i = 1; i + 1 < n;) {
    if (x[i] <= x[i - 1]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j + 1 < n && x[j + 1] == x[i]) ++j;
    if (j + 1 < n && x[j + 1] < x[i]) cand.push_back((i + j) / 2);
    i = j + 1;
  }
  if (cand.size() < 3) throw NoPeaks("detect_peaks: fewer than 3 local maxima");

  // Dominant period sets the refractory distance; a separation parameter only,
  // so the coarse training grid is plenty.
  double hr = estimate_hr(compute_psd(w, kTrainPsdResolutionHz));
  auto min_sep = static_cast<std::size_t>(
      std::max<long long>(1, std::llround(0.5 * (60.0 / hr) * w.fs)));

  std::vector<std::size_t> order(cand.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (x[cand[a]] != x[cand[b]]) return x[cand[a]] > x[cand[b]];
    return cand[a] < cand[b];
  });

  std::vector<std::size_t> kept;
  for (std::size_t oi : order) {
    std::size_t i = cand[oi];
    bool ok = true;
    for (std::size_t j : kept) {
      std::size_t gap = i > j ? i - j : j - i;
      if (gap < min_sep) {
        ok = false;
        break;
      }
    }
    if (ok) kept.push_back(i);
  }
  std::sort(kept.begin(), kept.end());
  if (kept.size() < 3) throw NoPeaks("detect_peaks: fewer than 3 peaks after separation");
  return kept;
}

HRVReport hrv_metrics(const std::vector<std::size_t>& peak_indices, double fs) {
  if (!(fs > 0.0)) throw Error("hrv_metrics: sampling rate must be positive");
  if (peak_indices.size() < 8) throw TooFewPeaks("hrv_metrics: need at least 8 peaks");
  for (std::size_t i = 1; i < peak_indices.size(); ++i) {
    if (peak_indices[i] <= peak_indices[i - 1]) {
      throw Error("hrv_metrics: peak indices must be strictly ascending");
    }
  }

  // Each interval sits at the time of its closing beat.
  std::size_t m = peak_indices.size();
  std::vector<double> tau(m - 1), ibi(m - 1);
  for (std::size_t i = 0; i + 1 < m; ++i) {
    tau[i] = static_cast<double>(peak_indices[i + 1]) / fs;
    ibi[i] = static_cast<double>(peak_indices[i + 1] - peak_indices[i]) / fs;
  }

  // Uniform 4 Hz resample by linear interpolation.
  constexpr double rs = 4.0;
  double t0 = tau.front();
  auto nr = static_cast<std::size_t>(std::floor((tau.back() - t0) * rs)) + 1;
  if (nr < 8) throw TooFewPeaks("hrv_metrics: record too short after resampling");
  std::vector<double> u(nr);
  std::size_t seg = 0;
  for (std::size_t j = 0; j < nr; ++j) {
    double t = t0 + static_cast<double>(j) / rs;
    while (seg + 2 < tau.size() && tau[seg + 1] < t) ++seg;
    double span = tau[seg + 1] - tau[seg];
    double a = std::clamp((t - tau[seg]) / span, 0.0, 1.0);
    u[j] = ibi[seg] + a * (ibi[seg + 1] - ibi[seg]);
  }

  // A perfectly steady interval series has no oscillatory power at all; the
  // exact check matters because mean removal of a constant leaves rounding
  // residue, not zeros.
  if (all_equal(u)) {
    HRVReport rep;
    rep.rf_hz = 0.15;
    rep.zero_hf = true;
    rep.lf_hf = std::numeric_limits<double>::infinity();
    return rep;
  }

  double um = mean_of(u);
  for (double& v : u) v -= um;

  // Direct spectrum of the interval series on a grid no coarser than 5 mHz.
  std::size_t npad = std::max<std::size_t>(nr, 800);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  auto k_hi = static_cast<std::size_t>(std::floor(0.4 * static_cast<double>(npad) / rs + kEdgeEps));
  k_hi = std::min(k_hi, npad / 2);
  double lf = 0.0, hf = 0.0;
  double best_p = -1.0;
  double best_f = 0.15;
  for (std::size_t k = 1; k <= k_hi; ++k) {
    double f = static_cast<double>(k) * rs / static_cast<double>(npad);
    if (f < 0.04 - kEdgeEps) continue;
    double a = 0.0, c = 0.0;
    for (std::size_t j = 0; j < nr; ++j) {
      std::size_t rem = (k * j) % npad;
      double theta = two_pi * static_cast<double>(rem) / static_cast<double>(npad);
      a += u[j] * std::cos(theta);
      c += u[j] * std::sin(theta);
    }
    double p = a * a + c * c;
    if (f >= 0.15 - kEdgeEps) {
      hf += p;
      if (p > best_p) {
        best_p = p;
        best_f = f;
      }
    } else {
      lf += p;
    }
  }

  HRVReport rep;
  rep.rf_hz = best_f;
  rep.zero_hf = !(hf > 0.0);
  double denom = lf + hf;
  if (denom > 0.0) {
    rep.lf_nu = lf / denom;
    rep.hf_nu = hf / denom;
  }
  rep.lf_hf = rep.zero_hf ? std::numeric_limits<double>::infinity() : lf / hf;
  return rep;
}

Agreement agreement_metrics(const std::vector<double>& pred, const std::vector<double>& truth) {
  if (pred.size() != truth.size() || pred.empty()) {
    throw LengthMismatch("agreement_metrics: sequences must have equal nonzero length");
  }
  auto n = static_cast<double>(pred.size());
  double sa = 0.0, ss = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double d = pred[i] - truth[i];
    sa += std::abs(d);
    ss += d * d;
  }
  Agreement out;
  out.mae = sa / n;
  out.rmse = std::sqrt(ss / n);

  if (!all_equal(pred) && !all_equal(truth)) {
    double mp = mean_of(pred), mt = mean_of(truth);
    double cov = 0.0, vp = 0.0, vt = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      double dp = pred[i] - mp, dt = truth[i] - mt;
      cov += dp * dt;
      vp += dp * dp;
      vt += dt * dt;
    }
    out.r = std::clamp(cov / std::sqrt(vp * vt), -1.0, 1.0);
  }
  return out;
}

}  // namespace pulsegrid
