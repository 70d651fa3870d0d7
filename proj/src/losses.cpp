#include "pulsegrid/losses.hpp"

namespace pulsegrid {

namespace {

void check_sets(const PSDSet& a, const PSDSet& b, bool need_pairs) {
  if (a.video_id == b.video_id) throw Error("loss: sets must come from different videos");
  if (a.psds.empty() || b.psds.empty()) throw SingletonSet("loss: empty spectrum set");
  if (a.psds.size() != b.psds.size()) {
    throw Error("loss: sets must hold the same number of spectra");
  }
  if (need_pairs && a.psds.size() < 2) {
    throw SingletonSet("loss: need at least two spectra per set");
  }
  if (a.freqs != b.freqs) throw GridMismatch("loss: frequency grids differ");
  for (const auto* set : {&a, &b}) {
    for (const auto& p : set->psds) {
      if (p.size() != set->freqs.size()) throw GridMismatch("loss: spectrum off its grid");
    }
  }
}

double sq_dist(const std::vector<double>& x, const std::vector<double>& y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double d = x[i] - y[i];
    acc += d * d;
  }
  return acc;
}

// Sum over ordered within-set pairs; each unordered pair stands for two.
double within_sum(const PSDSet& s) {
  double acc = 0.0;
  for (std::size_t i = 0; i < s.psds.size(); ++i) {
    for (std::size_t j = i + 1; j < s.psds.size(); ++j) {
      acc += sq_dist(s.psds[i], s.psds[j]);
    }
  }
  return 2.0 * acc;
}

}  // namespace

double positive_loss(const PSDSet& a, const PSDSet& b) {
  check_sets(a, b, true);
  auto n = static_cast<double>(a.psds.size());
  return (within_sum(a) + within_sum(b)) / (2.0 * n * (n - 1.0));
}

double negative_loss(const PSDSet& a, const PSDSet& b) {
  check_sets(a, b, false);
  double acc = 0.0;
  for (const auto& fa : a.psds) {
    for (const auto& fb : b.psds) acc += sq_dist(fa, fb);
  }
  auto n = static_cast<double>(a.psds.size());
  return -acc / (n * n);
}

double total_loss(const PSDSet& a, const PSDSet& b) {
  check_sets(a, b, true);
  return positive_loss(a, b) + negative_loss(a, b);
}

LossBreakdown total_loss_backward(const PSDSet& a, const PSDSet& b) {
  check_sets(a, b, true);
  std::size_t n = a.psds.size();
  std::size_t bins = a.freqs.size();

  LossBreakdown out;
  out.lp = positive_loss(a, b);
  out.ln = negative_loss(a, b);
  out.total = out.lp + out.ln;

  std::vector<double> sum_a(bins, 0.0), sum_b(bins, 0.0);
  for (const auto& p : a.psds) {
    for (std::size_t k = 0; k < bins; ++k) sum_a[k] += p[k];
  }
  for (const auto& p : b.psds) {
    for (std::size_t k = 0; k < bins; ++k) sum_b[k] += p[k];
  }

  // d/df_i of the pair sums collapses to set totals:
  //   positive term: 2/(N(N-1)) * (N f_i - sum_own)
  //   negative term: -2/N^2 * (N f_i - sum_other)
  auto nd = static_cast<double>(n);
  double cp = 2.0 / (nd * (nd - 1.0));
  double cn = 2.0 / (nd * nd);
  out.d_a.assign(n, std::vector<double>(bins));
  out.d_b.assign(n, std::vector<double>(bins));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < bins; ++k) {
      double fa = a.psds[i][k];
      double fb = b.psds[i][k];
      out.d_a[i][k] = cp * (nd * fa - sum_a[k]) - cn * (nd * fa - sum_b[k]);
      out.d_b[i][k] = cp * (nd * fb - sum_b[k]) - cn * (nd * fb - sum_a[k]);
    }
  }
  return out;
}

}  // namespace pulsegrid
