#pragma once

#include <string>
#include <vector>

#include "pulsegrid/common.hpp"

namespace pulsegrid {

struct GridMismatch : Error {
  using Error::Error;
};
struct SingletonSet : Error {
  using Error::Error;
};

// The N spectra sampled from one video's block, all on one frequency grid.
struct PSDSet {
  std::vector<std::vector<double>> psds;
  std::vector<double> freqs;
  std::string video_id;
};

// Mean squared-distance over within-video ordered pairs of both sets,
// normalized by 2N(N-1). Nonnegative; zero when each set is internally
// identical. Requires N >= 2 per set.
double positive_loss(const PSDSet& a, const PSDSet& b);

// Negated mean squared-distance over the N^2 cross-video pairs. Always <= 0,
// and >= -2 on unit-sum spectra. Defined for N >= 1.
double negative_loss(const PSDSet& a, const PSDSet& b);

// positive_loss + negative_loss.
double total_loss(const PSDSet& a, const PSDSet& b);

struct LossBreakdown {
  double lp = 0.0;
  double ln = 0.0;
  double total = 0.0;
  // d total / d psd, per member of each set.
  std::vector<std::vector<double>> d_a, d_b;
};

// Loss value plus analytic gradients with respect to every spectrum, for the
// training path.
LossBreakdown total_loss_backward(const PSDSet& a, const PSDSet& b);

}  // namespace pulsegrid
