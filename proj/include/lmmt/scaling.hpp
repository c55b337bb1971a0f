#pragma once

// Power-law fitting of L(N) = alpha * (N0/N)^p + l_inf to (parameter count,
// loss) observations, plus the cross-family comparison report.

#include <string>
#include <vector>

namespace lmmt {

struct ScalingObservation {
  std::string family;
  std::string slice;
  double n = 0.0;
  double loss = 0.0;
};

struct PowerLawFit {
  double alpha = 0.0;
  double p = 0.0;
  double l_inf = 0.0;
  double n0 = 1.0;
  double rss = 0.0;
  bool converged = false;
  bool p_identified = true;   // false when the loss range is < 0.01
  bool low_confidence = false;  // < 4 points or < 1 decade of N
  double n_min = 0.0;
  double n_max = 0.0;
  int n_obs = 0;
};

// squared-error fit over (alpha, p, l_inf) with alpha >= 0, l_inf >= 0, seeded
// from a grid over l_inf in [0, min loss] x p in [0.01, 1.5] and refined by
// damped Gauss-Newton; observations are sorted internally so the result is
// order-invariant
PowerLawFit fit_power_law(const std::vector<ScalingObservation>& observations, double n0);

double predict(const PowerLawFit& fit, double n);

// tabulates (p, l_inf, rss) per entry and the pairwise predicted-loss gap at
// the largest N observed by either member of the pair
std::string compare_families(const std::vector<std::pair<std::string, PowerLawFit>>& fits);

// CSV with a header naming at least family,slice,n,loss (extra columns are
// ignored on read, so plot files round-trip)
std::vector<ScalingObservation> read_observations(const std::string& path);
void write_observations(const std::string& path,
                        const std::vector<ScalingObservation>& observations);

std::string fit_report_line(const std::string& label, const PowerLawFit& fit);

}  // namespace lmmt
