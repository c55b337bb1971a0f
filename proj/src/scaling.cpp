#include "lmmt/scaling.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace lmmt {

namespace {

double rss_at(const std::vector<ScalingObservation>& obs, double n0, double alpha,
              double p, double l_inf) {
  double rss = 0.0;
  for (const ScalingObservation& o : obs) {
    const double r = alpha * std::pow(n0 / o.n, p) + l_inf - o.loss;
    rss += r * r;
  }
  return rss;
}

// least-squares alpha >= 0 given (p, l_inf)
double closed_form_alpha(const std::vector<ScalingObservation>& obs, double n0, double p,
                         double l_inf) {
  double num = 0.0, den = 0.0;
  for (const ScalingObservation& o : obs) {
    const double x = std::pow(n0 / o.n, p);
    num += x * (o.loss - l_inf);
    den += x * x;
  }
  if (den <= 0.0) return 0.0;
  return std::max(0.0, num / den);
}

struct Refined {
  double alpha, p, l_inf, rss;
  bool converged;
};

Refined gauss_newton(const std::vector<ScalingObservation>& obs, double n0, double alpha,
                     double p, double l_inf) {
  const int n = static_cast<int>(obs.size());
  double rss = rss_at(obs, n0, alpha, p, l_inf);
  double lambda = 1e-3;
  bool converged = false;
  for (int iter = 0; iter < 200; ++iter) {
    Eigen::Matrix3d jtj = Eigen::Matrix3d::Zero();
    Eigen::Vector3d jtr = Eigen::Vector3d::Zero();
    for (int i = 0; i < n; ++i) {
      const double ratio = n0 / obs[static_cast<size_t>(i)].n;
      const double x = std::pow(ratio, p);
      const double r = alpha * x + l_inf - obs[static_cast<size_t>(i)].loss;
      Eigen::Vector3d j(x, alpha * x * std::log(ratio), 1.0);
      jtj += j * j.transpose();
      jtr += j * r;
    }
    bool stepped = false;
    for (int tries = 0; tries < 40; ++tries) {
      Eigen::Matrix3d damped = jtj + lambda * Eigen::Matrix3d::Identity();
      Eigen::Vector3d delta = damped.ldlt().solve(-jtr);
      const double a2 = std::max(0.0, alpha + delta(0));
      const double p2 = std::clamp(p + delta(1), 1e-6, 20.0);
      const double l2 = std::max(0.0, l_inf + delta(2));
      const double rss2 = rss_at(obs, n0, a2, p2, l2);
      if (rss2 < rss) {
        const double improvement = rss - rss2;
        alpha = a2;
        p = p2;
        l_inf = l2;
        rss = rss2;
        lambda = std::max(lambda / 3.0, 1e-12);
        stepped = true;
        if (improvement <= 1e-15 * (1.0 + rss)) converged = true;
        break;
      }
      lambda *= 10.0;
      if (lambda > 1e14) break;
    }
    if (!stepped) {
      // no descent direction left at any damping: a local optimum
      converged = true;
      break;
    }
    if (converged) break;
  }
  return {alpha, p, l_inf, rss, converged};
}

}  // namespace

PowerLawFit fit_power_law(const std::vector<ScalingObservation>& observations, double n0) {
  if (observations.size() < 2)
    throw std::invalid_argument("fit_power_law: need at least 2 observations, got " +
                                std::to_string(observations.size()));
  if (n0 <= 0.0)
    throw std::invalid_argument("fit_power_law: n0 must be positive, got " +
                                std::to_string(n0));
  std::vector<ScalingObservation> obs = observations;
  for (const ScalingObservation& o : obs) {
    if (o.n <= 0.0)
      throw std::invalid_argument("fit_power_law: observation has n <= 0 (" +
                                  o.family + "/" + o.slice + ")");
    if (o.loss <= 0.0)
      throw std::invalid_argument("fit_power_law: observation has loss <= 0 (" +
                                  o.family + "/" + o.slice + ")");
  }
  // sorted so the result is independent of input order
  std::sort(obs.begin(), obs.end(), [](const ScalingObservation& a,
                                       const ScalingObservation& b) {
    if (a.n != b.n) return a.n < b.n;
    return a.loss < b.loss;
  });

  PowerLawFit fit;
  fit.n0 = n0;
  fit.n_obs = static_cast<int>(obs.size());
  fit.n_min = obs.front().n;
  fit.n_max = obs.back().n;
  fit.low_confidence = fit.n_obs < 4 || fit.n_max < 10.0 * fit.n_min;

  double min_loss = obs.front().loss, max_loss = obs.front().loss, mean_loss = 0.0;
  for (const ScalingObservation& o : obs) {
    min_loss = std::min(min_loss, o.loss);
    max_loss = std::max(max_loss, o.loss);
    mean_loss += o.loss;
  }
  mean_loss /= static_cast<double>(obs.size());

  if (max_loss - min_loss < 0.01) {
    fit.alpha = 0.0;
    fit.p = 0.0;
    fit.p_identified = false;
    fit.l_inf = mean_loss;
    fit.rss = rss_at(obs, n0, 0.0, 0.0, mean_loss);
    fit.converged = true;
    return fit;
  }

  static const double kPSeeds[] = {0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 1.1, 1.5};
  Refined best{0, 0, 0, std::numeric_limits<double>::infinity(), false};
  for (int li = 0; li <= 8; ++li) {
    const double l_seed = min_loss * static_cast<double>(li) / 8.0;
    for (double p_seed : kPSeeds) {
      const double a_seed = closed_form_alpha(obs, n0, p_seed, l_seed);
      Refined r = gauss_newton(obs, n0, a_seed, p_seed, l_seed);
      if (r.rss < best.rss) best = r;
    }
  }
  fit.alpha = best.alpha;
  fit.p = best.p;
  fit.l_inf = best.l_inf;
  fit.rss = best.rss;
  fit.converged = best.converged;
  return fit;
}

double predict(const PowerLawFit& fit, double n) {
  if (n <= 0.0)
    throw std::invalid_argument("predict: n must be positive, got " + std::to_string(n));
  return fit.alpha * std::pow(fit.n0 / n, fit.p) + fit.l_inf;
}

std::string fit_report_line(const std::string& label, const PowerLawFit& fit) {
  char buf[320];
  std::snprintf(buf, sizeof(buf),
                "%s alpha=%.6f p=%.6f l_inf=%.6f rss=%.6e n0=%.6g n_obs=%d "
                "n_range=[%.6g,%.6g] converged=%d p_identified=%d low_confidence=%d",
                label.c_str(), fit.alpha, fit.p, fit.l_inf, fit.rss, fit.n0, fit.n_obs,
                fit.n_min, fit.n_max, fit.converged ? 1 : 0, fit.p_identified ? 1 : 0,
                fit.low_confidence ? 1 : 0);
  return buf;
}

std::string compare_families(const std::vector<std::pair<std::string, PowerLawFit>>& fits) {
  if (fits.size() < 2)
    throw std::invalid_argument("compare_families: need at least 2 fits, got " +
                                std::to_string(fits.size()));
  std::ostringstream out;
  out << "fits:\n";
  for (const auto& [label, fit] : fits) out << "  " << fit_report_line(label, fit) << "\n";
  out << "pairwise predicted-loss gap at the largest observed n:\n";
  for (size_t a = 0; a < fits.size(); ++a)
    for (size_t b = a + 1; b < fits.size(); ++b) {
      const double n = std::max(fits[a].second.n_max, fits[b].second.n_max);
      const double gap = std::abs(predict(fits[a].second, n) - predict(fits[b].second, n));
      char buf[256];
      std::snprintf(buf, sizeof(buf), "  %s vs %s @ n=%.6g: gap=%.6f\n",
                    fits[a].first.c_str(), fits[b].first.c_str(), n, gap);
      out << buf;
    }
  return out.str();
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  return fields;
}

}  // namespace

std::vector<ScalingObservation> read_observations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_observations: cannot open " + path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("read_observations: " + path + " is empty");
  const std::vector<std::string> header = split_csv_line(line);
  int idx_family = -1, idx_slice = -1, idx_n = -1, idx_loss = -1;
  for (int i = 0; i < static_cast<int>(header.size()); ++i) {
    if (header[static_cast<size_t>(i)] == "family") idx_family = i;
    if (header[static_cast<size_t>(i)] == "slice") idx_slice = i;
    if (header[static_cast<size_t>(i)] == "n") idx_n = i;
    if (header[static_cast<size_t>(i)] == "loss") idx_loss = i;
  }
  if (idx_family < 0 || idx_slice < 0 || idx_n < 0 || idx_loss < 0)
    throw std::runtime_error("read_observations: " + path +
                             " header must name family, slice, n and loss columns");
  std::vector<ScalingObservation> obs;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const std::vector<std::string> f = split_csv_line(line);
    const int need = std::max(std::max(idx_family, idx_slice), std::max(idx_n, idx_loss));
    if (static_cast<int>(f.size()) <= need)
      throw std::runtime_error("read_observations: " + path + ":" +
                               std::to_string(line_no) + ": too few columns");
    ScalingObservation o;
    o.family = f[static_cast<size_t>(idx_family)];
    o.slice = f[static_cast<size_t>(idx_slice)];
    try {
      o.n = std::stod(f[static_cast<size_t>(idx_n)]);
      o.loss = std::stod(f[static_cast<size_t>(idx_loss)]);
    } catch (const std::exception&) {
      throw std::runtime_error("read_observations: " + path + ":" +
                               std::to_string(line_no) + ": non-numeric n or loss");
    }
    obs.push_back(std::move(o));
  }
  return obs;
}

void write_observations(const std::string& path,
                        const std::vector<ScalingObservation>& observations) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_observations: cannot open " + path);
  out << "family,slice,n,loss\n";
  for (const ScalingObservation& o : observations) {
    char buf[192];
    std::snprintf(buf, sizeof(buf), "%s,%s,%.17g,%.17g\n", o.family.c_str(),
                  o.slice.c_str(), o.n, o.loss);
    out << buf;
  }
}

}  // namespace lmmt
