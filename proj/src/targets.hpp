#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rng.hpp"

namespace sbs {

using LogDensity = std::function<double(std::span<const double>)>;

struct GroundTruth {
  std::vector<double> mean;
  std::vector<double> stddev;
  double log_z = 0.0;
};

struct TargetSpec {
  std::string name;
  int dim = 0;
  LogDensity log_mu;  // un-normalized log target
  std::optional<GroundTruth> truth;
};

// Isotropic Gaussian prior; "2I" style parameters are covariances, so the
// per-coordinate stddev is the square root.
struct PriorSpec {
  int dim = 0;
  std::vector<double> mean;
  double stddev = 1.0;
  double log_nu(std::span<const double> x) const;
};

struct TargetBundle {
  TargetSpec target;
  PriorSpec prior;
};

// Registry: standard_normal, funnel, gmm9, double_well (all d = 2).
TargetBundle make_target(const std::string& name);
GroundTruth ground_truth(const std::string& name);
std::vector<std::string> target_names();

// n i.i.d. prior draws, [n][d] flattened, addressed by (stream, epoch, i).
std::vector<double> sample_prior(const PriorSpec& prior, std::size_t n, const CounterRng& rng,
                                 RngStream stream = RngStream::prior_draw, std::uint32_t epoch = 0);

// Exact (or inverse-CDF) draws from the normalized target itself; used for
// reference clouds in transport-distance reports.
std::vector<double> sample_target_reference(const std::string& name, std::size_t n, const CounterRng& rng,
                                            std::uint32_t epoch = 0);

// Adaptive Simpson quadrature on [a, b]; the 1-D oracle behind double_well
// ground truth.
double integrate_1d(const std::function<double(double)>& f, double a, double b, double tol = 1e-12);

}  // namespace sbs
