#pragma once

#include <vector>

#include "nd/potential.hpp"
#include "paths.hpp"
#include "targets.hpp"

namespace sbs {

struct WeightedSample {
  std::vector<double> point;  // final state x_{K+1}
  double log_weight = 0.0;    // un-normalized
};

struct ZEstimate {
  double log_z_hat = 0.0;
  std::vector<double> per_sample_log_terms;
  double ess = 0.0;  // (sum w)^2 / sum w^2 over the exponentiated terms
};

// Importance-weighted normalizing-constant estimator along the controlled
// chain: per-sample log term
//   log mu(x_{K+1}) - log nu(x_0)
//   + sum_k [ |z_k|^2/2 - |x_k - x_{k+1} - sigma^2 h grad psi(x_{k+1},(k+1)h)|^2 / (2 sigma^2 h) ],
// aggregated as log((1/n) sum exp(term)) with max shift.
ZEstimate log_z_estimate(const TrajectoryBatch& traj, const nd::Potential& psi, const LogDensity& log_nu,
                         const LogDensity& log_mu, int workers = 0);

// Path-dependent sample weights,
//   log w = log mu(x_{K+1}) - log nu(x_0)
//           + h sum_k (sigma^2/2)(lap phi - lap psi)(x_k, kh).
std::vector<WeightedSample> importance_weights(const TrajectoryBatch& traj, const nd::Potential& phi,
                                               const nd::Potential& psi, const LogDensity& log_nu,
                                               const LogDensity& log_mu, int workers = 0);

// Path-measure weights: the per-sample Z-estimator terms as un-normalized
// sample weights.  Exactly self-normalized-unbiased for terminal statistics
// under any controls, and constant (up to discretization) at the optimum, so
// these are what evaluation reweights by.
std::vector<WeightedSample> path_weights(const TrajectoryBatch& traj, const nd::Potential& psi,
                                         const LogDensity& log_nu, const LogDensity& log_mu, int workers = 0);

// Self-normalized weights on a common scale; entries more than 700 nats below
// the maximum flush to zero weight.
std::vector<double> normalized_weights(const std::vector<WeightedSample>& samples);

double effective_sample_size(const std::vector<double>& normalized);

// sum g(x_i) w_i / sum w_i for a vector statistic g.
std::vector<double> weighted_statistic(const std::vector<WeightedSample>& samples,
                                       const std::function<std::vector<double>(std::span<const double>)>& g);

}  // namespace sbs
