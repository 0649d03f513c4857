#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "estimators.hpp"
#include "losses.hpp"
#include "nd/adam.hpp"
#include "nd/field.hpp"
#include "otmetrics.hpp"
#include "paths.hpp"
#include "targets.hpp"

namespace sbs {

struct NetworkConfig {
  int hidden_dim = 64;
  int depth = 3;
  // "default" resolves to softplus when the loss needs Laplacians (PINN,
  // TD backward) and to the rectifier otherwise.
  std::string activation = "default";
};

struct TrainConfig {
  LossConfig loss;
  SdeConfig sde;
  NetworkConfig network;
  nd::AdamConfig optimizer;
  int epochs = 300;
  int updates_per_batch = 8;
  int pretrain_steps = 2000;
  double pretrain_tolerance = 0.05;
  std::size_t pretrain_batch = 512;
  int patience = 30;
  double min_delta = 1e-3;  // relative improvement threshold
  std::size_t eval_n = 4096;
  double sinkhorn_epsilon = 1.0;
  std::size_t sinkhorn_max_points = 2048;
  int histogram_bins = 64;
  std::uint64_t seed = 1;
  int workers = 0;

  void validate() const;
  nd::Act resolve_activation() const;
};

struct HistogramData {
  std::vector<double> edges;            // bins+1 ascending
  std::vector<double> weighted_mass;    // sums to 1
  std::vector<double> unweighted_mass;  // sums to 1
};

struct EvalMetrics {
  double log_z_hat = 0.0;
  double neg_log_z = 0.0;
  std::vector<double> weighted_mean;
  std::vector<double> weighted_stddev;
  double mean_abs_error = 0.0;    // Euclidean norm of the mean-error vector
  double stddev_rel_error = 0.0;  // mean over dims of |s_hat - s| / s
  double ess = 0.0;
  double entropic_w2 = 0.0;
  std::vector<HistogramData> histograms;
};

struct RunReport {
  std::vector<LossValue> loss_history;
  int epochs_run = 0;
  bool stopped_early = false;
  double pretrain_mse = 0.0;
  EvalMetrics metrics;
  double wall_time_sec = 0.0;  // volatile; not part of the serialized report
};

struct TrainResult {
  std::unique_ptr<nd::ControlField> phi;
  std::unique_ptr<nd::ControlField> psi;
  RunReport report;
};

// Regression of phi(. , 0) onto log mu over prior draws; returns the final
// mean-squared residual.  psi is untouched.
double pretrain_phi(nd::ControlField& phi, const TargetSpec& target, const PriorSpec& prior,
                    const TrainConfig& cfg);

// Alternates trajectory regeneration with joint gradient updates on both
// potentials; stops early when the total loss plateaus.
TrainResult train(const TargetSpec& target, const PriorSpec& prior, const TrainConfig& cfg);

// Deterministic function of (fields, eval seed): importance-weighted moments,
// log-Z estimate, ESS, entropic transport distance to reference draws, and
// marginal histograms.
EvalMetrics evaluate(const nd::ControlField& phi, const nd::ControlField& psi, const TargetSpec& target,
                     const PriorSpec& prior, const TrainConfig& cfg);

}  // namespace sbs
