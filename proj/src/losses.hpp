#pragma once

#include <array>
#include <string>

#include "nd/graph.hpp"
#include "paths.hpp"
#include "targets.hpp"

namespace sbs {

enum class LossKind { pinn, variance, td, separate_control, kl_energy };
enum class Direction { forward, backward, both };

LossKind loss_kind_from_string(const std::string& s);
std::string to_string(LossKind k);
Direction direction_from_string(const std::string& s);
std::string to_string(Direction d);

struct LossConfig {
  LossKind kind = LossKind::separate_control;
  double lambda = 1.0;
  Direction direction = Direction::forward;
  // Compatibility switch for the sign of the backward HJB residual; the
  // default follows the backward-drift SDE, the flag reproduces the printed
  // variant.
  bool backward_pinn_printed_sign = false;
  void validate() const;
};

struct LossValue {
  double total = 0.0;
  double divergence_part = 0.0;
  double regularizer_part = 0.0;
  std::array<double, 4> sc_terms{};  // SeparateControl: boundary T, boundary 0, psi path, phi path
};

// --- individual objectives (evaluation) ------------------------------------

// (1/(K+1)) Var_n of the discretized log likelihood-ratio bracket between the
// phi-controlled forward chain and the psi-controlled backward chain.
double logvar_divergence(const TrajectoryBatch& traj, const nd::Potential& phi, const nd::Potential& psi,
                         const LogDensity& log_nu, const LogDensity& log_mu, int workers = 0);

// Loss (a): mean of the same bracket plus lambda * (h/n) sum sigma^2/2 |grad phi|^2.
LossValue kl_divergence_energy(const TrajectoryBatch& traj, const nd::Potential& phi, const nd::Potential& psi,
                               const LogDensity& log_nu, const LogDensity& log_mu, double lambda,
                               int workers = 0);

// (h/n) sum |HJB residual| along the sampled states; backward = true uses the
// residual of the backward potential.
double pinn_regularizer(const TrajectoryBatch& traj, const nd::Potential& field, bool backward,
                        bool printed_sign = false, int workers = 0);

// (1/(K+1)) Var_n of the reference-chain likelihood-ratio bracket.
double variance_regularizer(const TrajectoryBatch& ref_traj, const nd::Potential& field, bool backward,
                            int workers = 0);

// Mean-of-squares variant without the martingale cross term; kept for the
// gradient-variance contrast against the variance regularizer.
double moment_regularizer(const TrajectoryBatch& ref_traj, const nd::Potential& field, int workers = 0);

// (h/n) sum of per-step absolute residuals of the optimal-potential SDE along
// the reference chain (noises re-used from the cached batch).
double td_regularizer(const TrajectoryBatch& ref_traj, const nd::Potential& field, bool backward,
                      int workers = 0);

// Loss (c): boundary variances plus the two separately-controlled path terms.
LossValue separate_control_loss(const TrajectoryBatch& traj, const nd::Potential& phi, const nd::Potential& psi,
                                const LogDensity& log_nu, const LogDensity& log_mu, double lambda,
                                int workers = 0);

// --- training-facing composite ---------------------------------------------

// Total objective for the configured kind, with parameter gradients of every
// trainable potential accumulated into `accum` (may be null for evaluation).
// `reference` is required for Variance/TD kinds and ignored otherwise.
// Trajectory states are treated as fixed samples: gradients flow through the
// potentials' explicit appearances only, never through the simulated path.
LossValue loss_and_grad(const LossConfig& cfg, const TrajectoryBatch* controlled,
                        const TrajectoryBatch* reference, const nd::Potential& phi, const nd::Potential& psi,
                        const LogDensity& log_nu, const LogDensity& log_mu, nd::ParamGradAccum* accum,
                        int workers = 0);

// Gradient of the standalone variance or moment regularizer (test support for
// the vanishing-gradient property).
void regularizer_grad(const TrajectoryBatch& ref_traj, const nd::Potential& field, bool moment_form,
                      nd::ParamGradAccum& accum, int workers = 0);

}  // namespace sbs
