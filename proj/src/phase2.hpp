#pragma once

#include <span>
#include <vector>

#include "estimators.hpp"
#include "nd/potential.hpp"
#include "paths.hpp"
#include "targets.hpp"

namespace sbs::phase2 {

// Augmented (x, v) dynamics at critical damping (gamma = 2, fixed).  The
// reference process
//   dX = V dt,  dV = -X dt - 2 V dt + 2 dW
// keeps N(0, I_{2d}) stationary; one discrete step composes an exact OU draw
// on v, an Euler control kick, and the leapfrog flow of the unit harmonic
// Hamiltonian:
//   Vhat_{k+1} ~ N(e^{-h} V_k, (1 - e^{-2h}) I)
//   Vtil_{k+1} = Vhat_{k+1} + 4 h grad_v lambda((X_k, Vhat_{k+1}), k h)
//   Z_{k+1}    = Phi_h(X_k, Vtil_{k+1}).
class PhaseTrajectoryBatch {
 public:
  PhaseTrajectoryBatch(const SdeConfig& cfg, int dim, bool controlled);

  const SdeConfig& config() const { return cfg_; }
  int dim() const { return dim_; }  // x-dimension d; states carry 2d
  std::size_t n() const { return cfg_.n; }
  bool controlled() const { return controlled_; }
  bool has_substep_cache() const { return has_substep_cache_; }
  void mark_substep_cache() { has_substep_cache_ = true; }

  std::span<const double> state(std::size_t i, int k) const {  // (x, v), 2d values
    return {states_.data() + (i * (cfg_.K + 2) + k) * 2 * dim_, static_cast<std::size_t>(2 * dim_)};
  }
  std::span<double> state(std::size_t i, int k) {
    return {states_.data() + (i * (cfg_.K + 2) + k) * 2 * dim_, static_cast<std::size_t>(2 * dim_)};
  }
  // Injected OU noise n_k = Vhat_{k+1} - e^{-h} V_k.
  std::span<const double> ou_noise(std::size_t i, int k) const {
    return {noises_.data() + (i * (cfg_.K + 1) + k) * dim_, static_cast<std::size_t>(dim_)};
  }
  std::span<double> ou_noise(std::size_t i, int k) {
    return {noises_.data() + (i * (cfg_.K + 1) + k) * dim_, static_cast<std::size_t>(dim_)};
  }
  std::span<const double> vhat(std::size_t i, int k) const {
    return {vhat_.data() + (i * (cfg_.K + 1) + k) * dim_, static_cast<std::size_t>(dim_)};
  }
  std::span<double> vhat(std::size_t i, int k) {
    return {vhat_.data() + (i * (cfg_.K + 1) + k) * dim_, static_cast<std::size_t>(dim_)};
  }

 private:
  SdeConfig cfg_;
  int dim_;
  bool controlled_;
  bool has_substep_cache_ = false;
  std::vector<double> states_;
  std::vector<double> noises_;
  std::vector<double> vhat_;
};

// Leapfrog flow of H = (|x|^2 + |v|^2)/2 (kick-drift-kick); h < 0 runs the
// inverse map.
void leapfrog(std::span<double> x, std::span<double> v, double h);

// lambda_field == nullptr simulates the reference dynamics.  When
// control_at_pre_ou is set the kick uses (X_k, V_k) instead of the printed
// (X_k, Vhat_{k+1}).
PhaseTrajectoryBatch simulate_splitting(const nd::Potential* lambda_field, const PriorSpec& prior,
                                        const SdeConfig& cfg, std::uint32_t epoch = 0,
                                        bool control_at_pre_ou = false, int workers = 0);

// Var_n of lambda(Z_T,T) - lambda(Z_0,0) + sum 2h |grad_v lambda|^2
//                  - sum grad_v lambda . n_k
// along the uncontrolled reference, with the cached OU increments standing in
// for the Brownian term.
double second_order_variance_reg(const PhaseTrajectoryBatch& ref_traj, const nd::Potential& lambda_field,
                                 int workers = 0);

// (h/n) sum |PDE residual| along reference states; forward uses the
// Lagrange-multiplier PDE for lambda, backward the PDE for the reverse
// control eta.
double second_order_pinn_reg(const PhaseTrajectoryBatch& ref_traj, const nd::Potential& field,
                             bool backward = false, int workers = 0);

// Phase-space normalizing-constant estimator; boundary densities are
// nu tensor N(0,I) and mu tensor N(0,I), and the backward kernel is evaluated
// through the inverse leapfrog flow and the eta control.
ZEstimate second_order_log_z(const PhaseTrajectoryBatch& traj, const nd::Potential& eta_field,
                             const LogDensity& log_nu, const LogDensity& log_mu, int workers = 0);

}  // namespace sbs::phase2
