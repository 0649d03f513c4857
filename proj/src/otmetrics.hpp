#pragma once

#include <memory>
#include <span>
#include <vector>

#include "nd/potential.hpp"

namespace sbs {

struct EntropicPlanSummary {
  double cost = 0.0;  // entropic transport objective <C, pi> + eps KL(pi || a x b)
  int iterations = 0;
  double marginal_residual = 0.0;
};

struct WeightedCloud {
  std::vector<double> points;   // [n][d] flattened
  std::vector<double> weights;  // normalized to 1; empty means uniform
  int dim = 0;
  std::size_t size() const { return dim ? points.size() / dim : 0; }
};

// Log-domain Sinkhorn on squared-Euclidean cost C(x,y) = ||x - y||^2,
// matrix-free (costs are recomputed per sweep).  The static bridge problem
// with diffusion sigma over horizon T corresponds to epsilon = 2 sigma^2 T on
// this cost convention.
EntropicPlanSummary sinkhorn_cost(const WeightedCloud& xs, const WeightedCloud& ys, double epsilon,
                                  double tol = 1e-9, int max_iter = 2000, int workers = 0);

inline double bridge_epsilon(double sigma, double T) { return 2.0 * sigma * sigma * T; }

// Closed-form entropic objective between centered isotropic Gaussians with
// stddevs a and b (per dimension), at regularization epsilon on ||x-y||^2.
double gaussian_entropic_cost(double a, double b, double epsilon, int dim);

// ---------------------------------------------------------------------------
// Closed-form Gaussian Schrodinger bridge between nu = N(0, a^2 I) and
// mu = N(0, b^2 I) for a Brownian reference with diffusion sigma over [0, T].
//
// The static optimal coupling has per-dimension cross covariance
//   c = sqrt(a^2 b^2 + e^2/4) - e/2,  e = sigma^2 T,
// and conditioning through the Brownian bridge gives linear drifts
//   grad phi*(x,t) = alpha(t) x,  grad psi*(x,t) = beta(t) x
// plus potentials fixed so that phi* + psi* = log rho_t exactly (phi*(0,0)=0
// gauge).  Both potentials satisfy their HJB equations identically.
// ---------------------------------------------------------------------------
class GaussianSbOracle {
 public:
  GaussianSbOracle(double a, double b, double sigma, double T, int dim = 2);

  double a() const { return a_; }
  double b() const { return b_; }
  double sigma() const { return sigma_; }
  double horizon() const { return T_; }
  int dim() const { return dim_; }
  double cross_covariance() const { return cross_; }

  double P(double t) const;  // phi*(x,t) = -P(t) ||x||^2 / 2 + m(t)
  double Q(double t) const;  // psi*(x,t) = -Q(t) ||x||^2 / 2 + n(t)
  double m(double t) const;
  double n(double t) const;
  double alpha(double t) const { return -P(t); }
  double beta(double t) const { return -Q(t); }
  double marginal_var(double t) const;  // per-dimension variance of rho_t
  double log_marginal(std::span<const double> x, double t) const;

  const nd::Potential& phi() const { return *phi_; }
  const nd::Potential& psi() const { return *psi_; }

 private:
  double a_, b_, sigma_, T_;
  int dim_;
  double eps_;    // sigma^2 T
  double cross_;  // c
  double pT_, q0_;
  std::unique_ptr<nd::Potential> phi_;
  std::unique_ptr<nd::Potential> psi_;
};

}  // namespace sbs
