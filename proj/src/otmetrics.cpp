#include "otmetrics.hpp"

#include <cmath>

#include "common.hpp"

namespace sbs {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112353;

double lse_row(std::span<const double> pt, const WeightedCloud& other, std::span<const double> dual,
               std::span<const double> logw, double inv_eps, int d) {
  const std::size_t m = other.size();
  // two passes over the row: max, then the shifted sum
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < m; ++j) {
    const double* y = other.points.data() + j * d;
    double c = 0.0;
    for (int q = 0; q < d; ++q) {
      const double diff = pt[q] - y[q];
      c += diff * diff;
    }
    const double v = (dual[j] - c) * inv_eps + logw[j];
    if (v > best) best = v;
  }
  if (!std::isfinite(best)) return best;
  double s = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    const double* y = other.points.data() + j * d;
    double c = 0.0;
    for (int q = 0; q < d; ++q) {
      const double diff = pt[q] - y[q];
      c += diff * diff;
    }
    s += std::exp((dual[j] - c) * inv_eps + logw[j] - best);
  }
  return best + std::log(s);
}

std::vector<double> log_weights(const WeightedCloud& c) {
  std::vector<double> lw(c.size());
  if (c.weights.empty()) {
    const double v = -std::log(static_cast<double>(c.size()));
    std::fill(lw.begin(), lw.end(), v);
  } else {
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (!(c.weights[i] > 0.0)) fail(Errc::domain, "sinkhorn: weights must be positive");
      lw[i] = std::log(c.weights[i]);
    }
  }
  return lw;
}

}  // namespace

EntropicPlanSummary sinkhorn_cost(const WeightedCloud& xs, const WeightedCloud& ys, double epsilon, double tol,
                                  int max_iter, int workers) {
  if (xs.size() == 0 || ys.size() == 0) fail(Errc::domain, "sinkhorn: empty cloud");
  if (xs.dim != ys.dim) fail(Errc::domain, "sinkhorn: dimension mismatch");
  if (!(epsilon > 0.0)) fail(Errc::domain, "sinkhorn: epsilon must be positive");
  const int d = xs.dim;
  const std::size_t n = xs.size(), m = ys.size();
  const double inv_eps = 1.0 / epsilon;
  std::vector<double> f(n, 0.0), g(m, 0.0);
  const std::vector<double> la = log_weights(xs), lb = log_weights(ys);

  double residual = std::numeric_limits<double>::infinity();
  int iter = 0;
  for (; iter < max_iter; ++iter) {
    parallel_blocks(n, [&](std::size_t, std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i)
        f[i] = -epsilon * lse_row({xs.points.data() + i * d, static_cast<std::size_t>(d)}, ys, g, lb, inv_eps, d);
    }, workers);
    parallel_blocks(m, [&](std::size_t, std::size_t lo, std::size_t hi) {
      for (std::size_t j = lo; j < hi; ++j)
        g[j] = -epsilon * lse_row({ys.points.data() + j * d, static_cast<std::size_t>(d)}, xs, f, la, inv_eps, d);
    }, workers);

    // After the g-sweep the column marginals are exact; measure the rows.
    const std::size_t nb = block_count(n);
    std::vector<double> worst(nb, 0.0);
    parallel_blocks(n, [&](std::size_t blk, std::size_t lo, std::size_t hi) {
      double w = 0.0;
      for (std::size_t i = lo; i < hi; ++i) {
        const double row =
            lse_row({xs.points.data() + i * d, static_cast<std::size_t>(d)}, ys, g, lb, inv_eps, d) +
            f[i] * inv_eps + la[i];
        w = std::max(w, std::abs(std::exp(row) - std::exp(la[i])));
      }
      worst[blk] = w;
    }, workers);
    residual = 0.0;
    for (double w : worst) residual = std::max(residual, w);
    if (residual <= tol) break;
  }
  if (residual > tol)
    fail(Errc::convergence,
         "sinkhorn: no convergence after " + std::to_string(max_iter) + " iterations, residual " +
             std::to_string(residual));

  EntropicPlanSummary out;
  out.iterations = iter + 1;
  out.marginal_residual = residual;
  // Dual value equals the entropic objective at convergence.
  double cost = 0.0;
  for (std::size_t i = 0; i < n; ++i) cost += f[i] * std::exp(la[i]);
  for (std::size_t j = 0; j < m; ++j) cost += g[j] * std::exp(lb[j]);
  out.cost = cost;
  return out;
}

double gaussian_entropic_cost(double a, double b, double epsilon, int dim) {
  const double ab = a * b;
  const double q = epsilon / 4.0;
  const double c = std::sqrt(ab * ab + q * q) - q;
  const double transport = a * a + b * b - 2.0 * c;
  const double kl = 0.5 * std::log(ab * ab / (ab * ab - c * c));
  return dim * (transport + epsilon * kl);
}

namespace {

// Quadratic phase potential -0.5 coef(t) ||x||^2 + shift(t), with analytic
// time derivatives coef' = sgn * sigma^2 coef^2 and shift' = -sgn *
// (sigma^2 d / 2) coef.
class OraclePotential final : public nd::Potential {
 public:
  OraclePotential(const GaussianSbOracle* o, bool forward) : o_(o), forward_(forward) {}

  int spatial_dim() const override { return o_->dim(); }

 protected:
  nd::PointEval do_query(std::span<const double> x, double t, const nd::QueryReq& req) const override {
    nd::PointEval e;
    const double coef = forward_ ? o_->P(t) : o_->Q(t);
    double r2 = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) r2 += x[j] * x[j];
    e.value = -0.5 * coef * r2 + (forward_ ? o_->m(t) : o_->n(t));
    if (req.grad)
      for (std::size_t j = 0; j < x.size(); ++j) e.grad[j] = -coef * x[j];
    if (req.time) {
      const double s2 = o_->sigma() * o_->sigma();
      const double dcoef = forward_ ? s2 * coef * coef : -s2 * coef * coef;
      const double dshift = (forward_ ? 1.0 : -1.0) * 0.5 * s2 * o_->dim() * coef;
      e.time_deriv = -0.5 * dcoef * r2 + dshift;
    }
    if (req.want_lap()) e.lap = -coef * (req.lap_hi - req.lap_lo);
    return e;
  }

 private:
  const GaussianSbOracle* o_;
  bool forward_;
};

}  // namespace

GaussianSbOracle::GaussianSbOracle(double a, double b, double sigma, double T, int dim)
    : a_(a), b_(b), sigma_(sigma), T_(T), dim_(dim) {
  if (a <= 0 || b <= 0 || sigma <= 0 || T <= 0) fail(Errc::domain, "gaussian_sb_oracle: positive inputs required");
  eps_ = sigma * sigma * T;
  const double ab = a * b;
  cross_ = std::sqrt(ab * ab + 0.25 * eps_ * eps_) - 0.5 * eps_;
  const double delta = ab * ab - cross_ * cross_;  // equals cross_ * eps_
  pT_ = a * a / delta - 1.0 / eps_;
  q0_ = b * b / delta - 1.0 / eps_;
  phi_ = std::make_unique<OraclePotential>(this, true);
  psi_ = std::make_unique<OraclePotential>(this, false);
}

double GaussianSbOracle::P(double t) const { return pT_ / (1.0 + pT_ * sigma_ * sigma_ * (T_ - t)); }
double GaussianSbOracle::Q(double t) const { return q0_ / (1.0 + q0_ * sigma_ * sigma_ * t); }

double GaussianSbOracle::m(double t) const {
  const double s2 = sigma_ * sigma_;
  return 0.5 * dim_ * (std::log1p(pT_ * s2 * T_) - std::log1p(pT_ * s2 * (T_ - t)));
}

double GaussianSbOracle::n(double t) const {
  return -0.5 * dim_ * (kLog2Pi + std::log(marginal_var(t))) - m(t);
}

double GaussianSbOracle::marginal_var(double t) const { return 1.0 / (P(t) + Q(t)); }

double GaussianSbOracle::log_marginal(std::span<const double> x, double t) const {
  const double v = marginal_var(t);
  double r2 = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) r2 += x[j] * x[j];
  return -0.5 * (r2 / v + dim_ * (kLog2Pi + std::log(v)));
}

}  // namespace sbs
