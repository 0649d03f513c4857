#pragma once

// Shared test fixtures: hand-set analytic fields and finite-difference
// oracles.  Everything here is independent of the engine's derivative paths.

#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "nd/potential.hpp"

namespace sbs::test {

// phi(x, t) = 0.5 a ||x||^2 + b . x + c t + e t ||x||^2
class QuadraticPotential final : public nd::Potential {
 public:
  QuadraticPotential(int dim, double a, std::vector<double> b, double c, double e = 0.0)
      : dim_(dim), a_(a), b_(std::move(b)), c_(c), e_(e) {}

  int spatial_dim() const override { return dim_; }

 protected:
  nd::PointEval do_query(std::span<const double> x, double t, const nd::QueryReq& req) const override {
    nd::PointEval out;
    double r2 = 0.0, bx = 0.0;
    for (int j = 0; j < dim_; ++j) {
      r2 += x[j] * x[j];
      bx += b_[j] * x[j];
    }
    out.value = 0.5 * a_ * r2 + bx + c_ * t + e_ * t * r2;
    if (req.grad)
      for (int j = 0; j < dim_; ++j) out.grad[j] = a_ * x[j] + b_[j] + 2.0 * e_ * t * x[j];
    if (req.time) out.time_deriv = c_ + e_ * r2;
    if (req.want_lap()) out.lap = (a_ + 2.0 * e_ * t) * (req.lap_hi - req.lap_lo);
    return out;
  }

 private:
  int dim_;
  double a_;
  std::vector<double> b_;
  double c_, e_;
};

class ConstantPotential final : public nd::Potential {
 public:
  ConstantPotential(int dim, double v) : dim_(dim), v_(v) {}
  int spatial_dim() const override { return dim_; }

 protected:
  nd::PointEval do_query(std::span<const double>, double, const nd::QueryReq&) const override {
    nd::PointEval out;
    out.value = v_;
    return out;
  }

 private:
  int dim_;
  double v_;
};

class LinearPotential final : public nd::Potential {
 public:
  LinearPotential(std::vector<double> coef) : coef_(std::move(coef)) {}
  int spatial_dim() const override { return static_cast<int>(coef_.size()); }

 protected:
  nd::PointEval do_query(std::span<const double> x, double, const nd::QueryReq& req) const override {
    nd::PointEval out;
    for (std::size_t j = 0; j < coef_.size(); ++j) out.value += coef_[j] * x[j];
    if (req.grad)
      for (std::size_t j = 0; j < coef_.size(); ++j) out.grad[j] = coef_[j];
    return out;
  }

 private:
  std::vector<double> coef_;
};

// Central finite differences on an arbitrary scalar function.
template <typename Fn>
double fd_derivative(Fn&& f, double x, double step) {
  return (f(x + step) - f(x - step)) / (2.0 * step);
}

template <typename Fn>
double fd_second(Fn&& f, double x, double step) {
  return (f(x + step) - 2.0 * f(x) + f(x - step)) / (step * step);
}

inline double rel_err(double got, double want) {
  const double denom = std::max({std::abs(got), std::abs(want), 1e-10});
  return std::abs(got - want) / denom;
}

inline std::vector<double> random_vector(std::mt19937_64& gen, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> out(n);
  for (auto& v : out) v = dist(gen);
  return out;
}

}  // namespace sbs::test
