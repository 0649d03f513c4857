#include "targets.hpp"

#include <algorithm>
#include <cmath>

#include "common.hpp"

namespace sbs {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112353;

double log_normal_1d(double x, double mean, double var) {
  const double c = x - mean;
  return -0.5 * (c * c / var + std::log(var) + kLog2Pi);
}

double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double fa, double fm,
                        double fb, double whole, double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double delta = left + right - whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
  return adaptive_simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         adaptive_simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

// Inverse-CDF sampler for a 1-D density known up to normalization; the table
// is built once per target from the quadrature oracle.
class InverseCdf1d {
 public:
  InverseCdf1d(const std::function<double(double)>& density, double lo, double hi, int cells = 4096)
      : lo_(lo), hi_(hi) {
    cdf_.resize(cells + 1, 0.0);
    xs_.resize(cells + 1);
    const double dx = (hi - lo) / cells;
    for (int i = 0; i <= cells; ++i) xs_[i] = lo + i * dx;
    double acc = 0.0;
    double fprev = density(xs_[0]);
    for (int i = 1; i <= cells; ++i) {
      const double fcur = density(xs_[i]);
      acc += 0.5 * (fprev + fcur) * dx;
      cdf_[i] = acc;
      fprev = fcur;
    }
    for (auto& v : cdf_) v /= acc;
  }

  double sample(double u) const {
    auto it = std::lower_bound(cdf_.begin(), cdf_.end(), u);
    std::size_t i = static_cast<std::size_t>(std::distance(cdf_.begin(), it));
    if (i == 0) return xs_.front();
    if (i >= cdf_.size()) return xs_.back();
    const double c0 = cdf_[i - 1], c1 = cdf_[i];
    const double w = c1 > c0 ? (u - c0) / (c1 - c0) : 0.5;
    return xs_[i - 1] + w * (xs_[i] - xs_[i - 1]);
  }

 private:
  double lo_, hi_;
  std::vector<double> xs_, cdf_;
};

double double_well_1d(double s) {
  const double q = s * s - 2.0;
  return std::exp(-q * q);
}

}  // namespace

double PriorSpec::log_nu(std::span<const double> x) const {
  double s = 0.0;
  const double var = stddev * stddev;
  for (int j = 0; j < dim; ++j) s += log_normal_1d(x[j], mean[j], var);
  return s;
}

double integrate_1d(const std::function<double(double)>& f, double a, double b, double tol) {
  // A fixed pre-split keeps symmetric integrands from fooling the first
  // Simpson estimate into an early zero.
  constexpr int kPanels = 32;
  double total = 0.0;
  for (int p = 0; p < kPanels; ++p) {
    const double lo = a + (b - a) * p / kPanels;
    const double hi = a + (b - a) * (p + 1) / kPanels;
    const double m = 0.5 * (lo + hi);
    const double fa = f(lo), fm = f(m), fb = f(hi);
    const double whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
    total += adaptive_simpson(f, lo, hi, fa, fm, fb, whole, tol / kPanels, 44);
  }
  return total;
}

TargetBundle make_target(const std::string& name) {
  TargetBundle tb;
  tb.prior.dim = 2;
  tb.prior.mean = {0.0, 0.0};
  tb.target.name = name;
  tb.target.dim = 2;
  if (name == "standard_normal") {
    tb.prior.stddev = std::sqrt(2.0);
    tb.target.log_mu = [](std::span<const double> x) {
      return log_normal_1d(x[0], 0.0, 1.0) + log_normal_1d(x[1], 0.0, 1.0);
    };
  } else if (name == "funnel") {
    tb.prior.stddev = std::sqrt(2.0);
    tb.target.log_mu = [](std::span<const double> x) {
      return log_normal_1d(x[0], 0.0, 9.0) + log_normal_1d(x[1], 0.0, std::exp(x[0]));
    };
  } else if (name == "gmm9") {
    tb.prior.stddev = 3.5;
    tb.target.log_mu = [](std::span<const double> x) {
      double mx = -std::numeric_limits<double>::infinity();
      double terms[9];
      int idx = 0;
      for (double m0 : {-5.0, 0.0, 5.0})
        for (double m1 : {-5.0, 0.0, 5.0}) {
          terms[idx] = log_normal_1d(x[0], m0, 1.0) + log_normal_1d(x[1], m1, 1.0);
          mx = std::max(mx, terms[idx]);
          ++idx;
        }
      double s = 0.0;
      for (double v : terms) s += std::exp(v - mx);
      return mx + std::log(s / 9.0);
    };
  } else if (name == "double_well") {
    tb.prior.stddev = std::sqrt(2.0);
    tb.target.log_mu = [](std::span<const double> x) {
      const double q0 = x[0] * x[0] - 2.0;
      const double q1 = x[1] * x[1] - 2.0;
      return -q0 * q0 - q1 * q1;
    };
  } else {
    fail(Errc::config, "unknown target: " + name);
  }
  tb.target.truth = ground_truth(name);
  return tb;
}

GroundTruth ground_truth(const std::string& name) {
  GroundTruth gt;
  gt.mean = {0.0, 0.0};
  if (name == "standard_normal") {
    gt.stddev = {1.0, 1.0};
    gt.log_z = 0.0;
  } else if (name == "funnel") {
    // Var(x1) = E[exp(x0)] = exp(9/2) by the lognormal moment identity.
    gt.stddev = {3.0, std::exp(2.25)};
    gt.log_z = 0.0;
  } else if (name == "gmm9") {
    // Mixture variance per dim: E[mu^2] + 1 = (25 + 0 + 25)/3 + 1 = 53/3.
    gt.stddev = {std::sqrt(53.0 / 3.0), std::sqrt(53.0 / 3.0)};
    gt.log_z = 0.0;
  } else if (name == "double_well") {
    const double z1 = integrate_1d(double_well_1d, -6.0, 6.0, 1e-12);
    const double m2 = integrate_1d([](double s) { return s * s * double_well_1d(s); }, -6.0, 6.0, 1e-12);
    const double sd = std::sqrt(m2 / z1);
    gt.stddev = {sd, sd};
    gt.log_z = 2.0 * std::log(z1);
  } else {
    fail(Errc::config, "unknown target: " + name);
  }
  return gt;
}

std::vector<std::string> target_names() { return {"standard_normal", "funnel", "gmm9", "double_well"}; }

std::vector<double> sample_prior(const PriorSpec& prior, std::size_t n, const CounterRng& rng, RngStream stream,
                                 std::uint32_t epoch) {
  if (n < 1) fail(Errc::misuse, "sample_prior: n >= 1 required");
  std::vector<double> out(n * prior.dim);
  parallel_blocks(n, [&](std::size_t, std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      double* row = out.data() + i * prior.dim;
      rng.normals(stream, epoch, static_cast<std::uint32_t>(i), 0,
                  {row, static_cast<std::size_t>(prior.dim)});
      for (int j = 0; j < prior.dim; ++j) row[j] = prior.mean[j] + prior.stddev * row[j];
    }
  });
  return out;
}

std::vector<double> sample_target_reference(const std::string& name, std::size_t n, const CounterRng& rng,
                                            std::uint32_t epoch) {
  std::vector<double> out(n * 2);
  if (name == "standard_normal") {
    parallel_blocks(n, [&](std::size_t, std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i)
        rng.normals(RngStream::test, epoch, static_cast<std::uint32_t>(i), 1, {out.data() + i * 2, 2});
    });
  } else if (name == "funnel") {
    parallel_blocks(n, [&](std::size_t, std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i) {
        double z[2];
        rng.normals(RngStream::test, epoch, static_cast<std::uint32_t>(i), 1, {z, 2});
        const double x0 = 3.0 * z[0];
        out[i * 2] = x0;
        out[i * 2 + 1] = std::exp(0.5 * x0) * z[1];
      }
    });
  } else if (name == "gmm9") {
    parallel_blocks(n, [&](std::size_t, std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i) {
        double u;
        rng.uniforms(RngStream::test, epoch, static_cast<std::uint32_t>(i), 0, {&u, 1});
        const int comp = std::min(8, static_cast<int>(u * 9.0));
        const double centers[3] = {-5.0, 0.0, 5.0};
        double z[2];
        rng.normals(RngStream::test, epoch, static_cast<std::uint32_t>(i), 1, {z, 2});
        out[i * 2] = centers[comp / 3] + z[0];
        out[i * 2 + 1] = centers[comp % 3] + z[1];
      }
    });
  } else if (name == "double_well") {
    static const InverseCdf1d table(double_well_1d, -6.0, 6.0);
    parallel_blocks(n, [&](std::size_t, std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i) {
        double u[2];
        rng.uniforms(RngStream::test, epoch, static_cast<std::uint32_t>(i), 2, {u, 2});
        out[i * 2] = table.sample(u[0]);
        out[i * 2 + 1] = table.sample(u[1]);
      }
    });
  } else {
    fail(Errc::config, "unknown target: " + name);
  }
  return out;
}

}  // namespace sbs
