#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "common.hpp"
#include "estimators.hpp"
#include "otmetrics.hpp"
#include "support.hpp"

using namespace sbs;

namespace {

PriorSpec gaussian_prior(double stddev) {
  PriorSpec p;
  p.dim = 2;
  p.mean = {0.0, 0.0};
  p.stddev = stddev;
  return p;
}

LogDensity gaussian_log_density(double stddev) {
  return [stddev](std::span<const double> x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    const double var = stddev * stddev;
    return -0.5 * (s / var + 2.0 * (std::log(var) + std::log(2.0 * M_PI)));
  };
}

// Independent transcription of the per-sample log term.
double plain_log_term(const TrajectoryBatch& traj, const nd::Potential& psi, const LogDensity& log_nu,
                      const LogDensity& log_mu, std::size_t i) {
  const int d = traj.dim();
  const int K = traj.config().K;
  const double h = traj.config().h();
  const double s2h = traj.config().sigma * traj.config().sigma * h;
  nd::QueryReq grad_req;
  grad_req.grad = true;
  double term = log_mu(traj.state(i, K + 1)) - log_nu(traj.state(i, 0));
  for (int k = 0; k <= K; ++k) {
    const auto e = psi.query(traj.state(i, k + 1), (k + 1) * h, grad_req);
    for (int j = 0; j < d; ++j) {
      const double z = traj.noise(i, k)[j];
      const double r = traj.state(i, k)[j] - traj.state(i, k + 1)[j] - s2h * e.grad[j];
      term += 0.5 * z * z - r * r / (2.0 * s2h);
    }
  }
  return term;
}

}  // namespace

TEST_CASE("per-sample log terms match a brute-force transcription") {
  const auto prior = gaussian_prior(1.0);
  const auto log_nu = gaussian_log_density(1.0);
  const auto log_mu = gaussian_log_density(0.8);
  SdeConfig cfg;
  cfg.K = 3;
  cfg.n = 7;
  cfg.seed = 15;
  test::QuadraticPotential phi(2, -0.4, {0.0, 0.1}, 0.0);
  test::QuadraticPotential psi(2, 0.3, {0.2, 0.0}, 0.1);
  const auto traj = simulate_controlled(phi, prior, cfg);
  const auto z = log_z_estimate(traj, psi, log_nu, log_mu);
  for (std::size_t i = 0; i < cfg.n; ++i)
    CHECK(z.per_sample_log_terms[i] == doctest::Approx(plain_log_term(traj, psi, log_nu, log_mu, i)).epsilon(1e-12));

  // n = 1 identity: the estimator equals its only exponent
  SdeConfig one = cfg;
  one.n = 1;
  const auto t1 = simulate_controlled(phi, prior, one);
  const auto z1 = log_z_estimate(t1, psi, log_nu, log_mu);
  CHECK(z1.log_z_hat == doctest::Approx(z1.per_sample_log_terms[0]).epsilon(1e-14));
  CHECK(z1.ess == doctest::Approx(1.0));
}

TEST_CASE("single-step zero-control estimator agrees with quadrature") {
  // K = 0, psi = 0, 1-D factorized Gaussians: E[Z_hat] computed by a small
  // double integral over (x0, z)
  const auto prior = gaussian_prior(1.0);
  const auto log_nu = gaussian_log_density(1.0);
  const auto log_mu = gaussian_log_density(0.8);
  SdeConfig cfg;
  cfg.K = 0;
  cfg.n = 200000;
  cfg.seed = 1212;
  test::ConstantPotential zero(2, 0.0);
  const auto traj = simulate_controlled(zero, prior, cfg);
  const auto z = log_z_estimate(traj, zero, log_nu, log_mu);

  // with psi = 0 the per-sample term is log mu(x1) - log nu(x0): E[Z_hat] =
  // int nu(x0) q(x1|x0) mu(x1)/nu(x0) = int int q(x1|x0) mu(x1) dx1 dx0 per dim
  const double h = cfg.h();
  auto inner = [&](double x0) {
    return integrate_1d(
        [&](double x1) {
          const double q = std::exp(-(x1 - x0) * (x1 - x0) / (2.0 * h)) / std::sqrt(2.0 * M_PI * h);
          const double mu = std::exp(-x1 * x1 / (2.0 * 0.64)) / std::sqrt(2.0 * M_PI * 0.64);
          return q * mu;
        },
        x0 - 8.0, x0 + 8.0, 1e-10);
  };
  const double expected_z_1d = integrate_1d(inner, -8.0, 8.0, 1e-8);
  const double want_log_z = 2.0 * std::log(expected_z_1d);

  // Monte Carlo slack: 3 standard errors of the (exp-shifted) sample mean
  double mean = 0.0;
  for (double v : z.per_sample_log_terms) mean += v;
  mean /= cfg.n;
  double se = 0.0;
  for (double v : z.per_sample_log_terms) se += std::pow(std::exp(v - z.log_z_hat) - 1.0, 2);
  se = std::sqrt(se / cfg.n / cfg.n);
  CHECK(std::abs(z.log_z_hat - want_log_z) < 3.0 * se + 1e-3);
}

TEST_CASE("oracle controls: near-zero-variance estimator and tight weights") {
  const GaussianSbOracle oracle(std::sqrt(2.0), 1.0, 1.0, 1.0, 2);
  const auto prior = gaussian_prior(std::sqrt(2.0));
  const auto log_nu = gaussian_log_density(std::sqrt(2.0));
  const auto log_mu = gaussian_log_density(1.0);
  SdeConfig cfg;
  cfg.K = 256;
  cfg.n = 2048;
  cfg.seed = 42;
  const auto traj = simulate_controlled(oracle.phi(), prior, cfg);
  const auto z = log_z_estimate(traj, oracle.psi(), log_nu, log_mu);
  CHECK(std::abs(z.log_z_hat) <= 0.05);
  double mean = 0.0, var = 0.0;
  for (double v : z.per_sample_log_terms) mean += v;
  mean /= cfg.n;
  for (double v : z.per_sample_log_terms) var += (v - mean) * (v - mean);
  var /= cfg.n;
  CHECK(std::sqrt(var) <= 0.1);
  CHECK(z.ess >= 0.99 * static_cast<double>(cfg.n));

  // ELBO ordering at the oracle
  CHECK(mean <= z.log_z_hat + 1e-12);

  // path-measure weights: CoV at the oracle
  const auto pw = path_weights(traj, oracle.psi(), log_nu, log_mu);
  double wm = 0.0;
  for (const auto& s : pw) wm += std::exp(s.log_weight);
  wm /= pw.size();
  double wv = 0.0;
  for (const auto& s : pw) wv += std::pow(std::exp(s.log_weight) - wm, 2);
  wv /= pw.size();
  CHECK(std::sqrt(wv) / wm <= 0.05);
}

TEST_CASE("ELBO holds for suboptimal controls on all four benchmarks") {
  test::ConstantPotential zero(2, 0.0);
  for (const auto& name : target_names()) {
    CAPTURE(name);
    const auto tb = make_target(name);
    const LogDensity log_nu = [&tb](std::span<const double> x) { return tb.prior.log_nu(x); };
    SdeConfig cfg;
    cfg.K = 48;
    cfg.n = 4096;
    cfg.seed = 7;
    const auto traj = simulate_controlled(zero, tb.prior, cfg);
    const auto z = log_z_estimate(traj, zero, log_nu, tb.target.log_mu);
    double mean = 0.0;
    for (double v : z.per_sample_log_terms) mean += v;
    mean /= cfg.n;
    CHECK(mean <= z.log_z_hat + 1e-12);  // Jensen

    double se = 0.0;
    for (double v : z.per_sample_log_terms) se += std::pow(std::exp(v - z.log_z_hat) - 1.0, 2);
    se = std::sqrt(se / cfg.n / cfg.n);
    CHECK(z.log_z_hat <= tb.target.truth->log_z + 3.0 * se + 1e-12);
  }
}

TEST_CASE("laplacian-form weights: exact cancellations") {
  const auto prior = gaussian_prior(1.0);
  const auto log_nu = gaussian_log_density(1.0);
  const auto log_mu = gaussian_log_density(0.9);
  SdeConfig cfg;
  cfg.K = 6;
  cfg.n = 32;
  cfg.seed = 23;
  test::QuadraticPotential field(2, -0.3, {0.0, 0.0}, 0.05);
  const auto traj = simulate_controlled(field, prior, cfg);

  // identical fields: the laplacian term cancels exactly
  const auto ws = importance_weights(traj, field, field, log_nu, log_mu);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    const double want = log_mu(traj.state(i, cfg.K + 1)) - log_nu(traj.state(i, 0));
    CHECK(ws[i].log_weight == doctest::Approx(want).epsilon(1e-12));
  }

  // adding a constant to log mu leaves normalized weights unchanged
  const LogDensity log_mu_shift = [&](std::span<const double> x) { return log_mu(x) + 42.0; };
  const auto ws2 = importance_weights(traj, field, field, log_nu, log_mu_shift);
  const auto w1 = normalized_weights(ws);
  const auto w2 = normalized_weights(ws2);
  for (std::size_t i = 0; i < w1.size(); ++i) CHECK(w1[i] == doctest::Approx(w2[i]).epsilon(1e-12));

  // weights use laplacian queries when the fields differ
  auto& qc = nd::query_counters();
  qc.reset();
  test::QuadraticPotential other(2, 0.2, {0.0, 0.0}, 0.0);
  importance_weights(traj, field, other, log_nu, log_mu);
  CHECK(qc.lap_queries.load() > 0);
}

TEST_CASE("weighted statistics: equal weights, convexity, scale invariance") {
  std::vector<WeightedSample> samples(5);
  std::mt19937_64 gen(3);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& s : samples) {
    s.point = {dist(gen), dist(gen)};
    s.log_weight = 0.0;
  }
  const auto mean = weighted_statistic(samples, [](std::span<const double> x) {
    return std::vector<double>{x[0], x[1]};
  });
  double m0 = 0.0, m1 = 0.0;
  for (const auto& s : samples) {
    m0 += s.point[0];
    m1 += s.point[1];
  }
  CHECK(mean[0] == doctest::Approx(m0 / 5).epsilon(1e-14));
  CHECK(mean[1] == doctest::Approx(m1 / 5).epsilon(1e-14));

  // indicator statistic stays in [0, 1]
  for (auto& s : samples) s.log_weight = dist(gen);
  const auto ind = weighted_statistic(samples, [](std::span<const double> x) {
    return std::vector<double>{x[0] > 0 ? 1.0 : 0.0};
  });
  CHECK(ind[0] >= 0.0);
  CHECK(ind[0] <= 1.0);

  // multiplying all weights by a constant changes nothing (exact)
  auto shifted = samples;
  for (auto& s : shifted) s.log_weight += 3.75;
  const auto a = weighted_statistic(samples, [](std::span<const double> x) {
    return std::vector<double>{x[0] * x[0] + x[1]};
  });
  const auto b = weighted_statistic(shifted, [](std::span<const double> x) {
    return std::vector<double>{x[0] * x[0] + x[1]};
  });
  CHECK(a[0] == b[0]);
}

TEST_CASE("degenerate weights are rejected; underflow flushes to zero") {
  std::vector<WeightedSample> samples(3);
  for (auto& s : samples) {
    s.point = {0.0, 0.0};
    s.log_weight = -std::numeric_limits<double>::infinity();
  }
  CHECK_THROWS_AS(normalized_weights(samples), Error);

  samples[0].log_weight = 0.0;
  samples[1].log_weight = -800.0;  // below the flush threshold
  samples[2].log_weight = -1.0;
  const auto w = normalized_weights(samples);
  CHECK(w[1] == 0.0);
  CHECK(w[0] + w[2] == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("estimator is exchangeable under trajectory permutation") {
  const auto prior = gaussian_prior(1.0);
  const auto log_nu = gaussian_log_density(1.0);
  const auto log_mu = gaussian_log_density(1.0);
  SdeConfig cfg;
  cfg.K = 4;
  cfg.n = 64;
  cfg.seed = 10;
  test::ConstantPotential zero(2, 0.0);
  const auto traj = simulate_controlled(zero, prior, cfg);
  const auto z = log_z_estimate(traj, zero, log_nu, log_mu);

  auto terms = z.per_sample_log_terms;
  std::mt19937_64 gen(5);
  std::shuffle(terms.begin(), terms.end(), gen);
  double mx = *std::max_element(terms.begin(), terms.end());
  double sum = 0.0;
  for (double v : terms) sum += std::exp(v - mx);
  const double permuted = mx + std::log(sum / terms.size());
  CHECK(permuted == doctest::Approx(z.log_z_hat).epsilon(1e-13));
}

TEST_CASE("ESS decreases as controls leave the oracle") {
  const GaussianSbOracle oracle(std::sqrt(2.0), 1.0, 1.0, 1.0, 2);
  const auto prior = gaussian_prior(std::sqrt(2.0));
  const auto log_nu = gaussian_log_density(std::sqrt(2.0));
  const auto log_mu = gaussian_log_density(1.0);
  SdeConfig cfg;
  cfg.K = 64;
  cfg.n = 4096;
  cfg.seed = 33;

  // scaled perturbations of the backward drift while the forward stays exact
  double prev_ess = std::numeric_limits<double>::infinity();
  const auto traj = simulate_controlled(oracle.phi(), prior, cfg);
  for (double mag : {0.0, 0.25, 0.5, 1.0}) {
    // psi_pert = oracle psi + mag * 0.5 |x|^2 (quadratic bump)
    class Pert final : public nd::Potential {
     public:
      Pert(const nd::Potential& base, double mag) : base_(base), mag_(mag) {}
      int spatial_dim() const override { return base_.spatial_dim(); }

     protected:
      nd::PointEval do_query(std::span<const double> x, double t, const nd::QueryReq& req) const override {
        nd::PointEval e = base_.query(x, t, req);
        double r2 = 0.0;
        for (std::size_t j = 0; j < x.size(); ++j) r2 += x[j] * x[j];
        e.value += 0.5 * mag_ * r2;
        if (req.grad)
          for (std::size_t j = 0; j < x.size(); ++j) e.grad[j] += mag_ * x[j];
        if (req.want_lap()) e.lap += mag_ * (req.lap_hi - req.lap_lo);
        return e;
      }

     private:
      const nd::Potential& base_;
      double mag_;
    };
    const Pert psi(oracle.psi(), mag);
    const auto z = log_z_estimate(traj, psi, log_nu, log_mu);
    CHECK(z.ess < prev_ess + 1e-9);
    prev_ess = z.ess;
  }
  CHECK(prev_ess < 0.9 * static_cast<double>(cfg.n));
}
