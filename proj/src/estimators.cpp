#include "estimators.hpp"

#include <cmath>

#include "common.hpp"

namespace sbs {

namespace {

// Ordered log-sum-exp over per-sample terms.
std::pair<double, double> lse_and_sumsq(std::span<const double> terms, int workers) {
  const std::size_t n = terms.size();
  const std::size_t nb = block_count(n);
  std::vector<double> bmax(nb, -std::numeric_limits<double>::infinity());
  parallel_blocks(n, [&](std::size_t b, std::size_t lo, std::size_t hi) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = lo; i < hi; ++i) m = std::max(m, terms[i]);
    bmax[b] = m;
  }, workers);
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : bmax) mx = std::max(mx, v);
  if (!std::isfinite(mx)) fail(Errc::numeric, "log_z_estimate: no finite per-sample term");

  std::vector<double> bsum(nb, 0.0), bsq(nb, 0.0);
  parallel_blocks(n, [&](std::size_t b, std::size_t lo, std::size_t hi) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = lo; i < hi; ++i) {
      const double w = std::exp(terms[i] - mx);
      s += w;
      s2 += w * w;
    }
    bsum[b] = s;
    bsq[b] = s2;
  }, workers);
  const double sum = reduce_ordered(bsum);
  const double sumsq = reduce_ordered(bsq);
  const double log_mean = mx + std::log(sum / static_cast<double>(n));
  const double ess = sum * sum / sumsq;
  return {log_mean, ess};
}

}  // namespace

ZEstimate log_z_estimate(const TrajectoryBatch& traj, const nd::Potential& psi, const LogDensity& log_nu,
                         const LogDensity& log_mu, int workers) {
  if (!traj.controlled()) fail(Errc::misuse, "log_z_estimate: controlled batch required");
  const int d = traj.dim();
  const int K = traj.config().K;
  const double h = traj.config().h();
  const double sig = traj.config().sigma;
  const double sig2h = sig * sig * h;
  const double inv2s2h = 1.0 / (2.0 * sig2h);

  ZEstimate z;
  z.per_sample_log_terms.assign(traj.n(), 0.0);
  nd::QueryReq grad_req;
  grad_req.grad = true;
  parallel_blocks(traj.n(), [&](std::size_t, std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      double term = log_mu(traj.state(i, K + 1)) - log_nu(traj.state(i, 0));
      for (int k = 0; k <= K; ++k) {
        const auto xk = traj.state(i, k);
        const auto xn = traj.state(i, k + 1);
        const auto zk = traj.noise(i, k);
        const nd::PointEval e = psi.query(xn, (k + 1) * h, grad_req);
        double q = 0.0, z2 = 0.0;
        for (int j = 0; j < d; ++j) {
          const double r = xk[j] - xn[j] - sig2h * e.grad[j];
          q += r * r;
          z2 += zk[j] * zk[j];
        }
        term += 0.5 * z2 - inv2s2h * q;
      }
      z.per_sample_log_terms[i] = term;
    }
  }, workers);

  const auto [log_mean, ess] = lse_and_sumsq(z.per_sample_log_terms, workers);
  z.log_z_hat = log_mean;
  z.ess = ess;
  return z;
}

std::vector<WeightedSample> importance_weights(const TrajectoryBatch& traj, const nd::Potential& phi,
                                               const nd::Potential& psi, const LogDensity& log_nu,
                                               const LogDensity& log_mu, int workers) {
  if (!traj.controlled()) fail(Errc::misuse, "importance_weights: controlled batch required");
  const int d = traj.dim();
  const int K = traj.config().K;
  const double h = traj.config().h();
  const double half_s2 = 0.5 * traj.config().sigma * traj.config().sigma;

  std::vector<WeightedSample> out(traj.n());
  nd::QueryReq lap_req;
  lap_req.lap_lo = 0;
  lap_req.lap_hi = d;
  parallel_blocks(traj.n(), [&](std::size_t, std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      double lap_sum = 0.0;
      for (int k = 0; k <= K; ++k) {
        const auto xk = traj.state(i, k);
        lap_sum += phi.query(xk, k * h, lap_req).lap - psi.query(xk, k * h, lap_req).lap;
      }
      const auto xT = traj.state(i, K + 1);
      out[i].point.assign(xT.begin(), xT.end());
      out[i].log_weight = log_mu(xT) - log_nu(traj.state(i, 0)) + h * half_s2 * lap_sum;
      if (!std::isfinite(out[i].log_weight))
        fail(Errc::numeric, "importance_weights: non-finite log weight at sample " + std::to_string(i));
    }
  }, workers);
  return out;
}

std::vector<WeightedSample> path_weights(const TrajectoryBatch& traj, const nd::Potential& psi,
                                         const LogDensity& log_nu, const LogDensity& log_mu, int workers) {
  const ZEstimate z = log_z_estimate(traj, psi, log_nu, log_mu, workers);
  std::vector<WeightedSample> out(traj.n());
  const int K = traj.config().K;
  for (std::size_t i = 0; i < traj.n(); ++i) {
    const auto xT = traj.state(i, K + 1);
    out[i].point.assign(xT.begin(), xT.end());
    out[i].log_weight = z.per_sample_log_terms[i];
  }
  return out;
}

std::vector<double> normalized_weights(const std::vector<WeightedSample>& samples) {
  if (samples.empty()) fail(Errc::estimator, "normalized_weights: empty sample set");
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& s : samples) mx = std::max(mx, s.log_weight);
  if (!std::isfinite(mx)) fail(Errc::estimator, "normalized_weights: no finite weight");
  std::vector<double> w(samples.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double lw = samples[i].log_weight - mx;
    w[i] = lw < -700.0 ? 0.0 : std::exp(lw);
    sum += w[i];
  }
  if (sum <= 0.0) fail(Errc::estimator, "normalized_weights: all weights vanished");
  for (auto& v : w) v /= sum;
  return w;
}

double effective_sample_size(const std::vector<double>& normalized) {
  double s2 = 0.0;
  for (double v : normalized) s2 += v * v;
  if (s2 <= 0.0) fail(Errc::estimator, "effective_sample_size: zero weights");
  return 1.0 / s2;
}

std::vector<double> weighted_statistic(const std::vector<WeightedSample>& samples,
                                       const std::function<std::vector<double>(std::span<const double>)>& g) {
  const std::vector<double> w = normalized_weights(samples);
  std::vector<double> acc;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (w[i] == 0.0) continue;
    const std::vector<double> gi = g(samples[i].point);
    if (acc.empty()) acc.assign(gi.size(), 0.0);
    for (std::size_t j = 0; j < gi.size(); ++j) acc[j] += w[i] * gi[j];
  }
  if (acc.empty()) fail(Errc::estimator, "weighted_statistic: no contributing samples");
  return acc;
}

}  // namespace sbs
