#include "phase2.hpp"

#include <cmath>

#include "common.hpp"

namespace sbs::phase2 {

namespace {
constexpr double kLog2Pi = 1.8378770664093454835606594728112353;

double log_std_normal(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return -0.5 * (s + v.size() * kLog2Pi);
}
}  // namespace

PhaseTrajectoryBatch::PhaseTrajectoryBatch(const SdeConfig& cfg, int dim, bool controlled)
    : cfg_(cfg), dim_(dim), controlled_(controlled) {
  states_.assign(cfg.n * (cfg.K + 2) * 2 * dim, 0.0);
  noises_.assign(cfg.n * (cfg.K + 1) * dim, 0.0);
  vhat_.assign(cfg.n * (cfg.K + 1) * dim, 0.0);
}

void leapfrog(std::span<double> x, std::span<double> v, double h) {
  const std::size_t d = x.size();
  for (std::size_t j = 0; j < d; ++j) v[j] -= 0.5 * h * x[j];
  for (std::size_t j = 0; j < d; ++j) x[j] += h * v[j];
  for (std::size_t j = 0; j < d; ++j) v[j] -= 0.5 * h * x[j];
}

PhaseTrajectoryBatch simulate_splitting(const nd::Potential* lambda_field, const PriorSpec& prior,
                                        const SdeConfig& cfg, std::uint32_t epoch, bool control_at_pre_ou,
                                        int workers) {
  cfg.validate();
  const int d = prior.dim;
  if (lambda_field && lambda_field->spatial_dim() != 2 * d)
    fail(Errc::misuse, "simulate_splitting: control must act on (x, v)");
  PhaseTrajectoryBatch batch(cfg, d, lambda_field != nullptr);
  batch.mark_substep_cache();
  CounterRng rng(cfg.seed);
  const double h = cfg.h();
  const double decay = std::exp(-h);
  const double noise_scale = std::sqrt(1.0 - decay * decay);

  nd::QueryReq vgrad_req;
  vgrad_req.grad = true;

  parallel_blocks(cfg.n, [&](std::size_t, std::size_t lo, std::size_t hi) {
    std::vector<double> zpoint(2 * d);
    for (std::size_t i = lo; i < hi; ++i) {
      double draw[2 * nd::kMaxSpatialDim];
      rng.normals(RngStream::phase_prior, epoch, static_cast<std::uint32_t>(i), 0,
                  {draw, static_cast<std::size_t>(2 * d)});
      auto z0 = batch.state(i, 0);
      for (int j = 0; j < d; ++j) z0[j] = prior.mean[j] + prior.stddev * draw[j];
      for (int j = 0; j < d; ++j) z0[d + j] = draw[d + j];

      for (int k = 0; k <= cfg.K; ++k) {
        const auto zk = batch.state(i, k);
        auto zn = batch.state(i, k + 1);
        auto xi = batch.ou_noise(i, k);
        auto vh = batch.vhat(i, k);
        rng.normals(RngStream::phase_noise, epoch, static_cast<std::uint32_t>(i),
                    static_cast<std::uint32_t>(k + 1), {xi.data(), static_cast<std::size_t>(d)});
        for (int j = 0; j < d; ++j) xi[j] *= noise_scale;  // cache the injected increment
        for (int j = 0; j < d; ++j) vh[j] = decay * zk[d + j] + xi[j];

        for (int j = 0; j < d; ++j) zn[j] = zk[j];
        for (int j = 0; j < d; ++j) zn[d + j] = vh[j];
        if (lambda_field) {
          for (int j = 0; j < d; ++j) zpoint[j] = zk[j];
          for (int j = 0; j < d; ++j) zpoint[d + j] = control_at_pre_ou ? zk[d + j] : vh[j];
          const nd::PointEval e = lambda_field->query(zpoint, k * h, vgrad_req);
          for (int j = 0; j < d; ++j) zn[d + j] += 4.0 * h * e.grad[d + j];
        }
        leapfrog(zn.subspan(0, d), zn.subspan(d, d), h);
        for (int j = 0; j < 2 * d; ++j) {
          if (!std::isfinite(zn[j]))
            fail(Errc::divergence, "phase simulation diverged at trajectory " + std::to_string(i) + ", step " +
                                      std::to_string(k));
        }
      }
    }
  }, workers);
  return batch;
}

double second_order_variance_reg(const PhaseTrajectoryBatch& ref_traj, const nd::Potential& lambda_field,
                                 int workers) {
  if (ref_traj.controlled()) fail(Errc::misuse, "second_order_variance_reg: reference batch required");
  if (ref_traj.n() < 2) fail(Errc::degenerate, "second_order_variance_reg: need n >= 2");
  const int d = ref_traj.dim();
  const int K = ref_traj.config().K;
  const double h = ref_traj.config().h();

  nd::QueryReq val_req;
  nd::QueryReq grad_req;
  grad_req.grad = true;

  std::vector<double> brackets(ref_traj.n());
  parallel_blocks(ref_traj.n(), [&](std::size_t, std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      double acc = lambda_field.query(ref_traj.state(i, K + 1), (K + 1) * h, val_req).value -
                   lambda_field.query(ref_traj.state(i, 0), 0.0, val_req).value;
      for (int k = 0; k <= K; ++k) {
        const nd::PointEval e = lambda_field.query(ref_traj.state(i, k), k * h, grad_req);
        const auto nk = ref_traj.ou_noise(i, k);
        double g2 = 0.0, dot = 0.0;
        for (int j = 0; j < d; ++j) {
          g2 += e.grad[d + j] * e.grad[d + j];
          dot += e.grad[d + j] * nk[j];
        }
        acc += 2.0 * h * g2 - dot;
      }
      brackets[i] = acc;
    }
  }, workers);
  return mean_var(brackets, workers).var;
}

double second_order_pinn_reg(const PhaseTrajectoryBatch& ref_traj, const nd::Potential& field, bool backward,
                             int workers) {
  const int d = ref_traj.dim();
  const int K = ref_traj.config().K;
  const double h = ref_traj.config().h();

  nd::QueryReq req;
  req.grad = true;
  req.time = true;
  req.lap_lo = d;
  req.lap_hi = 2 * d;

  const std::size_t nb = block_count(ref_traj.n());
  std::vector<double> partial(nb, 0.0);
  parallel_blocks(ref_traj.n(), [&](std::size_t b, std::size_t lo, std::size_t hi) {
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) {
      for (int k = 0; k <= K; ++k) {
        const auto z = ref_traj.state(i, k);
        const nd::PointEval e = field.query(z, k * h, req);
        double gv2 = 0.0, drift_dot = 0.0;
        for (int j = 0; j < d; ++j) {
          const double bx = z[d + j];                  // dX drift
          const double bv = -z[j] - 2.0 * z[d + j];    // dV drift
          drift_dot += e.grad[j] * bx + e.grad[d + j] * bv;
          gv2 += e.grad[d + j] * e.grad[d + j];
        }
        double r;
        if (!backward) {
          r = e.time_deriv + 2.0 * gv2 + drift_dot + 2.0 * e.lap;
        } else {
          r = e.time_deriv + drift_dot - 2.0 * d - 2.0 * gv2 - 2.0 * e.lap;
        }
        s += std::abs(r);
      }
    }
    partial[b] = s;
  }, workers);
  return h * reduce_ordered(partial) / static_cast<double>(ref_traj.n());
}

ZEstimate second_order_log_z(const PhaseTrajectoryBatch& traj, const nd::Potential& eta_field,
                             const LogDensity& log_nu, const LogDensity& log_mu, int workers) {
  if (!traj.has_substep_cache()) fail(Errc::misuse, "second_order_log_z: substep cache missing");
  const int d = traj.dim();
  const int K = traj.config().K;
  const double h = traj.config().h();
  const double decay = std::exp(-h);
  const double denom = 2.0 * (1.0 - decay * decay);

  nd::QueryReq vgrad_req;
  vgrad_req.grad = true;

  ZEstimate z;
  z.per_sample_log_terms.assign(traj.n(), 0.0);
  parallel_blocks(traj.n(), [&](std::size_t, std::size_t lo, std::size_t hi) {
    std::vector<double> w(2 * d);
    for (std::size_t i = lo; i < hi; ++i) {
      const auto z0 = traj.state(i, 0);
      const auto zT = traj.state(i, K + 1);
      double term = log_mu(zT.subspan(0, d)) + log_std_normal(zT.subspan(d, d)) -
                    log_nu(z0.subspan(0, d)) - log_std_normal(z0.subspan(d, d));
      for (int k = 0; k <= K; ++k) {
        const auto zk = traj.state(i, k);
        const auto zn = traj.state(i, k + 1);
        const auto vh = traj.vhat(i, k);

        double fwd = 0.0;
        for (int j = 0; j < d; ++j) {
          const double r = vh[j] - decay * zk[d + j];
          fwd += r * r;
        }

        // Backward kernel: undo the leapfrog, apply the eta kick, undo the OU.
        for (int j = 0; j < 2 * d; ++j) w[j] = zn[j];
        leapfrog({w.data(), static_cast<std::size_t>(d)}, {w.data() + d, static_cast<std::size_t>(d)}, -h);
        const nd::PointEval e = eta_field.query(w, (k + 1) * h, vgrad_req);
        double bwd = 0.0;
        for (int j = 0; j < d; ++j) {
          const double r = zk[d + j] - decay * (w[d + j] + 4.0 * h * e.grad[d + j]);
          bwd += r * r;
        }
        term += (fwd - bwd) / denom;
      }
      z.per_sample_log_terms[i] = term;
    }
  }, workers);

  // Ordered log-sum-exp, as in the first-order estimator.
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : z.per_sample_log_terms) mx = std::max(mx, v);
  if (!std::isfinite(mx)) fail(Errc::numeric, "second_order_log_z: no finite term");
  double sum = 0.0, sumsq = 0.0;
  for (double v : z.per_sample_log_terms) {
    const double wexp = std::exp(v - mx);
    sum += wexp;
    sumsq += wexp * wexp;
  }
  z.log_z_hat = mx + std::log(sum / static_cast<double>(traj.n()));
  z.ess = sum * sum / sumsq;
  return z;
}

}  // namespace sbs::phase2
