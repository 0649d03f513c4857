#include "trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "common.hpp"
#include "nd/graph.hpp"

namespace sbs {

namespace {

constexpr std::uint32_t kEvalEpochTag = 1000000;

Eigen::VectorXd grad_vector(const nd::ParamGradAccum& accum, const nd::Potential* pot, Eigen::Index size) {
  const std::vector<double>* g = accum.find(pot);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(size);
  if (g)
    for (Eigen::Index i = 0; i < size; ++i) out[i] = (*g)[static_cast<std::size_t>(i)];
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  loss.validate();
  sde.validate();
  if (network.hidden_dim < 1 || network.depth < 0) fail(Errc::config, "network: hidden_dim >= 1, depth >= 0");
  if (network.activation != "default" && network.activation != "relu" && network.activation != "softplus")
    fail(Errc::config, "network.activation must be default|relu|softplus");
  if (epochs < 0 || updates_per_batch < 1) fail(Errc::config, "train: epochs >= 0, updates_per_batch >= 1");
  if (patience < 1) fail(Errc::config, "train.patience >= 1 required");
  if (pretrain_steps < 0) fail(Errc::config, "train.pretrain_steps >= 0 required");
  if (eval_n < 2) fail(Errc::config, "eval.n >= 2 required");
  if (histogram_bins < 1) fail(Errc::config, "eval.histogram_bins >= 1 required");
}

nd::Act TrainConfig::resolve_activation() const {
  if (network.activation == "relu") return nd::Act::relu;
  if (network.activation == "softplus") return nd::Act::softplus;
  const bool needs_smooth = loss.kind == LossKind::pinn ||
                            (loss.kind == LossKind::td && loss.direction != Direction::forward);
  return needs_smooth ? nd::Act::softplus : nd::Act::relu;
}

double pretrain_phi(nd::ControlField& phi, const TargetSpec& target, const PriorSpec& prior,
                    const TrainConfig& cfg) {
  const std::size_t batch = cfg.pretrain_batch;
  CounterRng rng(cfg.seed);
  nd::AdamConfig opt = cfg.optimizer;
  opt.weight_decay = 0.0;  // plain regression fit
  nd::AdamState adam(phi.param_count(), opt);
  nd::QueryReq val_req;

  // Held-out draw for the stopping rule and the reported residual.
  const std::vector<double> held = sample_prior(prior, batch, rng, RngStream::pretrain, 0xFFFFu);
  auto held_mse = [&]() {
    const std::size_t nb = block_count(batch);
    std::vector<double> part(nb, 0.0);
    parallel_blocks(batch, [&](std::size_t b, std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i) {
        std::span<const double> x(held.data() + i * prior.dim, static_cast<std::size_t>(prior.dim));
        const double resid = nd::query(phi, x, 0.0, val_req).value - target.log_mu(x);
        part[b] += resid * resid;
      }
    }, cfg.workers);
    return reduce_ordered(part) / static_cast<double>(batch);
  };

  if (cfg.pretrain_steps == 0) return held_mse();

  std::vector<double> xs;
  for (int step = 0; step < cfg.pretrain_steps; ++step) {
    if (step % 25 == 0 && held_mse() <= cfg.pretrain_tolerance) break;
    xs = sample_prior(prior, batch, rng, RngStream::pretrain, static_cast<std::uint32_t>(step));
    const std::size_t nb = block_count(batch);
    std::vector<Eigen::VectorXd> gpart(nb, Eigen::VectorXd::Zero(phi.param_count()));
    std::vector<double> lpart(nb, 0.0);
    parallel_blocks(batch, [&](std::size_t b, std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i) {
        std::span<const double> x(xs.data() + i * prior.dim, static_cast<std::size_t>(prior.dim));
        const double pred = nd::query(phi, x, 0.0, val_req).value;
        const double resid = pred - target.log_mu(x);
        lpart[b] += resid * resid;
        nd::PointCotangent cot;
        cot.value = 2.0 * resid / static_cast<double>(batch);
        nd::query_pullback(phi, x, 0.0, val_req, cot, gpart[b].data());
      }
    }, cfg.workers);
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(phi.param_count());
    double loss = 0.0;
    for (std::size_t b = 0; b < nb; ++b) {
      grad += gpart[b];
      loss += lpart[b];
    }
    if (!std::isfinite(loss)) fail(Errc::numeric, "pretrain: non-finite regression loss");
    adam.step(phi.params(), grad);
  }
  return held_mse();
}

TrainResult train(const TargetSpec& target, const PriorSpec& prior, const TrainConfig& cfg) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();
  const int d = prior.dim;
  const nd::Act act = cfg.resolve_activation();

  TrainResult result;
  result.phi = std::make_unique<nd::ControlField>(d + 1, cfg.network.hidden_dim, cfg.network.depth, act);
  result.psi = std::make_unique<nd::ControlField>(d + 1, cfg.network.hidden_dim, cfg.network.depth, act);
  result.phi->init_params(cfg.seed);
  result.psi->init_params(cfg.seed + 1);

  if (cfg.pretrain_steps > 0) result.report.pretrain_mse = pretrain_phi(*result.phi, target, prior, cfg);

  nd::NetworkPotential phi_pot(*result.phi);
  nd::NetworkPotential psi_pot(*result.psi);
  const LogDensity log_nu = [&prior](std::span<const double> x) { return prior.log_nu(x); };
  const bool needs_reference = cfg.loss.kind == LossKind::variance || cfg.loss.kind == LossKind::td;

  SdeConfig sde = cfg.sde;
  sde.seed = cfg.seed;

  nd::AdamState adam_phi(result.phi->param_count(), cfg.optimizer);
  nd::AdamState adam_psi(result.psi->param_count(), cfg.optimizer);

  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  Eigen::VectorXd good_phi = result.phi->params();
  Eigen::VectorXd good_psi = result.psi->params();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    try {
      const TrajectoryBatch controlled =
          simulate_controlled(phi_pot, prior, sde, static_cast<std::uint32_t>(epoch), cfg.workers);
      std::unique_ptr<TrajectoryBatch> reference;
      if (needs_reference)
        reference = std::make_unique<TrajectoryBatch>(
            simulate_reference(prior, sde, static_cast<std::uint32_t>(epoch), cfg.workers));

      for (int u = 0; u < cfg.updates_per_batch; ++u) {
        nd::ParamGradAccum accum;
        accum.track(&phi_pot);
        accum.track(&psi_pot);
        const LossValue lv = loss_and_grad(cfg.loss, &controlled, reference.get(), phi_pot, psi_pot, log_nu,
                                           target.log_mu, &accum, cfg.workers);
        if (!std::isfinite(lv.total)) fail(Errc::numeric, "train: non-finite loss");
        if (u == 0) result.report.loss_history.push_back(lv);
        adam_phi.step(result.phi->params(), grad_vector(accum, &phi_pot, result.phi->param_count()));
        adam_psi.step(result.psi->params(), grad_vector(accum, &psi_pot, result.psi->param_count()));
      }
    } catch (const Error&) {
      result.phi->params() = good_phi;
      result.psi->params() = good_psi;
      throw;
    }
    good_phi = result.phi->params();
    good_psi = result.psi->params();
    result.report.epochs_run = epoch + 1;

    const double current = result.report.loss_history.back().total;
    if (current < best - cfg.min_delta * std::abs(best)) {
      best = current;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      result.report.stopped_early = true;
      break;
    }
  }

  result.report.metrics = evaluate(*result.phi, *result.psi, target, prior, cfg);
  result.report.wall_time_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return result;
}

EvalMetrics evaluate(const nd::ControlField& phi, const nd::ControlField& psi, const TargetSpec& target,
                     const PriorSpec& prior, const TrainConfig& cfg) {
  const int d = prior.dim;
  nd::NetworkPotential phi_pot(const_cast<nd::ControlField&>(phi));
  nd::NetworkPotential psi_pot(const_cast<nd::ControlField&>(psi));
  const LogDensity log_nu = [&prior](std::span<const double> x) { return prior.log_nu(x); };

  SdeConfig sde = cfg.sde;
  sde.seed = cfg.seed;
  sde.n = cfg.eval_n;
  const TrajectoryBatch traj = simulate_controlled(phi_pot, prior, sde, kEvalEpochTag, cfg.workers);

  EvalMetrics m;
  const ZEstimate z = log_z_estimate(traj, psi_pot, log_nu, target.log_mu, cfg.workers);
  m.log_z_hat = z.log_z_hat;
  m.neg_log_z = -z.log_z_hat;

  // Reweight by the path-measure weights (constant at the optimum); the
  // Laplacian-form weights stay available through importance_weights().
  const auto samples = path_weights(traj, psi_pot, log_nu, target.log_mu, cfg.workers);
  const std::vector<double> w = normalized_weights(samples);
  m.ess = effective_sample_size(w);

  m.weighted_mean.assign(d, 0.0);
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (int j = 0; j < d; ++j) m.weighted_mean[j] += w[i] * samples[i].point[j];
  m.weighted_stddev.assign(d, 0.0);
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (int j = 0; j < d; ++j) {
      const double c = samples[i].point[j] - m.weighted_mean[j];
      m.weighted_stddev[j] += w[i] * c * c;
    }
  for (int j = 0; j < d; ++j) m.weighted_stddev[j] = std::sqrt(m.weighted_stddev[j]);

  if (target.truth) {
    double me2 = 0.0, sre = 0.0;
    for (int j = 0; j < d; ++j) {
      const double em = m.weighted_mean[j] - target.truth->mean[j];
      me2 += em * em;
      sre += std::abs(m.weighted_stddev[j] - target.truth->stddev[j]) / target.truth->stddev[j];
    }
    m.mean_abs_error = std::sqrt(me2);
    m.stddev_rel_error = sre / d;
  }

  // Entropic transport distance between the weighted terminal cloud and
  // reference draws from the target.
  const std::size_t npts = std::min<std::size_t>(cfg.sinkhorn_max_points, samples.size());
  WeightedCloud xs, ys;
  xs.dim = ys.dim = d;
  xs.points.reserve(npts * d);
  xs.weights.reserve(npts);
  double wsum = 0.0;
  for (std::size_t i = 0; i < npts; ++i) wsum += w[i];
  for (std::size_t i = 0; i < npts; ++i) {
    for (int j = 0; j < d; ++j) xs.points.push_back(samples[i].point[j]);
    xs.weights.push_back(std::max(w[i] / wsum, 1e-300));
  }
  CounterRng rng(cfg.seed);
  ys.points = sample_target_reference(target.name, npts, rng, kEvalEpochTag);
  const auto plan = sinkhorn_cost(xs, ys, cfg.sinkhorn_epsilon, 1e-6, 5000, cfg.workers);
  m.entropic_w2 = plan.cost;

  // Marginal histograms over the sample range.
  m.histograms.resize(d);
  for (int j = 0; j < d; ++j) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& s : samples) {
      lo = std::min(lo, s.point[j]);
      hi = std::max(hi, s.point[j]);
    }
    if (!(hi > lo)) hi = lo + 1.0;
    const int bins = cfg.histogram_bins;
    HistogramData& hg = m.histograms[j];
    hg.edges.resize(bins + 1);
    for (int b = 0; b <= bins; ++b) hg.edges[b] = lo + (hi - lo) * b / bins;
    hg.weighted_mass.assign(bins, 0.0);
    hg.unweighted_mass.assign(bins, 0.0);
    const double inv_n = 1.0 / static_cast<double>(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
      int b = static_cast<int>((samples[i].point[j] - lo) / (hi - lo) * bins);
      b = std::clamp(b, 0, bins - 1);
      hg.weighted_mass[b] += w[i];
      hg.unweighted_mass[b] += inv_n;
    }
  }
  return m;
}

}  // namespace sbs
