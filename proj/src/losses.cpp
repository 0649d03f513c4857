#include "losses.hpp"

#include <cmath>
#include <functional>

#include "common.hpp"

namespace sbs {

namespace {

using nd::Graph;
using Var = Graph::Var;

constexpr int kMaxTerms = 8;

struct Term {
  enum class Reduce { variance, mean, mean_square };
  Reduce reduce = Reduce::mean;
  double scale = 1.0;  // applied to the reduced value
  double coeff = 1.0;  // weight inside the total (lambda for regularizers)
};

using Builder = std::function<void(Graph&, std::size_t, Var*)>;

double ordered_mean_of_squares(std::span<const double> xs, int workers) {
  const std::size_t n = xs.size();
  const std::size_t nb = block_count(n);
  std::vector<double> partial(nb, 0.0);
  parallel_blocks(n, [&](std::size_t b, std::size_t lo, std::size_t hi) {
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += xs[i] * xs[i];
    partial[b] = s;
  }, workers);
  return reduce_ordered(partial) / static_cast<double>(n);
}

// Evaluates the reduced value of every term; when `accum` is given, re-runs
// each trajectory graph and reverse-accumulates with the analytic cotangent
// of its reduction.  Per-block partial gradients merge in block order, so the
// result is independent of the worker count.
std::vector<double> run_terms(std::size_t n, int n_terms, const Builder& build, std::span<const Term> terms,
                              nd::ParamGradAccum* accum, int workers) {
  std::vector<double> values(static_cast<std::size_t>(n_terms) * n);
  parallel_blocks(n, [&](std::size_t, std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      Graph g;
      Var roots[kMaxTerms];
      build(g, i, roots);
      for (int t = 0; t < n_terms; ++t) values[static_cast<std::size_t>(t) * n + i] = g.value(roots[t]);
    }
  }, workers);

  std::vector<double> reduced(n_terms), means(n_terms, 0.0);
  for (int t = 0; t < n_terms; ++t) {
    std::span<const double> col(values.data() + static_cast<std::size_t>(t) * n, n);
    switch (terms[t].reduce) {
      case Term::Reduce::variance: {
        const MeanVar mv = mean_var(col, workers);
        means[t] = mv.mean;
        reduced[t] = terms[t].scale * mv.var;
        break;
      }
      case Term::Reduce::mean: {
        const MeanVar mv = mean_var(col, workers);
        means[t] = mv.mean;
        reduced[t] = terms[t].scale * mv.mean;
        break;
      }
      case Term::Reduce::mean_square:
        reduced[t] = terms[t].scale * ordered_mean_of_squares(col, workers);
        break;
    }
  }

  if (accum) {
    const std::size_t nb = block_count(n);
    std::vector<nd::ParamGradAccum> partial(nb);
    const double dn = static_cast<double>(n);
    parallel_blocks(n, [&](std::size_t b, std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i) {
        Graph g;
        Var roots[kMaxTerms];
        build(g, i, roots);
        std::pair<Var, double> seeds[kMaxTerms];
        for (int t = 0; t < n_terms; ++t) {
          const double v = values[static_cast<std::size_t>(t) * n + i];
          double c = 0.0;
          switch (terms[t].reduce) {
            case Term::Reduce::variance:
              c = 2.0 / dn * (v - means[t]);
              break;
            case Term::Reduce::mean:
              c = 1.0 / dn;
              break;
            case Term::Reduce::mean_square:
              c = 2.0 / dn * v;
              break;
          }
          seeds[t] = {roots[t], terms[t].coeff * terms[t].scale * c};
        }
        g.backward({seeds, static_cast<std::size_t>(n_terms)}, partial[b]);
      }
    }, workers);
    for (std::size_t b = 0; b < nb; ++b) accum->add_scaled(partial[b], 1.0);
  }
  return reduced;
}

Var norm2(Graph& g, const Graph::QueryVars& q, int d) {
  Var acc = g.square(q.grad[0]);
  for (int j = 1; j < d; ++j) acc = g.add(acc, g.square(q.grad[j]));
  return acc;
}

// sum_j (cdiff_j - s * grad_j)^2
Var quad_diff(Graph& g, std::span<const double> cdiff, const Graph::QueryVars& q, double s, int d) {
  Var acc = -1;
  for (int j = 0; j < d; ++j) {
    const Var term = g.add_const(g.mul_const(q.grad[j], -s), cdiff[j]);
    const Var sq = g.square(term);
    acc = (j == 0) ? sq : g.add(acc, sq);
  }
  return acc;
}

// sum_j of (cdiff_j - s g_j)^2 - cdiff_j^2 (sign > 0) or its negation.  The
// squares are differenced per component so a zero-gradient field cancels
// bitwise, no matter how the optimizer contracts the surrounding arithmetic.
Var paired_quad(Graph& g, std::span<const double> cdiff, const Graph::QueryVars& q, double s, int d, int sign) {
  Var acc = -1;
  for (int j = 0; j < d; ++j) {
    const double base = cdiff[j] * cdiff[j];
    const Var term = g.add_const(g.mul_const(q.grad[j], -s), cdiff[j]);
    const Var sq = g.square(term);
    const Var pair = sign > 0 ? g.add_const(sq, -base) : g.add_const(g.neg(sq), base);
    acc = (j == 0) ? pair : g.add(acc, pair);
  }
  return acc;
}

void require_controlled(const TrajectoryBatch& traj, bool want_controlled, const char* who) {
  if (traj.controlled() != want_controlled)
    fail(Errc::misuse, std::string(who) + (want_controlled ? ": controlled batch required"
                                                           : ": uncontrolled reference batch required"));
}

void require_pairs(const TrajectoryBatch& a, const TrajectoryBatch& b, const char* who) {
  if (a.n() != b.n() || a.dim() != b.dim() || a.config().K != b.config().K)
    fail(Errc::misuse, std::string(who) + ": controlled and reference batches must pair up");
}

// --- bracket builders -------------------------------------------------------

// Discretized log RN bracket of the controlled forward chain vs the
// psi-controlled backward chain; optionally also emits the phi control
// energy sum (loss (a)).
Var build_logvar_bracket(Graph& g, const TrajectoryBatch& traj, const nd::Potential& phi,
                         const nd::Potential& psi, const LogDensity& log_nu, const LogDensity& log_mu,
                         std::size_t i, Var* energy_root) {
  const int d = traj.dim();
  const int K = traj.config().K;
  const double h = traj.config().h();
  const double sig = traj.config().sigma;
  const double sig2h = sig * sig * h;
  const double inv2s2h = 1.0 / (2.0 * sig2h);

  nd::QueryReq grad_req;
  grad_req.grad = true;

  Var acc = g.constant(log_nu(traj.state(i, 0)) - log_mu(traj.state(i, K + 1)));
  Var energy = -1;
  double cback[nd::kMaxSpatialDim], cfwd[nd::kMaxSpatialDim];
  for (int k = 0; k <= K; ++k) {
    const auto xk = traj.state(i, k);
    const auto xn = traj.state(i, k + 1);
    for (int j = 0; j < d; ++j) {
      cback[j] = xk[j] - xn[j];
      cfwd[j] = xn[j] - xk[j];
    }
    const auto qpsi = g.query(psi, xn, (k + 1) * h, grad_req);
    const auto qphi = g.query(phi, xk, k * h, grad_req);
    const Var back = quad_diff(g, {cback, static_cast<std::size_t>(d)}, qpsi, sig2h, d);
    const Var fwd = quad_diff(g, {cfwd, static_cast<std::size_t>(d)}, qphi, sig2h, d);
    acc = g.add(acc, g.mul_const(g.sub(back, fwd), inv2s2h));
    if (energy_root) {
      const Var e = g.mul_const(norm2(g, qphi, d), 0.5 * sig * sig);
      energy = (k == 0) ? e : g.add(energy, e);
    }
  }
  if (energy_root) *energy_root = energy;
  return acc;
}

Var build_pinn_sum(Graph& g, const TrajectoryBatch& traj, const nd::Potential& field, bool backward,
                   bool printed_sign, std::size_t i) {
  const int d = traj.dim();
  const int K = traj.config().K;
  const double h = traj.config().h();
  const double half_s2 = 0.5 * traj.config().sigma * traj.config().sigma;

  nd::QueryReq req;
  req.grad = true;
  req.time = true;
  req.lap_lo = 0;
  req.lap_hi = d;

  Var acc = -1;
  for (int k = 0; k <= K; ++k) {
    const auto q = g.query(field, traj.state(i, k), k * h, req);
    const Var n2 = norm2(g, q, d);
    Var r;
    if (!backward) {
      r = g.add(q.time_deriv, g.add(g.mul_const(q.lap, half_s2), g.mul_const(n2, half_s2)));
    } else if (printed_sign) {
      r = g.add(g.sub(q.time_deriv, g.mul_const(q.lap, half_s2)), g.mul_const(n2, half_s2));
    } else {
      r = g.sub(g.sub(q.time_deriv, g.mul_const(q.lap, half_s2)), g.mul_const(n2, half_s2));
    }
    const Var a = g.abs(r);
    acc = (k == 0) ? a : g.add(acc, a);
  }
  return acc;
}

Var build_variance_bracket(Graph& g, const TrajectoryBatch& ref, const nd::Potential& field, bool backward,
                           std::size_t i) {
  const int d = ref.dim();
  const int K = ref.config().K;
  const double h = ref.config().h();
  const double sig = ref.config().sigma;
  const double sig2h = sig * sig * h;
  const double inv2s2h = 1.0 / (2.0 * sig2h);

  nd::QueryReq val_req;
  nd::QueryReq grad_req;
  grad_req.grad = true;

  const auto q_end = g.query(field, ref.state(i, K + 1), (K + 1) * h, val_req);
  const auto q_start = g.query(field, ref.state(i, 0), 0.0, val_req);
  Var acc = g.sub(q_end.value, q_start.value);
  double cdiff[nd::kMaxSpatialDim];
  for (int k = 0; k <= K; ++k) {
    const auto yk = ref.state(i, k);
    const auto yn = ref.state(i, k + 1);
    if (!backward) {
      for (int j = 0; j < d; ++j) cdiff[j] = yn[j] - yk[j];
      const auto q = g.query(field, yk, k * h, grad_req);
      const Var quad = paired_quad(g, {cdiff, static_cast<std::size_t>(d)}, q, sig2h, d, +1);
      acc = g.add(acc, g.mul_const(quad, inv2s2h));
    } else {
      for (int j = 0; j < d; ++j) cdiff[j] = yk[j] - yn[j];
      const auto q = g.query(field, yn, (k + 1) * h, grad_req);
      const Var quad = paired_quad(g, {cdiff, static_cast<std::size_t>(d)}, q, sig2h, d, -1);
      acc = g.add(acc, g.mul_const(quad, inv2s2h));
    }
  }
  return acc;
}

Var build_moment_bracket(Graph& g, const TrajectoryBatch& ref, const nd::Potential& field, std::size_t i) {
  const int d = ref.dim();
  const int K = ref.config().K;
  const double h = ref.config().h();
  const double half_s2h = 0.5 * ref.config().sigma * ref.config().sigma * h;

  nd::QueryReq val_req;
  nd::QueryReq grad_req;
  grad_req.grad = true;

  const auto q_end = g.query(field, ref.state(i, K + 1), (K + 1) * h, val_req);
  const auto q_start = g.query(field, ref.state(i, 0), 0.0, val_req);
  Var acc = g.sub(q_end.value, q_start.value);
  for (int k = 0; k <= K; ++k) {
    const auto q = g.query(field, ref.state(i, k), k * h, grad_req);
    acc = g.add(acc, g.mul_const(norm2(g, q, d), half_s2h));
  }
  return acc;
}

Var build_td_sum(Graph& g, const TrajectoryBatch& ref, const nd::Potential& field, bool backward,
                 std::size_t i) {
  const int d = ref.dim();
  const int K = ref.config().K;
  const double h = ref.config().h();
  const double sig = ref.config().sigma;
  const double half_s2h = 0.5 * sig * sig * h;
  const double sig_sqrt_h = sig * std::sqrt(h);
  const double s2h = sig * sig * h;

  std::vector<Graph::QueryVars> qs(static_cast<std::size_t>(K) + 2);
  for (int k = 0; k <= K + 1; ++k) {
    nd::QueryReq req;
    if (k <= K) {
      req.grad = true;
      if (backward) {
        req.lap_lo = 0;
        req.lap_hi = d;
      }
    }
    qs[k] = g.query(field, ref.state(i, k), k * h, req);
  }

  Var acc = -1;
  for (int k = 0; k <= K; ++k) {
    const auto zk = ref.noise(i, k);
    Var dot = -1;
    for (int j = 0; j < d; ++j) {
      const Var p = g.mul_const(qs[k].grad[j], sig_sqrt_h * zk[j]);
      dot = (j == 0) ? p : g.add(dot, p);
    }
    Var r = g.sub(qs[k + 1].value, qs[k].value);
    const Var n2 = g.mul_const(norm2(g, qs[k], d), half_s2h);
    if (!backward) {
      r = g.sub(g.add(r, n2), dot);
    } else {
      r = g.sub(g.sub(g.sub(r, n2), g.mul_const(qs[k].lap, s2h)), dot);
    }
    const Var a = g.abs(r);
    acc = (k == 0) ? a : g.add(acc, a);
  }
  return acc;
}

// The four separately-controlled roots: boundary T, boundary 0, psi path,
// phi path.
void build_sc(Graph& g, const TrajectoryBatch& traj, const nd::Potential& phi, const nd::Potential& psi,
              const LogDensity& log_nu, const LogDensity& log_mu, std::size_t i, Var* roots) {
  const int d = traj.dim();
  const int K = traj.config().K;
  const double h = traj.config().h();
  const double sig = traj.config().sigma;
  const double sig2h = sig * sig * h;
  const double inv2s2h = 1.0 / (2.0 * sig2h);

  nd::QueryReq val_req;
  nd::QueryReq grad_req;
  grad_req.grad = true;

  const auto x0 = traj.state(i, 0);
  const auto xT = traj.state(i, K + 1);
  const double tT = (K + 1) * h;

  const auto phi_0 = g.query(phi, x0, 0.0, val_req);
  const auto phi_T = g.query(phi, xT, tT, val_req);
  const auto psi_0 = g.query(psi, x0, 0.0, val_req);
  const auto psi_T = g.query(psi, xT, tT, val_req);

  roots[0] = g.add_const(g.add(psi_T.value, phi_T.value), -log_mu(xT));
  roots[1] = g.add_const(g.add(psi_0.value, phi_0.value), -log_nu(x0));

  Var psi_path = g.sub(psi_T.value, psi_0.value);
  Var phi_path = g.sub(phi_0.value, phi_T.value);
  double cback[nd::kMaxSpatialDim], cfwd[nd::kMaxSpatialDim];
  for (int k = 0; k <= K; ++k) {
    const auto xk = traj.state(i, k);
    const auto xn = traj.state(i, k + 1);
    for (int j = 0; j < d; ++j) {
      cback[j] = xk[j] - xn[j];
      cfwd[j] = xn[j] - xk[j];
    }
    const auto qpsi = g.query(psi, xn, (k + 1) * h, grad_req);
    const Var back = paired_quad(g, {cback, static_cast<std::size_t>(d)}, qpsi, sig2h, d, -1);
    psi_path = g.add(psi_path, g.mul_const(back, inv2s2h));

    const auto qphi = g.query(phi, xk, k * h, grad_req);
    const Var fwd = paired_quad(g, {cfwd, static_cast<std::size_t>(d)}, qphi, sig2h, d, -1);
    phi_path = g.add(phi_path, g.mul_const(fwd, inv2s2h));
  }
  roots[2] = psi_path;
  roots[3] = phi_path;
}

}  // namespace

// --- public surface ---------------------------------------------------------

LossKind loss_kind_from_string(const std::string& s) {
  if (s == "PINN" || s == "pinn") return LossKind::pinn;
  if (s == "Variance" || s == "variance") return LossKind::variance;
  if (s == "TD" || s == "td") return LossKind::td;
  if (s == "SeparateControl" || s == "separate_control" || s == "SC" || s == "sc")
    return LossKind::separate_control;
  if (s == "KLEnergy" || s == "kl_energy") return LossKind::kl_energy;
  fail(Errc::config, "unknown loss kind: '" + s + "' (field: loss.kind)");
}

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::pinn: return "PINN";
    case LossKind::variance: return "Variance";
    case LossKind::td: return "TD";
    case LossKind::separate_control: return "SeparateControl";
    case LossKind::kl_energy: return "KLEnergy";
  }
  return "?";
}

Direction direction_from_string(const std::string& s) {
  if (s == "forward") return Direction::forward;
  if (s == "backward") return Direction::backward;
  if (s == "both") return Direction::both;
  fail(Errc::config, "unknown direction: '" + s + "' (field: loss.direction)");
}

std::string to_string(Direction d) {
  switch (d) {
    case Direction::forward: return "forward";
    case Direction::backward: return "backward";
    case Direction::both: return "both";
  }
  return "?";
}

void LossConfig::validate() const {
  if (!(lambda > 0.0)) fail(Errc::config, "loss.lambda must be positive");
}

double logvar_divergence(const TrajectoryBatch& traj, const nd::Potential& phi, const nd::Potential& psi,
                         const LogDensity& log_nu, const LogDensity& log_mu, int workers) {
  require_controlled(traj, true, "logvar_divergence");
  if (traj.n() < 2) fail(Errc::degenerate, "logvar_divergence: need n >= 2");
  const Term term{Term::Reduce::variance, 1.0 / (traj.config().K + 1), 1.0};
  const auto reduced = run_terms(traj.n(), 1,
                                 [&](Graph& g, std::size_t i, Var* roots) {
                                   roots[0] = build_logvar_bracket(g, traj, phi, psi, log_nu, log_mu, i, nullptr);
                                 },
                                 {&term, 1}, nullptr, workers);
  return reduced[0];
}

LossValue kl_divergence_energy(const TrajectoryBatch& traj, const nd::Potential& phi, const nd::Potential& psi,
                               const LogDensity& log_nu, const LogDensity& log_mu, double lambda, int workers) {
  require_controlled(traj, true, "kl_divergence_energy");
  if (traj.n() < 2) fail(Errc::degenerate, "kl_divergence_energy: need n >= 2");
  const Term terms[2] = {{Term::Reduce::mean, 1.0, 1.0}, {Term::Reduce::mean, traj.config().h(), lambda}};
  const auto reduced = run_terms(traj.n(), 2,
                                 [&](Graph& g, std::size_t i, Var* roots) {
                                   roots[0] = build_logvar_bracket(g, traj, phi, psi, log_nu, log_mu, i, &roots[1]);
                                 },
                                 terms, nullptr, workers);
  LossValue lv;
  lv.divergence_part = reduced[0];
  lv.regularizer_part = reduced[1];
  lv.total = reduced[0] + lambda * reduced[1];
  return lv;
}

double pinn_regularizer(const TrajectoryBatch& traj, const nd::Potential& field, bool backward, bool printed_sign,
                        int workers) {
  const Term term{Term::Reduce::mean, traj.config().h(), 1.0};
  const auto reduced = run_terms(traj.n(), 1,
                                 [&](Graph& g, std::size_t i, Var* roots) {
                                   roots[0] = build_pinn_sum(g, traj, field, backward, printed_sign, i);
                                 },
                                 {&term, 1}, nullptr, workers);
  return reduced[0];
}

double variance_regularizer(const TrajectoryBatch& ref_traj, const nd::Potential& field, bool backward,
                            int workers) {
  require_controlled(ref_traj, false, "variance_regularizer");
  if (ref_traj.n() < 2) fail(Errc::degenerate, "variance_regularizer: need n >= 2");
  const Term term{Term::Reduce::variance, 1.0 / (ref_traj.config().K + 1), 1.0};
  const auto reduced = run_terms(ref_traj.n(), 1,
                                 [&](Graph& g, std::size_t i, Var* roots) {
                                   roots[0] = build_variance_bracket(g, ref_traj, field, backward, i);
                                 },
                                 {&term, 1}, nullptr, workers);
  return reduced[0];
}

double moment_regularizer(const TrajectoryBatch& ref_traj, const nd::Potential& field, int workers) {
  require_controlled(ref_traj, false, "moment_regularizer");
  const Term term{Term::Reduce::mean_square, 1.0 / (ref_traj.config().K + 1), 1.0};
  const auto reduced = run_terms(ref_traj.n(), 1,
                                 [&](Graph& g, std::size_t i, Var* roots) {
                                   roots[0] = build_moment_bracket(g, ref_traj, field, i);
                                 },
                                 {&term, 1}, nullptr, workers);
  return reduced[0];
}

double td_regularizer(const TrajectoryBatch& ref_traj, const nd::Potential& field, bool backward, int workers) {
  require_controlled(ref_traj, false, "td_regularizer");
  const Term term{Term::Reduce::mean, ref_traj.config().h(), 1.0};
  const auto reduced = run_terms(ref_traj.n(), 1,
                                 [&](Graph& g, std::size_t i, Var* roots) {
                                   roots[0] = build_td_sum(g, ref_traj, field, backward, i);
                                 },
                                 {&term, 1}, nullptr, workers);
  return reduced[0];
}

LossValue separate_control_loss(const TrajectoryBatch& traj, const nd::Potential& phi, const nd::Potential& psi,
                                const LogDensity& log_nu, const LogDensity& log_mu, double lambda, int workers) {
  require_controlled(traj, true, "separate_control_loss");
  if (traj.n() < 2) fail(Errc::degenerate, "separate_control_loss: need n >= 2");
  const double kscale = 1.0 / (traj.config().K + 1);
  const Term terms[4] = {{Term::Reduce::variance, 1.0, 1.0},
                         {Term::Reduce::variance, 1.0, 1.0},
                         {Term::Reduce::variance, kscale, lambda},
                         {Term::Reduce::variance, kscale, lambda}};
  const auto reduced = run_terms(traj.n(), 4,
                                 [&](Graph& g, std::size_t i, Var* roots) {
                                   build_sc(g, traj, phi, psi, log_nu, log_mu, i, roots);
                                 },
                                 terms, nullptr, workers);
  LossValue lv;
  for (int t = 0; t < 4; ++t) lv.sc_terms[t] = reduced[t];
  lv.divergence_part = reduced[0] + reduced[1];
  lv.regularizer_part = reduced[2] + reduced[3];
  lv.total = lv.divergence_part + lambda * lv.regularizer_part;
  return lv;
}

LossValue loss_and_grad(const LossConfig& cfg, const TrajectoryBatch* controlled, const TrajectoryBatch* reference,
                        const nd::Potential& phi, const nd::Potential& psi, const LogDensity& log_nu,
                        const LogDensity& log_mu, nd::ParamGradAccum* accum, int workers) {
  cfg.validate();
  const bool fwd = cfg.direction != Direction::backward;
  const bool bwd = cfg.direction != Direction::forward;

  LossValue lv;
  if (cfg.kind == LossKind::separate_control) {
    if (!controlled) fail(Errc::misuse, "loss_and_grad: controlled batch required");
    require_controlled(*controlled, true, "loss_and_grad");
    if (controlled->n() < 2) fail(Errc::degenerate, "loss_and_grad: need n >= 2");
    const double kscale = 1.0 / (controlled->config().K + 1);
    const Term terms[4] = {{Term::Reduce::variance, 1.0, 1.0},
                           {Term::Reduce::variance, 1.0, 1.0},
                           {Term::Reduce::variance, kscale, cfg.lambda},
                           {Term::Reduce::variance, kscale, cfg.lambda}};
    const auto reduced = run_terms(controlled->n(), 4,
                                   [&](Graph& g, std::size_t i, Var* roots) {
                                     build_sc(g, *controlled, phi, psi, log_nu, log_mu, i, roots);
                                   },
                                   terms, accum, workers);
    for (int t = 0; t < 4; ++t) lv.sc_terms[t] = reduced[t];
    lv.divergence_part = reduced[0] + reduced[1];
    lv.regularizer_part = reduced[2] + reduced[3];
    lv.total = lv.divergence_part + cfg.lambda * lv.regularizer_part;
    return lv;
  }

  if (!controlled) fail(Errc::misuse, "loss_and_grad: controlled batch required");
  require_controlled(*controlled, true, "loss_and_grad");
  if (controlled->n() < 2) fail(Errc::degenerate, "loss_and_grad: need n >= 2");

  if (cfg.kind == LossKind::kl_energy) {
    const Term terms[2] = {{Term::Reduce::mean, 1.0, 1.0},
                           {Term::Reduce::mean, controlled->config().h(), cfg.lambda}};
    const auto reduced = run_terms(controlled->n(), 2,
                                   [&](Graph& g, std::size_t i, Var* roots) {
                                     roots[0] =
                                         build_logvar_bracket(g, *controlled, phi, psi, log_nu, log_mu, i, &roots[1]);
                                   },
                                   terms, accum, workers);
    lv.divergence_part = reduced[0];
    lv.regularizer_part = reduced[1];
    lv.total = reduced[0] + cfg.lambda * reduced[1];
    return lv;
  }

  const bool needs_reference = cfg.kind == LossKind::variance || cfg.kind == LossKind::td;
  if (needs_reference) {
    if (!reference) fail(Errc::misuse, "loss_and_grad: reference batch required for this loss kind");
    require_controlled(*reference, false, "loss_and_grad");
    require_pairs(*controlled, *reference, "loss_and_grad");
  }

  Term terms[3];
  int n_terms = 1;
  terms[0] = {Term::Reduce::variance, 1.0 / (controlled->config().K + 1), 1.0};
  const double h = controlled->config().h();
  const double kscale = 1.0 / (controlled->config().K + 1);
  if (cfg.kind == LossKind::pinn || cfg.kind == LossKind::td) {
    if (fwd) terms[n_terms++] = {Term::Reduce::mean, h, cfg.lambda};
    if (bwd) terms[n_terms++] = {Term::Reduce::mean, h, cfg.lambda};
  } else {  // variance
    if (fwd) terms[n_terms++] = {Term::Reduce::variance, kscale, cfg.lambda};
    if (bwd) terms[n_terms++] = {Term::Reduce::variance, kscale, cfg.lambda};
  }

  const auto reduced = run_terms(
      controlled->n(), n_terms,
      [&](Graph& g, std::size_t i, Var* roots) {
        roots[0] = build_logvar_bracket(g, *controlled, phi, psi, log_nu, log_mu, i, nullptr);
        int t = 1;
        switch (cfg.kind) {
          case LossKind::pinn:
            if (fwd) roots[t++] = build_pinn_sum(g, *controlled, phi, false, false, i);
            if (bwd) roots[t++] = build_pinn_sum(g, *controlled, psi, true, cfg.backward_pinn_printed_sign, i);
            break;
          case LossKind::variance:
            if (fwd) roots[t++] = build_variance_bracket(g, *reference, phi, false, i);
            if (bwd) roots[t++] = build_variance_bracket(g, *reference, psi, true, i);
            break;
          case LossKind::td:
            if (fwd) roots[t++] = build_td_sum(g, *reference, phi, false, i);
            if (bwd) roots[t++] = build_td_sum(g, *reference, psi, true, i);
            break;
          default:
            break;
        }
      },
      {terms, static_cast<std::size_t>(n_terms)}, accum, workers);

  lv.divergence_part = reduced[0];
  lv.regularizer_part = 0.0;
  for (int t = 1; t < n_terms; ++t) lv.regularizer_part += reduced[t];
  lv.total = lv.divergence_part + cfg.lambda * lv.regularizer_part;
  return lv;
}

void regularizer_grad(const TrajectoryBatch& ref_traj, const nd::Potential& field, bool moment_form,
                      nd::ParamGradAccum& accum, int workers) {
  require_controlled(ref_traj, false, "regularizer_grad");
  const double kscale = 1.0 / (ref_traj.config().K + 1);
  const Term term{moment_form ? Term::Reduce::mean_square : Term::Reduce::variance, kscale, 1.0};
  run_terms(ref_traj.n(), 1,
            [&](Graph& g, std::size_t i, Var* roots) {
              roots[0] = moment_form ? build_moment_bracket(g, ref_traj, field, i)
                                     : build_variance_bracket(g, ref_traj, field, false, i);
            },
            {&term, 1}, &accum, workers);
}

}  // namespace sbs
