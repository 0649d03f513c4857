#include "nd/query.hpp"

#include <Eigen/Dense>
#include <vector>

#include "common.hpp"

namespace sbs::nd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using WMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;

// Per-thread scratch for one forward/backward sweep.  Channel q carries the
// first-order tangent in direction dirs[q]; a channel may additionally carry
// the paired second-order state (pure second directional derivative).
struct Workspace {
  std::vector<double> u;                // input (m)
  std::vector<double> s, z;             // (D+1)*H states, D*H pre-activations
  std::vector<double> a1, a2, a3;       // D*H activation derivatives
  std::vector<double> sd, zd;           // ndir*(D+1)*H, ndir*D*H
  std::vector<double> s2, z2;           // same shape as sd/zd, second-order
  std::vector<double> bs, bsd, bs2;     // adjoint states (H per channel)
  std::vector<double> bz, bzd, bz2;     // adjoint pre-activations
  std::vector<double> tmp;
  std::vector<double> stack_b, stack_s;  // channel stacking for fused updates
};

thread_local Workspace tl_ws;

struct Pass {
  const ControlField* f;
  int H, D, m;
  int ndir;
  int dirs[kMaxSpatialDim + 1];
  bool second[kMaxSpatialDim + 1];
  Workspace* ws;

  double* srow(int l) { return ws->s.data() + static_cast<std::size_t>(l) * H; }
  double* zrow(int l) { return ws->z.data() + static_cast<std::size_t>(l) * H; }
  double* sdrow(int q, int l) { return ws->sd.data() + (static_cast<std::size_t>(q) * (D + 1) + l) * H; }
  double* zdrow(int q, int l) { return ws->zd.data() + (static_cast<std::size_t>(q) * D + l) * H; }
  double* s2row(int q, int l) { return ws->s2.data() + (static_cast<std::size_t>(q) * (D + 1) + l) * H; }
  double* z2row(int q, int l) { return ws->z2.data() + (static_cast<std::size_t>(q) * D + l) * H; }

  void setup(const ControlField& field, std::span<const double> x, double t) {
    f = &field;
    H = field.hidden_dim();
    D = field.depth();
    m = field.input_dim();
    ws = &tl_ws;
    ws->u.resize(m);
    for (int j = 0; j < m - 1; ++j) ws->u[j] = x[j];
    ws->u[m - 1] = t;
    const std::size_t sh = static_cast<std::size_t>(D + 1) * H;
    const std::size_t zh = static_cast<std::size_t>(std::max(D, 1)) * H;
    ws->s.resize(sh);
    ws->z.resize(zh);
    ws->a1.resize(zh);
    ws->a2.resize(zh);
    ws->a3.resize(zh);
    const std::size_t nq = static_cast<std::size_t>(std::max(ndir, 1));
    ws->sd.resize(nq * sh);
    ws->zd.resize(nq * zh);
    ws->s2.resize(nq * sh);
    ws->z2.resize(nq * zh);
    ws->bs.resize(H);
    ws->bz.resize(H);
    ws->bsd.resize(nq * H);
    ws->bzd.resize(nq * H);
    ws->bs2.resize(nq * H);
    ws->bz2.resize(nq * H);
    ws->tmp.resize(H);
    const std::size_t channels = 1 + 2 * nq;
    ws->stack_b.resize(channels * H);
    ws->stack_s.resize(channels * std::max<std::size_t>(H, static_cast<std::size_t>(m)));
  }

  // Forward sweep; fills states, tangents and activation derivatives.
  void forward() {
    const double* p = f->params().data();
    const Act act = f->activation();
    WMap Win(p + f->off_w_in(), H, m);
    CVecMap bin(p + f->off_b_in(), H);
    CVecMap u(ws->u.data(), m);

    VecMap(srow(0), H).noalias() = Win * u + bin;
    for (int q = 0; q < ndir; ++q) VecMap(sdrow(q, 0), H) = Win.col(dirs[q]);
    for (int q = 0; q < ndir; ++q)
      if (second[q]) VecMap(s2row(q, 0), H).setZero();

    for (int l = 0; l < D; ++l) {
      WMap W(p + f->off_layer_w(l), H, H);
      CVecMap b(p + f->off_layer_b(l), H);
      VecMap(zrow(l), H).noalias() = W * CVecMap(srow(l), H) + b;
      for (int q = 0; q < ndir; ++q) VecMap(zdrow(q, l), H).noalias() = W * CVecMap(sdrow(q, l), H);
      for (int q = 0; q < ndir; ++q)
        if (second[q]) VecMap(z2row(q, l), H).noalias() = W * CVecMap(s2row(q, l), H);

      const double* zl = zrow(l);
      double* a1l = ws->a1.data() + static_cast<std::size_t>(l) * H;
      double* a2l = ws->a2.data() + static_cast<std::size_t>(l) * H;
      double* a3l = ws->a3.data() + static_cast<std::size_t>(l) * H;
      double* sl = srow(l);
      double* so = srow(l + 1);
      for (int i = 0; i < H; ++i) {
        const ActDerivs d = act_derivs(act, zl[i]);
        a1l[i] = d.a1;
        a2l[i] = d.a2;
        a3l[i] = d.a3;
        so[i] = d.a0 + sl[i];
      }
      for (int q = 0; q < ndir; ++q) {
        const double* zq = zdrow(q, l);
        const double* si = sdrow(q, l);
        double* sq = sdrow(q, l + 1);
        for (int i = 0; i < H; ++i) sq[i] = a1l[i] * zq[i] + si[i];
        if (second[q]) {
          const double* z2q = z2row(q, l);
          const double* s2i = s2row(q, l);
          double* s2o = s2row(q, l + 1);
          for (int i = 0; i < H; ++i) s2o[i] = a2l[i] * zq[i] * zq[i] + a1l[i] * z2q[i] + s2i[i];
        }
      }
    }
  }

  double out_value() const {
    const double* p = f->params().data();
    return CVecMap(p + f->off_w_out(), H).dot(CVecMap(ws->s.data() + static_cast<std::size_t>(D) * H, H)) +
           p[f->off_b_out()];
  }
  double out_tangent(int q) {
    const double* p = f->params().data();
    return CVecMap(p + f->off_w_out(), H).dot(CVecMap(sdrow(q, D), H));
  }
  double out_second(int q) {
    const double* p = f->params().data();
    return CVecMap(p + f->off_w_out(), H).dot(CVecMap(s2row(q, D), H));
  }

  // Reverse sweep over the recorded channels.  cv is the cotangent of the
  // value, cd[q] of the first-order outputs, c2[q] of the second-order ones.
  // Channel contributions to each weight matrix are stacked into one product
  // so every gradient entry is incremented exactly once per sweep.
  void backward(double cv, const double* cd, const double* c2, double* g) {
    const double* p = f->params().data();
    CVecMap wout(p + f->off_w_out(), H);

    VecMap bs(ws->bs.data(), H);
    bs = cv * wout;
    for (int q = 0; q < ndir; ++q) VecMap(ws->bsd.data() + static_cast<std::size_t>(q) * H, H) = cd[q] * wout;
    for (int q = 0; q < ndir; ++q)
      if (second[q]) VecMap(ws->bs2.data() + static_cast<std::size_t>(q) * H, H) = c2[q] * wout;

    {
      VecMap tmp(ws->tmp.data(), H);
      tmp = cv * CVecMap(srow(D), H);
      for (int q = 0; q < ndir; ++q) tmp.noalias() += cd[q] * CVecMap(sdrow(q, D), H);
      for (int q = 0; q < ndir; ++q)
        if (second[q]) tmp.noalias() += c2[q] * CVecMap(s2row(q, D), H);
      VecMap(g + f->off_w_out(), H).noalias() += tmp;
    }
    g[f->off_b_out()] += cv;

    using ColMat = Eigen::Map<Eigen::MatrixXd>;
    for (int l = D - 1; l >= 0; --l) {
      const double* a1l = ws->a1.data() + static_cast<std::size_t>(l) * H;
      const double* a2l = ws->a2.data() + static_cast<std::size_t>(l) * H;
      const double* a3l = ws->a3.data() + static_cast<std::size_t>(l) * H;
      double* bzp = ws->bz.data();
      const double* bsp = ws->bs.data();
      for (int i = 0; i < H; ++i) bzp[i] = bsp[i] * a1l[i];
      for (int q = 0; q < ndir; ++q) {
        const double* bsdq = ws->bsd.data() + static_cast<std::size_t>(q) * H;
        const double* zq = zdrow(q, l);
        double* bzdq = ws->bzd.data() + static_cast<std::size_t>(q) * H;
        for (int i = 0; i < H; ++i) {
          bzdq[i] = bsdq[i] * a1l[i];
          bzp[i] += bsdq[i] * a2l[i] * zq[i];
        }
        if (second[q]) {
          const double* bs2q = ws->bs2.data() + static_cast<std::size_t>(q) * H;
          const double* z2q = z2row(q, l);
          double* bz2q = ws->bz2.data() + static_cast<std::size_t>(q) * H;
          for (int i = 0; i < H; ++i) {
            bz2q[i] = bs2q[i] * a1l[i];
            bzdq[i] += bs2q[i] * 2.0 * a2l[i] * zq[i];
            bzp[i] += bs2q[i] * (a3l[i] * zq[i] * zq[i] + a2l[i] * z2q[i]);
          }
        }
      }

      // stack channels: [bz | bzd_q (| bz2_q)] against [s | sd_q (| s2_q)]
      int cols = 0;
      auto put = [&](const double* badj, const double* sin) {
        std::copy(badj, badj + H, ws->stack_b.data() + static_cast<std::size_t>(cols) * H);
        std::copy(sin, sin + H, ws->stack_s.data() + static_cast<std::size_t>(cols) * H);
        ++cols;
      };
      put(ws->bz.data(), srow(l));
      for (int q = 0; q < ndir; ++q) {
        put(ws->bzd.data() + static_cast<std::size_t>(q) * H, sdrow(q, l));
        if (second[q]) put(ws->bz2.data() + static_cast<std::size_t>(q) * H, s2row(q, l));
      }

      WMap W(p + f->off_layer_w(l), H, H);
      Eigen::Map<RowMat> gW(g + f->off_layer_w(l), H, H);
      ColMat Bm(ws->stack_b.data(), H, cols);
      ColMat Sm(ws->stack_s.data(), H, cols);
      gW.noalias() += Bm * Sm.transpose();
      VecMap(g + f->off_layer_b(l), H).noalias() += CVecMap(ws->bz.data(), H);

      VecMap tmp(ws->tmp.data(), H);
      tmp.noalias() = W.transpose() * CVecMap(ws->bz.data(), H);
      VecMap(ws->bs.data(), H).noalias() += tmp;
      for (int q = 0; q < ndir; ++q) {
        CVecMap bzdq(ws->bzd.data() + static_cast<std::size_t>(q) * H, H);
        tmp.noalias() = W.transpose() * bzdq;
        VecMap(ws->bsd.data() + static_cast<std::size_t>(q) * H, H).noalias() += tmp;
        if (second[q]) {
          CVecMap bz2q(ws->bz2.data() + static_cast<std::size_t>(q) * H, H);
          tmp.noalias() = W.transpose() * bz2q;
          VecMap(ws->bs2.data() + static_cast<std::size_t>(q) * H, H).noalias() += tmp;
        }
      }
    }

    // input map: columns [bs0 | bsd_q] against [u | e_dirs]
    int cols = 0;
    auto put_in = [&](const double* badj, const double* uin) {
      std::copy(badj, badj + H, ws->stack_b.data() + static_cast<std::size_t>(cols) * H);
      double* dst = ws->stack_s.data() + static_cast<std::size_t>(cols) * m;
      std::copy(uin, uin + m, dst);
      ++cols;
    };
    put_in(ws->bs.data(), ws->u.data());
    double unit[kMaxSpatialDim + 1];
    for (int q = 0; q < ndir; ++q) {
      std::fill(unit, unit + m, 0.0);
      unit[dirs[q]] = 1.0;
      put_in(ws->bsd.data() + static_cast<std::size_t>(q) * H, unit);
    }
    Eigen::Map<RowMat> gWin(g + f->off_w_in(), H, m);
    ColMat Bm(ws->stack_b.data(), H, cols);
    ColMat Um(ws->stack_s.data(), m, cols);
    gWin.noalias() += Bm * Um.transpose();
    VecMap(g + f->off_b_in(), H).noalias() += CVecMap(ws->bs.data(), H);
  }
};

void check_inputs(const ControlField& f, std::span<const double> x, double t, const QueryReq& req) {
  const int sd = f.spatial_dim();
  if (static_cast<int>(x.size()) != sd) fail(Errc::misuse, "query: point dimension mismatch");
  if (sd > kMaxSpatialDim) fail(Errc::misuse, "query: spatial dimension too large");
  for (int j = 0; j < sd; ++j) check_finite(x[j], "query point");
  check_finite(t, "query time");
  if (req.want_lap() && (req.lap_lo < 0 || req.lap_hi > sd))
    fail(Errc::misuse, "query: laplacian range outside spatial inputs");
}

}  // namespace

QueryCounters& query_counters() {
  static QueryCounters counters;
  return counters;
}

PointEval query(const ControlField& f, std::span<const double> x, double t, const QueryReq& req) {
  check_inputs(f, x, t, req);
  const int sd = f.spatial_dim();
  Pass pass;
  pass.ndir = 0;
  int dir_of_input[kMaxSpatialDim + 1];
  for (int j = 0; j <= sd; ++j) dir_of_input[j] = -1;
  auto want_dir = [&](int j, bool snd) {
    if (dir_of_input[j] < 0) {
      dir_of_input[j] = pass.ndir;
      pass.dirs[pass.ndir] = j;
      pass.second[pass.ndir] = snd;
      ++pass.ndir;
    } else if (snd) {
      pass.second[dir_of_input[j]] = true;
    }
  };
  if (req.grad)
    for (int j = 0; j < sd; ++j) want_dir(j, false);
  if (req.time) want_dir(sd, false);
  for (int j = req.lap_lo; j < req.lap_hi; ++j) want_dir(j, true);

  pass.setup(f, x, t);
  pass.forward();

  PointEval out;
  out.value = pass.out_value();
  if (req.grad)
    for (int j = 0; j < sd; ++j) out.grad[j] = pass.out_tangent(dir_of_input[j]);
  if (req.time) out.time_deriv = pass.out_tangent(dir_of_input[sd]);
  if (req.want_lap()) {
    double lap = 0.0;
    for (int j = req.lap_lo; j < req.lap_hi; ++j) lap += pass.out_second(dir_of_input[j]);
    out.lap = lap;
  }
  if (!std::isfinite(out.value) || (req.want_lap() && !std::isfinite(out.lap)))
    fail(Errc::numeric, "query: non-finite network output");
  return out;
}

void query_pullback(const ControlField& f, std::span<const double> x, double t, const QueryReq& req,
                    const PointCotangent& cot, double* grad_out) {
  check_inputs(f, x, t, req);
  query_counters().pullbacks.fetch_add(1, std::memory_order_relaxed);
  const int sd = f.spatial_dim();

  bool need_first = cot.value != 0.0 || (req.time && cot.time_deriv != 0.0);
  if (req.grad)
    for (int j = 0; j < sd; ++j) need_first = need_first || cot.grad[j] != 0.0;
  const bool need_lap = req.want_lap() && cot.lap != 0.0;
  if (!need_first && !need_lap) return;

  // Single-sweep pullbacks write straight into grad_out (each entry is
  // incremented exactly once, so pullbacks stay bitwise additive).  The
  // Laplacian path runs one second-order sweep per traced direction and goes
  // through a scratch buffer that lands in grad_out with a single addition.
  const int lap_dirs = need_lap ? (req.lap_hi - req.lap_lo) : 0;
  const int sweeps = (need_first ? 1 : 0) + lap_dirs;
  double* gtmp = grad_out;
  thread_local std::vector<double> scratch;
  if (sweeps > 1) {
    scratch.assign(static_cast<std::size_t>(f.param_count()), 0.0);
    gtmp = scratch.data();
  }

  if (need_first) {
    Pass pass;
    pass.ndir = 0;
    double cd[kMaxSpatialDim + 1] = {};
    if (req.grad) {
      for (int j = 0; j < sd; ++j) {
        pass.dirs[pass.ndir] = j;
        pass.second[pass.ndir] = false;
        cd[pass.ndir] = cot.grad[j];
        ++pass.ndir;
      }
    }
    if (req.time) {
      pass.dirs[pass.ndir] = sd;
      pass.second[pass.ndir] = false;
      cd[pass.ndir] = cot.time_deriv;
      ++pass.ndir;
    }
    pass.setup(f, x, t);
    pass.forward();
    double c2[kMaxSpatialDim + 1] = {};
    pass.backward(cot.value, cd, c2, gtmp);
  }

  // One standalone second-order sweep per traced direction (forward-mode
  // jets stay cheap because the spatial dimension is small).
  if (need_lap) {
    for (int j = req.lap_lo; j < req.lap_hi; ++j) {
      Pass pass;
      pass.ndir = 1;
      pass.dirs[0] = j;
      pass.second[0] = true;
      pass.setup(f, x, t);
      pass.forward();
      const double cd[1] = {0.0};
      const double c2[1] = {cot.lap};
      pass.backward(0.0, cd, c2, gtmp);
    }
  }

  if (sweeps > 1)
    for (Eigen::Index i = 0; i < f.param_count(); ++i) grad_out[i] += gtmp[i];
}

double eval(const ControlField& f, std::span<const double> x, double t) {
  return query(f, x, t, QueryReq{}).value;
}

void spatial_grad(const ControlField& f, std::span<const double> x, double t, std::span<double> out) {
  QueryReq req;
  req.grad = true;
  const PointEval e = query(f, x, t, req);
  for (int j = 0; j < f.spatial_dim(); ++j) out[j] = e.grad[j];
}

double laplacian(const ControlField& f, std::span<const double> x, double t) {
  QueryReq req;
  req.lap_lo = 0;
  req.lap_hi = f.spatial_dim();
  return query(f, x, t, req).lap;
}

double time_deriv(const ControlField& f, std::span<const double> x, double t) {
  QueryReq req;
  req.time = true;
  return query(f, x, t, req).time_deriv;
}

}  // namespace sbs::nd
