#include "nd/graph.hpp"

#include <cmath>
#include <string>

#include "common.hpp"

namespace sbs::nd {

void ParamGradAccum::track(const Potential* p) {
  if (!p->trainable()) return;
  for (const auto& s : slots_)
    if (s.pot == p) return;
  slots_.push_back({p, std::vector<double>(static_cast<std::size_t>(p->param_count()), 0.0)});
}

double* ParamGradAccum::buffer_for(const Potential* p) {
  for (auto& s : slots_)
    if (s.pot == p) return s.grad.data();
  return nullptr;
}

const std::vector<double>* ParamGradAccum::find(const Potential* p) const {
  for (const auto& s : slots_)
    if (s.pot == p) return &s.grad;
  return nullptr;
}

void ParamGradAccum::clear_values() {
  for (auto& s : slots_) std::fill(s.grad.begin(), s.grad.end(), 0.0);
}

void ParamGradAccum::add_scaled(const ParamGradAccum& other, double scale) {
  for (const auto& os : other.slots_) {
    track(os.pot);
    double* dst = buffer_for(os.pot);
    for (std::size_t i = 0; i < os.grad.size(); ++i) dst[i] += scale * os.grad[i];
  }
}

Graph::Var Graph::push(Node n) {
  nodes_.push_back(n);
  return static_cast<Var>(nodes_.size() - 1);
}

Graph::Var Graph::constant(double v) { return push({Op::kConst, -1, -1, v, 0.0}); }

Graph::QueryVars Graph::query(const Potential& pot, std::span<const double> x, double t, const QueryReq& req) {
  QueryRec rec;
  rec.pot = &pot;
  rec.xdim = static_cast<int>(x.size());
  if (rec.xdim > kMaxSpatialDim) fail(Errc::misuse, "graph: point dimension too large");
  for (int j = 0; j < rec.xdim; ++j) rec.x[j] = x[j];
  rec.t = t;
  rec.req = req;
  const std::int32_t rid = static_cast<std::int32_t>(queries_.size());
  queries_.push_back(rec);

  const PointEval e = pot.query(x, t, req);
  QueryVars out;
  for (int j = 0; j < kMaxSpatialDim; ++j) out.grad[j] = -1;
  out.value = push({Op::kQueryValue, rid, -1, e.value, 0.0});
  if (req.grad)
    for (int j = 0; j < rec.xdim; ++j) out.grad[j] = push({Op::kQueryGrad, rid, j, e.grad[j], 0.0});
  if (req.time) out.time_deriv = push({Op::kQueryTime, rid, -1, e.time_deriv, 0.0});
  if (req.want_lap()) out.lap = push({Op::kQueryLap, rid, -1, e.lap, 0.0});
  return out;
}

Graph::Var Graph::add(Var a, Var b) { return push({Op::kAdd, a, b, value(a) + value(b), 0.0}); }
Graph::Var Graph::sub(Var a, Var b) { return push({Op::kSub, a, b, value(a) - value(b), 0.0}); }
Graph::Var Graph::mul(Var a, Var b) { return push({Op::kMul, a, b, value(a) * value(b), 0.0}); }
Graph::Var Graph::div(Var a, Var b) { return push({Op::kDiv, a, b, value(a) / value(b), 0.0}); }
Graph::Var Graph::neg(Var a) { return push({Op::kNeg, a, -1, -value(a), 0.0}); }
Graph::Var Graph::square(Var a) { return push({Op::kSquare, a, -1, value(a) * value(a), 0.0}); }
Graph::Var Graph::abs(Var a) { return push({Op::kAbs, a, -1, std::abs(value(a)), 0.0}); }
Graph::Var Graph::exp(Var a) { return push({Op::kExp, a, -1, std::exp(value(a)), 0.0}); }
Graph::Var Graph::log(Var a) { return push({Op::kLog, a, -1, std::log(value(a)), 0.0}); }
Graph::Var Graph::sqrt(Var a) { return push({Op::kSqrt, a, -1, std::sqrt(value(a)), 0.0}); }
Graph::Var Graph::add_const(Var a, double c) { return push({Op::kAddConst, a, -1, value(a) + c, c}); }
Graph::Var Graph::mul_const(Var a, double c) { return push({Op::kMulConst, a, -1, value(a) * c, c}); }

const char* Graph::op_name(Op op) {
  switch (op) {
    case Op::kConst: return "const";
    case Op::kQueryValue: return "query.value";
    case Op::kQueryGrad: return "query.grad";
    case Op::kQueryTime: return "query.time";
    case Op::kQueryLap: return "query.lap";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kNeg: return "neg";
    case Op::kSquare: return "square";
    case Op::kAbs: return "abs";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSqrt: return "sqrt";
    case Op::kAddConst: return "add_const";
    case Op::kMulConst: return "mul_const";
  }
  return "?";
}

void Graph::backward(std::span<const std::pair<Var, double>> seeds, ParamGradAccum& accum) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!std::isfinite(nodes_[i].val))
      fail(Errc::numeric, "graph: non-finite value at node " + std::to_string(i) + " (" +
                              op_name(nodes_[i].op) + ")");
  }
  std::vector<double> cot(nodes_.size(), 0.0);
  for (const auto& [root, seed] : seeds) cot[static_cast<std::size_t>(root)] = seed;

  std::vector<PointCotangent> qcot(queries_.size());

  for (std::size_t idx = nodes_.size(); idx-- > 0;) {
    const Node& n = nodes_[idx];
    const double c = cot[idx];
    if (c == 0.0) continue;
    switch (n.op) {
      case Op::kConst:
        break;
      case Op::kQueryValue:
        qcot[static_cast<std::size_t>(n.a)].value += c;
        break;
      case Op::kQueryGrad:
        qcot[static_cast<std::size_t>(n.a)].grad[n.b] += c;
        break;
      case Op::kQueryTime:
        qcot[static_cast<std::size_t>(n.a)].time_deriv += c;
        break;
      case Op::kQueryLap:
        qcot[static_cast<std::size_t>(n.a)].lap += c;
        break;
      case Op::kAdd:
        cot[static_cast<std::size_t>(n.a)] += c;
        cot[static_cast<std::size_t>(n.b)] += c;
        break;
      case Op::kSub:
        cot[static_cast<std::size_t>(n.a)] += c;
        cot[static_cast<std::size_t>(n.b)] -= c;
        break;
      case Op::kMul:
        cot[static_cast<std::size_t>(n.a)] += c * nodes_[static_cast<std::size_t>(n.b)].val;
        cot[static_cast<std::size_t>(n.b)] += c * nodes_[static_cast<std::size_t>(n.a)].val;
        break;
      case Op::kDiv: {
        const double bv = nodes_[static_cast<std::size_t>(n.b)].val;
        cot[static_cast<std::size_t>(n.a)] += c / bv;
        cot[static_cast<std::size_t>(n.b)] -= c * n.val / bv;
        break;
      }
      case Op::kNeg:
        cot[static_cast<std::size_t>(n.a)] -= c;
        break;
      case Op::kSquare:
        cot[static_cast<std::size_t>(n.a)] += c * 2.0 * nodes_[static_cast<std::size_t>(n.a)].val;
        break;
      case Op::kAbs: {
        const double av = nodes_[static_cast<std::size_t>(n.a)].val;
        cot[static_cast<std::size_t>(n.a)] += c * (av > 0.0 ? 1.0 : (av < 0.0 ? -1.0 : 0.0));
        break;
      }
      case Op::kExp:
        cot[static_cast<std::size_t>(n.a)] += c * n.val;
        break;
      case Op::kLog:
        cot[static_cast<std::size_t>(n.a)] += c / nodes_[static_cast<std::size_t>(n.a)].val;
        break;
      case Op::kSqrt:
        cot[static_cast<std::size_t>(n.a)] += c * 0.5 / n.val;
        break;
      case Op::kAddConst:
        cot[static_cast<std::size_t>(n.a)] += c;
        break;
      case Op::kMulConst:
        cot[static_cast<std::size_t>(n.a)] += c * n.aux;
        break;
    }
  }

  for (std::size_t q = 0; q < queries_.size(); ++q) {
    const QueryRec& rec = queries_[q];
    if (!rec.pot->trainable()) continue;
    accum.track(rec.pot);
    double* buf = accum.buffer_for(rec.pot);
    const PointCotangent& pc = qcot[q];
    bool live = pc.value != 0.0 || pc.time_deriv != 0.0 || pc.lap != 0.0;
    for (int j = 0; j < rec.xdim && !live; ++j) live = pc.grad[j] != 0.0;
    if (!live) continue;
    rec.pot->pullback({rec.x, static_cast<std::size_t>(rec.xdim)}, rec.t, rec.req, pc, buf);
  }
}

}  // namespace sbs::nd
