#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "nd/potential.hpp"

namespace sbs::nd {

// Collects parameter gradients for the (at most few) trainable potentials a
// loss touches.  Buffers are dense, indexed by registration order.
class ParamGradAccum {
 public:
  // Registers a potential (idempotent); non-trainable ones are ignored.
  void track(const Potential* p);
  double* buffer_for(const Potential* p);  // nullptr if untracked / untrainable
  const std::vector<double>* find(const Potential* p) const;
  void clear_values();
  void add_scaled(const ParamGradAccum& other, double scale);

  struct Slot {
    const Potential* pot;
    std::vector<double> grad;
  };
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  std::vector<Slot> slots_;
};

// A recorded scalar computation whose leaves are potential queries.  Interior
// nodes are ordinary arithmetic; reverse accumulation propagates cotangents
// to the query leaves and hands them to each potential's pullback.
class Graph {
 public:
  using Var = std::int32_t;

  struct QueryVars {
    Var value = -1;
    Var grad[kMaxSpatialDim];
    Var time_deriv = -1;
    Var lap = -1;
  };

  Var constant(double v);
  QueryVars query(const Potential& pot, std::span<const double> x, double t, const QueryReq& req);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var neg(Var a);
  Var square(Var a);
  Var abs(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var sqrt(Var a);
  Var add_const(Var a, double c);
  Var mul_const(Var a, double c);

  double value(Var v) const { return nodes_[static_cast<std::size_t>(v)].val; }
  std::size_t size() const { return nodes_.size(); }

  // Reverse accumulation from the seeded roots; parameter gradients of every
  // trainable potential encountered are accumulated into `accum`.
  // Throws a numeric error naming the first non-finite node, if any.
  void backward(std::span<const std::pair<Var, double>> seeds, ParamGradAccum& accum) const;

 private:
  enum class Op : std::uint8_t {
    kConst,
    kQueryValue,
    kQueryGrad,
    kQueryTime,
    kQueryLap,
    kAdd,
    kSub,
    kMul,
    kDiv,
    kNeg,
    kSquare,
    kAbs,
    kExp,
    kLog,
    kSqrt,
    kAddConst,
    kMulConst,
  };
  struct Node {
    Op op;
    std::int32_t a = -1;
    std::int32_t b = -1;  // second operand, query record id, or grad component
    double val = 0.0;
    double aux = 0.0;  // constant operand
  };
  struct QueryRec {
    const Potential* pot;
    double x[kMaxSpatialDim];
    int xdim;
    double t;
    QueryReq req;
  };

  Var push(Node n);
  static const char* op_name(Op op);

  std::vector<Node> nodes_;
  std::vector<QueryRec> queries_;
};

}  // namespace sbs::nd
