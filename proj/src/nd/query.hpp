#pragma once

#include <atomic>
#include <cstdint>
#include <span>

#include "nd/field.hpp"

namespace sbs::nd {

inline constexpr int kMaxSpatialDim = 8;

// Which derivative aspects a point query must produce.  Spatial gradient
// covers input coordinates [0, spatial_dim); the time derivative is the last
// input; the Laplacian is the Hessian trace over input coordinates
// [lap_lo, lap_hi) (a sub-block, so phase-space fields can ask for the
// velocity-block trace only).
struct QueryReq {
  bool grad = false;
  bool time = false;
  int lap_lo = 0;
  int lap_hi = 0;
  bool want_lap() const { return lap_hi > lap_lo; }
};

struct PointEval {
  double value = 0.0;
  double grad[kMaxSpatialDim] = {};
  double time_deriv = 0.0;
  double lap = 0.0;
};

struct PointCotangent {
  double value = 0.0;
  double grad[kMaxSpatialDim] = {};
  double time_deriv = 0.0;
  double lap = 0.0;
};

// Process-wide instrumentation; cheap relaxed atomics.
struct QueryCounters {
  std::atomic<std::uint64_t> queries{0};
  std::atomic<std::uint64_t> grad_queries{0};
  std::atomic<std::uint64_t> lap_queries{0};
  std::atomic<std::uint64_t> pullbacks{0};
  void reset() {
    queries = 0;
    grad_queries = 0;
    lap_queries = 0;
    pullbacks = 0;
  }
};
QueryCounters& query_counters();

// Forward evaluation of the requested aspects at one point.  Derivatives are
// exact for the network function: first-order tangents are propagated in
// forward mode through the layers, one channel per input direction, and the
// Laplacian adds a second-order channel per traced direction.
PointEval query(const ControlField& f, std::span<const double> x, double t, const QueryReq& req);

// Accumulates d<cot, query(f,x,t)>/dparams into grad_out (length
// f.param_count()).  Reverse accumulation runs over the recorded
// forward-mode channels; each Laplacian direction is handled by its own
// second-order sweep.
void query_pullback(const ControlField& f, std::span<const double> x, double t, const QueryReq& req,
                    const PointCotangent& cot, double* grad_out);

// Spec-facing conveniences.
double eval(const ControlField& f, std::span<const double> x, double t);
void spatial_grad(const ControlField& f, std::span<const double> x, double t, std::span<double> out);
double laplacian(const ControlField& f, std::span<const double> x, double t);
double time_deriv(const ControlField& f, std::span<const double> x, double t);

}  // namespace sbs::nd
