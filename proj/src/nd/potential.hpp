#pragma once

#include <span>

#include "nd/query.hpp"

namespace sbs::nd {

// A scalar potential over (x, t) that losses and estimators can query.
// Network-backed potentials additionally support parameter pullback; closed
// form oracles and hand-set test fields just evaluate.  The non-virtual
// query() front door feeds the instrumentation counters, so Laplacian usage
// is observable no matter which potential backs a loss.
class Potential {
 public:
  virtual ~Potential() = default;
  virtual int spatial_dim() const = 0;

  PointEval query(std::span<const double> x, double t, const QueryReq& req) const {
    auto& qc = query_counters();
    qc.queries.fetch_add(1, std::memory_order_relaxed);
    if (req.grad) qc.grad_queries.fetch_add(1, std::memory_order_relaxed);
    if (req.want_lap()) qc.lap_queries.fetch_add(1, std::memory_order_relaxed);
    return do_query(x, t, req);
  }

  virtual bool trainable() const { return false; }
  virtual Eigen::Index param_count() const { return 0; }
  virtual void pullback(std::span<const double> x, double t, const QueryReq& req, const PointCotangent& cot,
                        double* grad_out) const {
    (void)x;
    (void)t;
    (void)req;
    (void)cot;
    (void)grad_out;
  }

 protected:
  virtual PointEval do_query(std::span<const double> x, double t, const QueryReq& req) const = 0;
};

class NetworkPotential final : public Potential {
 public:
  explicit NetworkPotential(ControlField& field) : field_(&field) {}

  int spatial_dim() const override { return field_->spatial_dim(); }
  bool trainable() const override { return true; }
  Eigen::Index param_count() const override { return field_->param_count(); }
  void pullback(std::span<const double> x, double t, const QueryReq& req, const PointCotangent& cot,
                double* grad_out) const override {
    query_pullback(*field_, x, t, req, cot, grad_out);
  }

  ControlField& field() { return *field_; }
  const ControlField& field() const { return *field_; }

 protected:
  PointEval do_query(std::span<const double> x, double t, const QueryReq& req) const override {
    return nd::query(*field_, x, t, req);
  }

 private:
  ControlField* field_;
};

}  // namespace sbs::nd
