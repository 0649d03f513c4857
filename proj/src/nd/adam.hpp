#pragma once

#include <Eigen/Core>

namespace sbs::nd {

// Decoupled-weight-decay Adam with bias-corrected moments.  Defaults follow
// the training protocol used throughout: beta1 0.9, beta2 0.999, weight
// decay 0.01; epsilon is fixed at 1e-8 (documented constant).
struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double eps = 1e-8;
};

class AdamState {
 public:
  AdamState(Eigen::Index n, const AdamConfig& cfg = {});

  // params <- params - lr * (m_hat / (sqrt(v_hat) + eps) + wd * params)
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);

  long step_count() const { return step_count_; }
  const AdamConfig& config() const { return cfg_; }
  const Eigen::VectorXd& first_moment() const { return m_; }
  const Eigen::VectorXd& second_moment() const { return v_; }

 private:
  AdamConfig cfg_;
  Eigen::VectorXd m_;
  Eigen::VectorXd v_;
  long step_count_ = 0;
};

}  // namespace sbs::nd
