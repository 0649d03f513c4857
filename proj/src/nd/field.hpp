#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <string>

#include "nd/activation.hpp"

namespace sbs::nd {

// Scalar potential phi(x, t) realized as a residual MLP.  The first linear
// map lifts (x, t) in R^{d+1} to the hidden width; each residual layer maps
// the hidden state s to act(W s + b) + s; a final linear map yields the
// scalar.  Parameters live in one flat vector:
//
//   [ W_in (H x m, row major) | b_in (H) |
//     for each layer: W (H x H, row major) | b (H) |
//     w_out (H) | b_out ]
//
// with m = input_dim = spatial dim + 1 (time is the last input).
class ControlField {
 public:
  ControlField(int input_dim, int hidden_dim, int depth, Act act);

  // Fan-in scaled uniform init, U(-1/sqrt(fan_in), +1/sqrt(fan_in)) for the
  // weight matrices, zero biases; the output layer starts at zero so the
  // field is identically zero until trained.
  void init_params(std::uint64_t seed);

  int input_dim() const { return input_dim_; }
  int spatial_dim() const { return input_dim_ - 1; }
  int hidden_dim() const { return hidden_dim_; }
  int depth() const { return depth_; }
  Act activation() const { return act_; }
  void set_activation(Act a) { act_ = a; }

  Eigen::VectorXd& params() { return params_; }
  const Eigen::VectorXd& params() const { return params_; }
  Eigen::Index param_count() const { return params_.size(); }

  // Flat-vector offsets (row-major matrices).
  Eigen::Index off_w_in() const { return 0; }
  Eigen::Index off_b_in() const { return static_cast<Eigen::Index>(hidden_dim_) * input_dim_; }
  Eigen::Index off_layer_w(int l) const {
    return off_b_in() + hidden_dim_ + static_cast<Eigen::Index>(l) * (static_cast<Eigen::Index>(hidden_dim_) * hidden_dim_ + hidden_dim_);
  }
  Eigen::Index off_layer_b(int l) const { return off_layer_w(l) + static_cast<Eigen::Index>(hidden_dim_) * hidden_dim_; }
  Eigen::Index off_w_out() const { return off_layer_w(depth_); }
  Eigen::Index off_b_out() const { return off_w_out() + hidden_dim_; }

  // Binary checkpoint: little-endian header + float64 parameter blob,
  // bit-exact round trip.
  void save(const std::filesystem::path& file) const;
  static ControlField load(const std::filesystem::path& file);

 private:
  int input_dim_;
  int hidden_dim_;
  int depth_;
  Act act_;
  Eigen::VectorXd params_;
};

}  // namespace sbs::nd
