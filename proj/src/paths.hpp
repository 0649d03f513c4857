#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "nd/potential.hpp"
#include "targets.hpp"

namespace sbs {

// Discretization: states x_0 .. x_{K+1}, K+1 increments of size h = c/(K+1).
struct SdeConfig {
  double sigma = 1.0;
  int K = 64;
  double c = 1.0;  // horizon T = c
  std::size_t n = 512;
  std::uint64_t seed = 1;

  double h() const { return c / static_cast<double>(K + 1); }
  void validate() const;
};

class TrajectoryBatch {
 public:
  TrajectoryBatch(const SdeConfig& cfg, int dim, bool controlled);

  const SdeConfig& config() const { return cfg_; }
  int dim() const { return dim_; }
  std::size_t n() const { return cfg_.n; }
  int steps() const { return cfg_.K + 1; }  // number of increments
  bool controlled() const { return controlled_; }

  std::span<const double> state(std::size_t i, int k) const {
    return {states_.data() + (i * (cfg_.K + 2) + k) * dim_, static_cast<std::size_t>(dim_)};
  }
  std::span<double> state(std::size_t i, int k) {
    return {states_.data() + (i * (cfg_.K + 2) + k) * dim_, static_cast<std::size_t>(dim_)};
  }
  std::span<const double> noise(std::size_t i, int k) const {
    return {noises_.data() + (i * (cfg_.K + 1) + k) * dim_, static_cast<std::size_t>(dim_)};
  }
  std::span<double> noise(std::size_t i, int k) {
    return {noises_.data() + (i * (cfg_.K + 1) + k) * dim_, static_cast<std::size_t>(dim_)};
  }
  std::span<const double> drift(std::size_t i, int k) const {
    return {drifts_.data() + (i * (cfg_.K + 1) + k) * dim_, static_cast<std::size_t>(dim_)};
  }
  std::span<double> drift(std::size_t i, int k) {
    return {drifts_.data() + (i * (cfg_.K + 1) + k) * dim_, static_cast<std::size_t>(dim_)};
  }

  // Binary dump with (n, K, d, sigma, h, seed) header; bit-exact round trip.
  void dump(const std::filesystem::path& file) const;
  static TrajectoryBatch load(const std::filesystem::path& file);

 private:
  SdeConfig cfg_;
  int dim_;
  bool controlled_;
  std::vector<double> states_;
  std::vector<double> noises_;
  std::vector<double> drifts_;  // recorded drift evaluations (controlled only)
};

// One Euler-Maruyama update coordinate; shared by the simulator and the
// reconstruction check so replay is bit-exact.
inline double em_update(double x, double drift_coef, double drift, double noise_coef, double noise) {
  return x + drift_coef * drift + noise_coef * noise;
}

// x_{k+1} = x_k + sigma^2 h grad_phi(x_k, kh) + sigma sqrt(h) z_k, x_0 ~ prior.
// Noise draws are addressed by (seed, stream, epoch, trajectory, step);
// results do not depend on worker count.
TrajectoryBatch simulate_controlled(const nd::Potential& phi, const PriorSpec& prior, const SdeConfig& cfg,
                                    std::uint32_t epoch = 0, int workers = 0,
                                    RngStream stream = RngStream::path_noise);

// Zero-drift reference chain, noises cached for regularizer reuse.
TrajectoryBatch simulate_reference(const PriorSpec& prior, const SdeConfig& cfg, std::uint32_t epoch = 0,
                                   int workers = 0, RngStream stream = RngStream::ref_path_noise);

}  // namespace sbs
