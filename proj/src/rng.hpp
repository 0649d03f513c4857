#pragma once

#include <array>
#include <cstdint>
#include <span>

namespace sbs {

// Philox4x32-10 counter-based generator.  Every draw is addressed by
// (seed, stream, epoch, item, step): identical addresses give identical
// values no matter how work is scheduled across threads.
struct Philox {
  static std::array<std::uint32_t, 4> block(std::uint64_t key, std::uint32_t c0, std::uint32_t c1,
                                            std::uint32_t c2, std::uint32_t c3);
};

// Stream ids keep independent uses of the same run seed apart.
enum class RngStream : std::uint32_t {
  prior_draw = 1,
  path_noise = 2,
  ref_path_noise = 3,
  param_init = 4,
  pretrain = 5,
  eval = 6,
  phase_noise = 7,
  phase_prior = 8,
  test = 100,
};

class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  // Uniform doubles in (0,1), up to 4 per counter block.
  void uniforms(RngStream stream, std::uint32_t epoch, std::uint32_t item, std::uint32_t step,
                std::span<double> out) const;

  // Standard normals via Box-Muller on consecutive uniform pairs.
  void normals(RngStream stream, std::uint32_t epoch, std::uint32_t item, std::uint32_t step,
               std::span<double> out) const;

  double normal(RngStream stream, std::uint32_t epoch, std::uint32_t item, std::uint32_t step) const {
    double z;
    normals(stream, epoch, item, step, {&z, 1});
    return z;
  }

 private:
  std::uint64_t seed_;
};

}  // namespace sbs
