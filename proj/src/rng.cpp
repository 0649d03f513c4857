#include "rng.hpp"

#include <cmath>

#include "common.hpp"

namespace sbs {

namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

inline std::uint32_t mulhi(std::uint32_t a, std::uint32_t b) {
  return static_cast<std::uint32_t>((static_cast<std::uint64_t>(a) * b) >> 32);
}
inline std::uint32_t mullo(std::uint32_t a, std::uint32_t b) { return a * b; }

// One uniform in (0,1) from two 32-bit words (53 effective bits).
inline double to_unit(std::uint32_t hi, std::uint32_t lo) {
  const std::uint64_t bits = (static_cast<std::uint64_t>(hi) << 32) | lo;
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

}  // namespace

std::array<std::uint32_t, 4> Philox::block(std::uint64_t key, std::uint32_t c0, std::uint32_t c1,
                                           std::uint32_t c2, std::uint32_t c3) {
  std::uint32_t k0 = static_cast<std::uint32_t>(key);
  std::uint32_t k1 = static_cast<std::uint32_t>(key >> 32);
  std::uint32_t x0 = c0, x1 = c1, x2 = c2, x3 = c3;
  for (int round = 0; round < 10; ++round) {
    const std::uint32_t hi0 = mulhi(kPhiloxM0, x0);
    const std::uint32_t lo0 = mullo(kPhiloxM0, x0);
    const std::uint32_t hi1 = mulhi(kPhiloxM1, x2);
    const std::uint32_t lo1 = mullo(kPhiloxM1, x2);
    const std::uint32_t y0 = hi1 ^ x1 ^ k0;
    const std::uint32_t y1 = lo1;
    const std::uint32_t y2 = hi0 ^ x3 ^ k1;
    const std::uint32_t y3 = lo0;
    x0 = y0;
    x1 = y1;
    x2 = y2;
    x3 = y3;
    k0 += kPhiloxW0;
    k1 += kPhiloxW1;
  }
  return {x0, x1, x2, x3};
}

void CounterRng::uniforms(RngStream stream, std::uint32_t epoch, std::uint32_t item, std::uint32_t step,
                          std::span<double> out) const {
  // Each Philox block yields two 53-bit uniforms; `step` is subdivided so one
  // logical step can consume several blocks.
  const std::size_t per_block = 2;
  std::size_t produced = 0;
  std::uint32_t sub = 0;
  while (produced < out.size()) {
    const auto words = Philox::block(seed_, static_cast<std::uint32_t>(stream), epoch, item,
                                     step * 16u + sub);
    out[produced++] = to_unit(words[0], words[1]);
    if (produced < out.size()) out[produced++] = to_unit(words[2], words[3]);
    ++sub;
    if (sub >= 16u && produced < out.size()) fail(Errc::misuse, "rng: too many draws in one step");
    (void)per_block;
  }
}

void CounterRng::normals(RngStream stream, std::uint32_t epoch, std::uint32_t item, std::uint32_t step,
                         std::span<double> out) const {
  const std::size_t pairs = (out.size() + 1) / 2;
  std::size_t idx = 0;
  for (std::size_t p = 0; p < pairs; ++p) {
    double u[2];
    const auto words = Philox::block(seed_, static_cast<std::uint32_t>(stream), epoch, item,
                                     step * 16u + static_cast<std::uint32_t>(p));
    u[0] = to_unit(words[0], words[1]);
    u[1] = to_unit(words[2], words[3]);
    const double r = std::sqrt(-2.0 * std::log(u[0]));
    const double a = 2.0 * M_PI * u[1];
    out[idx++] = r * std::cos(a);
    if (idx < out.size()) out[idx++] = r * std::sin(a);
  }
}

}  // namespace sbs
