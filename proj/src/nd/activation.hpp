#pragma once

#include <cmath>
#include <cstdint>

namespace sbs::nd {

// Rectifier is the default unit; softplus is the C^2 option used whenever a
// loss needs Laplacians of the network (rectifier second derivatives vanish
// almost everywhere, which silently empties PDE residuals).
enum class Act : std::uint32_t { relu = 0, softplus = 1 };

struct ActDerivs {
  double a0;  // act(z)
  double a1;  // act'(z)
  double a2;  // act''(z)
  double a3;  // act'''(z)
};

inline ActDerivs act_derivs(Act act, double z) {
  ActDerivs d;
  if (act == Act::relu) {
    const double on = z > 0.0 ? 1.0 : 0.0;
    d.a0 = on * z;
    d.a1 = on;
    d.a2 = 0.0;
    d.a3 = 0.0;
    return d;
  }
  // softplus(z) = log(1 + e^z), derivatives expressed through the sigmoid
  double s;
  if (z > 0) {
    const double e = std::exp(-z);
    s = 1.0 / (1.0 + e);
    d.a0 = z + std::log1p(e);
  } else {
    const double e = std::exp(z);
    s = e / (1.0 + e);
    d.a0 = std::log1p(e);
  }
  d.a1 = s;
  d.a2 = s * (1.0 - s);
  d.a3 = d.a2 * (1.0 - 2.0 * s);
  return d;
}

}  // namespace sbs::nd
