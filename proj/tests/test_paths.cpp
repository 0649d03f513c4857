#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "common.hpp"
#include "paths.hpp"
#include "support.hpp"

using namespace sbs;

namespace {

PriorSpec gaussian_prior(double stddev) {
  PriorSpec p;
  p.dim = 2;
  p.mean = {0.0, 0.0};
  p.stddev = stddev;
  return p;
}

}  // namespace

TEST_CASE("zero control equals the reference chain on the same stream") {
  const auto prior = gaussian_prior(std::sqrt(2.0));
  SdeConfig cfg;
  cfg.K = 16;
  cfg.n = 64;
  cfg.seed = 9;
  test::ConstantPotential zero(2, 0.0);
  const auto controlled = simulate_controlled(zero, prior, cfg, 0, 0, RngStream::path_noise);
  const auto reference = simulate_reference(prior, cfg, 0, 0, RngStream::path_noise);
  for (std::size_t i = 0; i < cfg.n; ++i)
    for (int k = 0; k <= cfg.K + 1; ++k)
      for (int j = 0; j < 2; ++j) CHECK(controlled.state(i, k)[j] == reference.state(i, k)[j]);
}

TEST_CASE("terminal variance accumulates a^2 + sigma^2 c under zero control") {
  const double a = std::sqrt(2.0);
  const auto prior = gaussian_prior(a);
  SdeConfig cfg;
  cfg.K = 32;
  cfg.n = 100000;
  cfg.seed = 4;
  test::ConstantPotential zero(2, 0.0);
  const auto batch = simulate_controlled(zero, prior, cfg);
  for (int k : {1, cfg.K + 1}) {
    double sq = 0.0;
    for (std::size_t i = 0; i < cfg.n; ++i) sq += batch.state(i, k)[0] * batch.state(i, k)[0];
    const double want = a * a + cfg.sigma * cfg.sigma * k * cfg.h();
    CHECK(sq / cfg.n == doctest::Approx(want).epsilon(0.02));
  }
}

TEST_CASE("fixed seed gives bit-identical batches, independent of worker count") {
  const auto prior = gaussian_prior(1.0);
  SdeConfig cfg;
  cfg.K = 8;
  cfg.n = 200;
  cfg.seed = 123;
  test::QuadraticPotential quad(2, -0.5, {0.1, -0.2}, 0.0);
  const auto b1 = simulate_controlled(quad, prior, cfg, 3, 1);
  const auto b2 = simulate_controlled(quad, prior, cfg, 3, 2);
  const auto b3 = simulate_controlled(quad, prior, cfg, 3, 0);
  for (std::size_t i = 0; i < cfg.n; ++i)
    for (int k = 0; k <= cfg.K + 1; ++k)
      for (int j = 0; j < 2; ++j) {
        CHECK(b1.state(i, k)[j] == b2.state(i, k)[j]);
        CHECK(b1.state(i, k)[j] == b3.state(i, k)[j]);
      }
}

TEST_CASE("reference increments have stddev sigma sqrt(h)") {
  const auto prior = gaussian_prior(1.0);
  SdeConfig cfg;
  cfg.K = 99;
  cfg.n = 10000;
  cfg.seed = 77;
  const auto batch = simulate_reference(prior, cfg);
  double sq = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < cfg.n; ++i)
    for (int k = 0; k <= cfg.K; ++k)
      for (int j = 0; j < 2; ++j) {
        const double inc = batch.state(i, k + 1)[j] - batch.state(i, k)[j];
        sq += inc * inc;
        ++count;
      }
  CHECK(count >= 1000000);
  CHECK(std::sqrt(sq / count) == doctest::Approx(cfg.sigma * std::sqrt(cfg.h())).epsilon(0.01));
}

TEST_CASE("martingale property of the cached noises") {
  const auto prior = gaussian_prior(1.0);
  SdeConfig cfg;
  cfg.K = 31;
  cfg.n = 50000;
  cfg.seed = 13;
  const auto batch = simulate_reference(prior, cfg);
  // bounded integrand a(y) = tanh(y), forward-evaluated at the left endpoint
  double sum = 0.0, sumsq = 0.0;
  for (std::size_t i = 0; i < cfg.n; ++i) {
    double s = 0.0;
    for (int k = 0; k <= cfg.K; ++k)
      for (int j = 0; j < 2; ++j) s += std::tanh(batch.state(i, k)[j]) * batch.noise(i, k)[j];
    sum += s;
    sumsq += s * s;
  }
  const double mean = sum / cfg.n;
  const double se = std::sqrt((sumsq / cfg.n - mean * mean) / cfg.n);
  CHECK(std::abs(mean) < 5.0 * se);
}

TEST_CASE("stored trajectories replay their own update equation bit-exactly") {
  const auto prior = gaussian_prior(1.3);
  SdeConfig cfg;
  cfg.K = 12;
  cfg.n = 50;
  cfg.seed = 21;
  test::QuadraticPotential quad(2, -0.4, {0.0, 0.3}, 0.0);
  const auto batch = simulate_controlled(quad, prior, cfg);
  const double sig2h = cfg.sigma * cfg.sigma * cfg.h();
  const double sig_sqrt_h = cfg.sigma * std::sqrt(cfg.h());
  for (std::size_t i = 0; i < cfg.n; ++i)
    for (int k = 0; k <= cfg.K; ++k)
      for (int j = 0; j < 2; ++j) {
        const double replay =
            em_update(batch.state(i, k)[j], sig2h, batch.drift(i, k)[j], sig_sqrt_h, batch.noise(i, k)[j]);
        CHECK(batch.state(i, k + 1)[j] == replay);
      }
}

TEST_CASE("noise empirical mean is small") {
  const auto prior = gaussian_prior(1.0);
  SdeConfig cfg;
  cfg.K = 63;
  cfg.n = 4096;
  cfg.seed = 5;
  const auto batch = simulate_reference(prior, cfg);
  for (int j = 0; j < 2; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < cfg.n; ++i)
      for (int k = 0; k <= cfg.K; ++k) s += batch.noise(i, k)[j];
    const double n_total = static_cast<double>(cfg.n) * (cfg.K + 1);
    CHECK(std::abs(s / n_total) < 5.0 / std::sqrt(n_total));
  }
}

TEST_CASE("divergence raises an error naming trajectory and step") {
  const auto prior = gaussian_prior(1.0);
  SdeConfig cfg;
  cfg.K = 4;
  cfg.n = 3;
  cfg.seed = 2;
  test::QuadraticPotential huge(2, 1e120, {1.0, 1.0}, 0.0);
  try {
    simulate_controlled(huge, prior, cfg);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::divergence);
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("trajectory dump round trip is bit exact") {
  const auto prior = gaussian_prior(0.8);
  SdeConfig cfg;
  cfg.K = 7;
  cfg.n = 20;
  cfg.seed = 3;
  test::QuadraticPotential quad(2, -0.2, {0.0, 0.0}, 0.0);
  const auto batch = simulate_controlled(quad, prior, cfg);
  const auto path = std::filesystem::temp_directory_path() / "sbs_test_traj.bin";
  batch.dump(path);
  const auto loaded = TrajectoryBatch::load(path);
  CHECK(loaded.n() == batch.n());
  CHECK(loaded.dim() == batch.dim());
  CHECK(loaded.config().K == batch.config().K);
  CHECK(loaded.config().seed == batch.config().seed);
  CHECK(loaded.controlled());
  for (std::size_t i = 0; i < cfg.n; ++i) {
    for (int k = 0; k <= cfg.K + 1; ++k)
      for (int j = 0; j < 2; ++j) CHECK(loaded.state(i, k)[j] == batch.state(i, k)[j]);
    for (int k = 0; k <= cfg.K; ++k)
      for (int j = 0; j < 2; ++j) {
        CHECK(loaded.noise(i, k)[j] == batch.noise(i, k)[j]);
        CHECK(loaded.drift(i, k)[j] == batch.drift(i, k)[j]);
      }
  }
  std::filesystem::remove(path);
}

TEST_CASE("config validation") {
  SdeConfig cfg;
  cfg.c = 0.5;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.c = 1.0;
  cfg.sigma = -1.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}
