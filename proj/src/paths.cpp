#include "paths.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "common.hpp"

namespace sbs {

namespace {
constexpr char kMagic[8] = {'S', 'B', 'S', 'T', 'R', 'J', '0', '1'};
}

void SdeConfig::validate() const {
  if (sigma <= 0 || c < 1.0 || K < 0 || n < 1) fail(Errc::config, "SdeConfig: need sigma > 0, c >= 1, K >= 0, n >= 1");
}

TrajectoryBatch::TrajectoryBatch(const SdeConfig& cfg, int dim, bool controlled)
    : cfg_(cfg), dim_(dim), controlled_(controlled) {
  states_.assign(cfg.n * (cfg.K + 2) * dim, 0.0);
  noises_.assign(cfg.n * (cfg.K + 1) * dim, 0.0);
  if (controlled) drifts_.assign(cfg.n * (cfg.K + 1) * dim, 0.0);
}

namespace {

// One trajectory, shared by controlled and reference paths (phi == nullptr
// for the reference).  The update is written exactly as the reconstruction
// check replays it.
void run_one(TrajectoryBatch& batch, const nd::Potential* phi, const PriorSpec& prior, const CounterRng& rng,
             RngStream stream, std::uint32_t epoch, std::size_t i) {
  const SdeConfig& cfg = batch.config();
  const int d = batch.dim();
  const double h = cfg.h();
  const double sig2h = cfg.sigma * cfg.sigma * h;
  const double sig_sqrt_h = cfg.sigma * std::sqrt(h);

  double draw[nd::kMaxSpatialDim];
  rng.normals(RngStream::prior_draw, epoch, static_cast<std::uint32_t>(i), 0, {draw, static_cast<std::size_t>(d)});
  auto x0 = batch.state(i, 0);
  for (int j = 0; j < d; ++j) x0[j] = prior.mean[j] + prior.stddev * draw[j];

  nd::QueryReq req;
  req.grad = true;
  for (int k = 0; k <= cfg.K; ++k) {
    auto xk = batch.state(i, k);
    auto zk = batch.noise(i, k);
    rng.normals(stream, epoch, static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(k + 1),
                {zk.data(), static_cast<std::size_t>(d)});
    auto xn = batch.state(i, k + 1);
    if (phi) {
      const nd::PointEval e = phi->query(xk, k * h, req);
      auto dr = batch.drift(i, k);
      for (int j = 0; j < d; ++j) dr[j] = e.grad[j];
      for (int j = 0; j < d; ++j) xn[j] = em_update(xk[j], sig2h, e.grad[j], sig_sqrt_h, zk[j]);
    } else {
      for (int j = 0; j < d; ++j) xn[j] = em_update(xk[j], 0.0, 0.0, sig_sqrt_h, zk[j]);
    }
    for (int j = 0; j < d; ++j) {
      if (!std::isfinite(xn[j]))
        fail(Errc::divergence, "simulation diverged at trajectory " + std::to_string(i) + ", step " +
                                   std::to_string(k));
    }
  }
}

}  // namespace

TrajectoryBatch simulate_controlled(const nd::Potential& phi, const PriorSpec& prior, const SdeConfig& cfg,
                                    std::uint32_t epoch, int workers, RngStream stream) {
  cfg.validate();
  if (phi.spatial_dim() != prior.dim) fail(Errc::misuse, "simulate_controlled: control dimension mismatch");
  TrajectoryBatch batch(cfg, prior.dim, true);
  CounterRng rng(cfg.seed);
  parallel_blocks(cfg.n, [&](std::size_t, std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) run_one(batch, &phi, prior, rng, stream, epoch, i);
  }, workers);
  return batch;
}

TrajectoryBatch simulate_reference(const PriorSpec& prior, const SdeConfig& cfg, std::uint32_t epoch, int workers,
                                   RngStream stream) {
  cfg.validate();
  TrajectoryBatch batch(cfg, prior.dim, false);
  CounterRng rng(cfg.seed);
  parallel_blocks(cfg.n, [&](std::size_t, std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) run_one(batch, nullptr, prior, rng, stream, epoch, i);
  }, workers);
  return batch;
}

void TrajectoryBatch::dump(const std::filesystem::path& file) const {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io, "cannot open trajectory dump: " + file.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t n64 = cfg_.n;
  const std::uint32_t k32 = static_cast<std::uint32_t>(cfg_.K);
  const std::uint32_t d32 = static_cast<std::uint32_t>(dim_);
  const std::uint32_t ctl = controlled_ ? 1u : 0u;
  const double h = cfg_.h();
  out.write(reinterpret_cast<const char*>(&n64), sizeof(n64));
  out.write(reinterpret_cast<const char*>(&k32), sizeof(k32));
  out.write(reinterpret_cast<const char*>(&d32), sizeof(d32));
  out.write(reinterpret_cast<const char*>(&cfg_.sigma), sizeof(double));
  out.write(reinterpret_cast<const char*>(&h), sizeof(double));
  out.write(reinterpret_cast<const char*>(&cfg_.seed), sizeof(std::uint64_t));
  out.write(reinterpret_cast<const char*>(&ctl), sizeof(ctl));
  auto blob = [&](const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  };
  blob(states_);
  blob(noises_);
  if (controlled_) blob(drifts_);
  if (!out) fail(Errc::io, "short write on trajectory dump");
}

TrajectoryBatch TrajectoryBatch::load(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) fail(Errc::io, "cannot open trajectory dump: " + file.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) fail(Errc::io, "bad trajectory dump magic");
  std::uint64_t n64;
  std::uint32_t k32, d32, ctl;
  double sigma, h;
  std::uint64_t seed;
  in.read(reinterpret_cast<char*>(&n64), sizeof(n64));
  in.read(reinterpret_cast<char*>(&k32), sizeof(k32));
  in.read(reinterpret_cast<char*>(&d32), sizeof(d32));
  in.read(reinterpret_cast<char*>(&sigma), sizeof(double));
  in.read(reinterpret_cast<char*>(&h), sizeof(double));
  in.read(reinterpret_cast<char*>(&seed), sizeof(seed));
  in.read(reinterpret_cast<char*>(&ctl), sizeof(ctl));
  if (!in) fail(Errc::io, "truncated trajectory dump header");
  SdeConfig cfg;
  cfg.n = n64;
  cfg.K = static_cast<int>(k32);
  cfg.sigma = sigma;
  cfg.c = h * (k32 + 1);
  cfg.seed = seed;
  TrajectoryBatch batch(cfg, static_cast<int>(d32), ctl != 0);
  auto blob = [&](std::vector<double>& v) {
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  };
  blob(batch.states_);
  blob(batch.noises_);
  if (ctl != 0) blob(batch.drifts_);
  if (!in) fail(Errc::io, "truncated trajectory dump blob");
  return batch;
}

}  // namespace sbs
