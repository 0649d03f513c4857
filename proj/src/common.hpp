#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace sbs {

enum class Errc {
  domain,       // non-finite or otherwise invalid numeric input
  numeric,      // non-finite value produced during computation
  config,       // bad configuration / unknown name
  misuse,       // API contract violated (wrong batch kind, missing cache, ...)
  degenerate,   // batch too small / all weights zero
  divergence,   // SDE state blew up
  estimator,    // estimator cannot be formed
  convergence,  // iteration limit hit
  io,           // file format / filesystem
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) { throw Error(code, msg); }

inline void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) fail(Errc::domain, std::string("non-finite input: ") + what);
}

// ---------------------------------------------------------------------------
// Deterministic parallelism.
//
// Work over an index range is split into fixed-size blocks; each block is
// processed sequentially by whichever thread picks it up, and any accumulation
// happens into per-block slots that the caller reduces in block order.  The
// result is bit-identical for any worker count.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kBlockSize = 64;

inline int default_workers() {
  if (const char* env = std::getenv("SBS_THREADS")) {
    int v = std::atoi(env);
    if (v > 0) return v;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

inline std::size_t block_count(std::size_t n, std::size_t block = kBlockSize) {
  return (n + block - 1) / block;
}

// fn(block_index, begin, end)
inline void parallel_blocks(std::size_t n, const std::function<void(std::size_t, std::size_t, std::size_t)>& fn,
                            int workers = 0, std::size_t block = kBlockSize) {
  const std::size_t nb = block_count(n, block);
  if (nb == 0) return;
  if (workers <= 0) workers = default_workers();
  const int nthreads = static_cast<int>(std::min<std::size_t>(nb, static_cast<std::size_t>(workers)));
  if (nthreads <= 1) {
    for (std::size_t b = 0; b < nb; ++b) fn(b, b * block, std::min(n, (b + 1) * block));
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr eptr;
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (;;) {
      std::size_t b = next.fetch_add(1);
      if (b >= nb || failed.load()) return;
      try {
        fn(b, b * block, std::min(n, (b + 1) * block));
      } catch (...) {
        if (!failed.exchange(true)) eptr = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(nthreads);
  for (int i = 0; i < nthreads; ++i) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (failed.load() && eptr) std::rethrow_exception(eptr);
}

// Ordered (block-chain) reduction of per-block partial sums.
inline double reduce_ordered(std::span<const double> per_block) {
  double s = 0.0;
  for (double v : per_block) s += v;
  return s;
}

// Population mean and variance (1/n) with a fixed two-pass block reduction.
struct MeanVar {
  double mean = 0.0;
  double var = 0.0;
};

inline MeanVar mean_var(std::span<const double> xs, int workers = 0) {
  const std::size_t n = xs.size();
  if (n == 0) fail(Errc::degenerate, "mean_var: empty sample");
  const std::size_t nb = block_count(n);
  std::vector<double> partial(nb, 0.0);
  parallel_blocks(n, [&](std::size_t b, std::size_t lo, std::size_t hi) {
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += xs[i];
    partial[b] = s;
  }, workers);
  MeanVar mv;
  mv.mean = reduce_ordered(partial) / static_cast<double>(n);
  parallel_blocks(n, [&](std::size_t b, std::size_t lo, std::size_t hi) {
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) {
      const double c = xs[i] - mv.mean;
      s += c * c;
    }
    partial[b] = s;
  }, workers);
  mv.var = reduce_ordered(partial) / static_cast<double>(n);
  return mv;
}

}  // namespace sbs
