#include "nd/field.hpp"

#include <cstring>
#include <fstream>

#include "common.hpp"
#include "rng.hpp"

namespace sbs::nd {

namespace {
constexpr char kMagic[8] = {'S', 'B', 'S', 'F', 'L', 'D', '0', '1'};
}

ControlField::ControlField(int input_dim, int hidden_dim, int depth, Act act)
    : input_dim_(input_dim), hidden_dim_(hidden_dim), depth_(depth), act_(act) {
  if (input_dim < 2 || hidden_dim < 1 || depth < 0)
    fail(Errc::config, "ControlField: input_dim >= 2, hidden_dim >= 1, depth >= 0 required");
  params_ = Eigen::VectorXd::Zero(off_b_out() + 1);
}

void ControlField::init_params(std::uint64_t seed) {
  CounterRng rng(seed);
  auto fill_uniform = [&](Eigen::Index off, Eigen::Index count, double scale, std::uint32_t tag) {
    std::uint32_t item = 0;
    Eigen::Index i = 0;
    while (i < count) {
      double u[4];
      const Eigen::Index take = std::min<Eigen::Index>(4, count - i);
      rng.uniforms(RngStream::param_init, tag, item++, 0, {u, static_cast<std::size_t>(take)});
      for (Eigen::Index j = 0; j < take; ++j) params_[off + i + j] = scale * (2.0 * u[j] - 1.0);
      i += take;
    }
  };
  params_.setZero();
  fill_uniform(off_w_in(), static_cast<Eigen::Index>(hidden_dim_) * input_dim_,
               1.0 / std::sqrt(static_cast<double>(input_dim_)), 0);
  for (int l = 0; l < depth_; ++l) {
    fill_uniform(off_layer_w(l), static_cast<Eigen::Index>(hidden_dim_) * hidden_dim_,
                 1.0 / std::sqrt(static_cast<double>(hidden_dim_)), 1 + static_cast<std::uint32_t>(l));
  }
  // w_out, b_out and all biases stay zero.
}

void ControlField::save(const std::filesystem::path& file) const {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io, "cannot open checkpoint for writing: " + file.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t header[4] = {static_cast<std::uint32_t>(input_dim_), static_cast<std::uint32_t>(hidden_dim_),
                                   static_cast<std::uint32_t>(depth_), static_cast<std::uint32_t>(act_)};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  const std::uint64_t count = static_cast<std::uint64_t>(params_.size());
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  out.write(reinterpret_cast<const char*>(params_.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!out) fail(Errc::io, "short write on checkpoint: " + file.string());
}

ControlField ControlField::load(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) fail(Errc::io, "cannot open checkpoint: " + file.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    fail(Errc::io, "bad checkpoint magic: " + file.string());
  std::uint32_t header[4];
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (!in) fail(Errc::io, "truncated checkpoint header: " + file.string());
  if (header[3] > 1) fail(Errc::io, "unknown activation id in checkpoint");
  ControlField f(static_cast<int>(header[0]), static_cast<int>(header[1]), static_cast<int>(header[2]),
                 static_cast<Act>(header[3]));
  std::uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof(count));
  if (!in || count != static_cast<std::uint64_t>(f.params_.size()))
    fail(Errc::io, "checkpoint parameter count mismatch: " + file.string());
  in.read(reinterpret_cast<char*>(f.params_.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) fail(Errc::io, "truncated checkpoint blob: " + file.string());
  return f;
}

}  // namespace sbs::nd
