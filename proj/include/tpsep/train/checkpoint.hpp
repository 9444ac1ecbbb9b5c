#pragma once

// Binary checkpoint:
//   "TPSEP1\0" | u32 count | count x (u16 name_len | name | u8 ndim |
//   ndim x u32 dims | f32 data)
// All integers and floats little-endian. Model parameters come first in name
// order, followed by the reserved groups "cfg.", "opt." and "rng.", each in
// name order.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tpsep/diff/tensor.hpp"
#include "tpsep/net/config.hpp"
#include "tpsep/net/params.hpp"
#include "tpsep/train/adam.hpp"

namespace tpsep::train {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<char, 7> kCheckpointMagic{'T', 'P', 'S', 'E', 'P', '1', '\0'};

// Per-tensor element bound; larger products are rejected before allocation.
inline constexpr std::uint64_t kMaxCheckpointElements = std::uint64_t{1} << 32;

using NamedTensor = std::pair<std::string, diff::Tensor<float>>;

inline std::vector<char> encode_tensors(const std::vector<NamedTensor>& tensors) {
  std::vector<char> b(kCheckpointMagic.begin(), kCheckpointMagic.end());
  auto put = [&b](const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    b.insert(b.end(), c, c + n);
  };
  const auto count = static_cast<std::uint32_t>(tensors.size());
  put(&count, 4);
  for (const auto& [name, t] : tensors) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw CheckpointError("checkpoint: tensor name too long: " + name.substr(0, 32) + "...");
    }
    if (t.rank() > std::numeric_limits<std::uint8_t>::max()) {
      throw CheckpointError("checkpoint: tensor '" + name + "' has too many dimensions");
    }
    const auto len = static_cast<std::uint16_t>(name.size());
    put(&len, 2);
    put(name.data(), name.size());
    const auto nd = static_cast<std::uint8_t>(t.rank());
    put(&nd, 1);
    for (auto d : t.shape()) {
      if (d > std::numeric_limits<std::uint32_t>::max()) {
        throw CheckpointError("checkpoint: tensor '" + name + "' dimension overflow");
      }
      const auto d32 = static_cast<std::uint32_t>(d);
      put(&d32, 4);
    }
    put(t.data().data(), t.numel() * sizeof(float));
  }
  return b;
}

inline std::vector<NamedTensor> decode_tensors(const std::vector<char>& b) {
  if (b.size() < kCheckpointMagic.size() ||
      !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), b.begin())) {
    throw CheckpointError("checkpoint: bad magic");
  }
  std::size_t at = kCheckpointMagic.size();
  auto take = [&](void* dst, std::size_t n, const char* what) {
    if (b.size() - at < n) {
      throw CheckpointError(std::string("checkpoint: truncated payload reading ") + what);
    }
    std::memcpy(dst, b.data() + at, n);
    at += n;
  };
  std::uint32_t count = 0;
  take(&count, 4, "tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t len = 0;
    take(&len, 2, "name length");
    std::string name(len, '\0');
    take(name.data(), len, "name");
    std::uint8_t nd = 0;
    take(&nd, 1, "rank");
    if (nd == 0) throw CheckpointError("checkpoint: tensor '" + name + "' has rank 0");
    diff::Shape shape(nd);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      std::uint32_t d32 = 0;
      take(&d32, 4, "dimensions");
      if (d32 == 0) throw CheckpointError("checkpoint: tensor '" + name + "' has a zero dimension");
      numel *= d32;
      if (numel > kMaxCheckpointElements) {
        throw CheckpointError("checkpoint: tensor '" + name + "' dimension overflow");
      }
      d = d32;
    }
    if (numel * sizeof(float) > b.size() - at) {
      throw CheckpointError("checkpoint: truncated payload reading tensor '" + name + "'");
    }
    std::vector<float> data(static_cast<std::size_t>(numel));
    take(data.data(), data.size() * sizeof(float), "tensor data");
    out.emplace_back(std::move(name), diff::Tensor<float>(std::move(shape), std::move(data)));
  }
  if (at != b.size()) throw CheckpointError("checkpoint: trailing bytes after last tensor");
  return out;
}

/// Everything needed to resume training or run inference.
struct Checkpoint {
  net::ModelConfig model;
  std::uint32_t sample_rate = 8000;
  net::ParamStore<float> params;
  AdamState opt;
  int epoch = 0;            // epochs completed
  std::uint64_t seed = 0;   // run seed; per-epoch shuffles derive from it
  double best_val = 0.0;    // best validation SI-SNR so far
};

namespace ckpt_detail {

inline diff::Tensor<float> u64_tensor(std::uint64_t v) {
  diff::Tensor<float> t(diff::Shape{4});
  for (std::size_t i = 0; i < 4; ++i) t[i] = static_cast<float>((v >> (16 * i)) & 0xFFFFU);
  return t;
}

inline std::uint64_t u64_from(const diff::Tensor<float>& t) {
  if (t.numel() != 4) throw CheckpointError("checkpoint: malformed 64-bit field");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const float f = t[i];
    if (!(f >= 0.0F && f <= 65535.0F) || f != static_cast<float>(static_cast<std::uint32_t>(f))) {
      throw CheckpointError("checkpoint: malformed 64-bit field");
    }
    v |= static_cast<std::uint64_t>(f) << (16 * i);
  }
  return v;
}

inline diff::Tensor<float> f64_tensor(double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  return u64_tensor(bits);
}

inline double f64_from(const diff::Tensor<float>& t) { return std::bit_cast<double>(u64_from(t)); }

inline diff::Tensor<float> model_tensor(const net::ModelConfig& c, std::uint32_t sr) {
  const int v[] = {c.n_channels, c.enc_kernel, c.enc_stride, c.chunk_k, c.repeats_p,
                   c.hidden_h,   c.num_speakers, c.stages,  c.ca_reduction};
  diff::Tensor<float> t(diff::Shape{std::size(v) + 2});
  for (std::size_t i = 0; i < std::size(v); ++i) t[i] = static_cast<float>(v[i]);
  t[std::size(v)] = static_cast<float>(sr);
  t[std::size(v) + 1] = c.parallel_paths ? 1.0F : 0.0F;
  return t;
}

}  // namespace ckpt_detail

inline std::vector<NamedTensor> to_tensors(const Checkpoint& c) {
  std::vector<NamedTensor> out;
  for (const auto& [n, t] : c.params) {
    if (n.starts_with("cfg.") || n.starts_with("opt.") || n.starts_with("rng.")) {
      throw CheckpointError("checkpoint: parameter name '" + n + "' uses a reserved prefix");
    }
    out.emplace_back(n, t);
  }
  net::ParamStore<float> cfg, opt, rng;
  cfg.emplace("cfg.model", ckpt_detail::model_tensor(c.model, c.sample_rate));
  cfg.emplace("cfg.epoch", diff::Tensor<float>::scalar(static_cast<float>(c.epoch)));
  cfg.emplace("cfg.best_val", ckpt_detail::f64_tensor(c.best_val));
  opt.emplace("opt.step", ckpt_detail::u64_tensor(static_cast<std::uint64_t>(c.opt.step)));
  for (const auto& [n, t] : c.opt.m) opt.emplace("opt.m." + n, t);
  for (const auto& [n, t] : c.opt.v) opt.emplace("opt.v." + n, t);
  rng.emplace("rng.seed", ckpt_detail::u64_tensor(c.seed));
  for (const auto* group : {&cfg, &opt, &rng}) {
    for (const auto& [n, t] : *group) out.emplace_back(n, t);
  }
  return out;
}

inline Checkpoint from_tensors(std::vector<NamedTensor> tensors) {
  Checkpoint c;
  net::ParamStore<float> meta;
  for (auto& [n, t] : tensors) {
    const bool reserved = n.starts_with("cfg.") || n.starts_with("opt.") || n.starts_with("rng.");
    auto& dst = reserved ? meta : c.params;
    if (!dst.emplace(n, std::move(t)).second) {
      throw CheckpointError("checkpoint: duplicate tensor '" + n + "'");
    }
  }
  auto need = [&meta](const std::string& n) -> const diff::Tensor<float>& {
    auto it = meta.find(n);
    if (it == meta.end()) throw CheckpointError("checkpoint: missing '" + n + "'");
    return it->second;
  };
  const auto& m = need("cfg.model");
  if (m.numel() != 11) throw CheckpointError("checkpoint: malformed cfg.model");
  int* fields[] = {&c.model.n_channels, &c.model.enc_kernel,   &c.model.enc_stride,
                   &c.model.chunk_k,    &c.model.repeats_p,    &c.model.hidden_h,
                   &c.model.num_speakers, &c.model.stages,     &c.model.ca_reduction};
  for (std::size_t i = 0; i < std::size(fields); ++i) *fields[i] = static_cast<int>(m[i]);
  c.sample_rate = static_cast<std::uint32_t>(m[9]);
  c.model.parallel_paths = m[10] != 0.0F;
  try {
    c.model.validate();
  } catch (const net::ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  c.epoch = static_cast<int>(need("cfg.epoch").item());
  c.best_val = ckpt_detail::f64_from(need("cfg.best_val"));
  c.opt.step = static_cast<std::int64_t>(ckpt_detail::u64_from(need("opt.step")));
  c.seed = ckpt_detail::u64_from(need("rng.seed"));
  for (auto& [n, t] : meta) {
    if (n.starts_with("opt.m.")) c.opt.m.emplace(n.substr(6), std::move(t));
    if (n.starts_with("opt.v.")) c.opt.v.emplace(n.substr(6), std::move(t));
  }
  return c;
}

inline void save_tensors(const std::vector<NamedTensor>& tensors, const std::filesystem::path& path) {
  const auto bytes = encode_tensors(tensors);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("checkpoint: cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("checkpoint: write failed for " + path.string());
}

inline std::vector<NamedTensor> load_tensors(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("checkpoint: cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_tensors(bytes);
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  save_tensors(to_tensors(c), path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return from_tensors(load_tensors(path));
}

}  // namespace tpsep::train
