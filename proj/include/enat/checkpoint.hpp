#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "enat/optim.hpp"
#include "enat/tensor.hpp"

namespace enat {

/// Self-describing container of named tensors, string metadata and
/// (optionally) Adam state. The binary layout is:
///
///   "ENATCKP1"
///   u64 metadata count, then (string key, string value) pairs
///   u64 tensor count, then (string name, u64 rank, u64 dims..., f64 values...)
///   u8 has_optimizer; if set: u64 step, f64 base_rate, u64 warmup,
///     f64 beta1, f64 beta2, f64 eps, u64 slot count, per slot u64 n + 2n f64
///
/// Strings are u64 length + bytes. Numbers are stored in host byte order,
/// so a write/read cycle on one machine is bit-exact.
struct Checkpoint {
  std::map<std::string, std::string> metadata;
  std::vector<NamedTensor> tensors;
  std::optional<OptimizerState> optimizer;

  const Tensor& tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.tensor;
    throw std::runtime_error("checkpoint: no tensor named '" + name + "'");
  }

  bool has_tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return true;
    return false;
  }

  const std::string& meta(const std::string& key) const {
    auto it = metadata.find(key);
    if (it == metadata.end()) throw std::runtime_error("checkpoint: missing metadata '" + key + "'");
    return it->second;
  }
};

namespace detail {

constexpr char kCheckpointMagic[8] = {'E', 'N', 'A', 'T', 'C', 'K', 'P', '1'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const auto n = read_pod<std::uint64_t>(is);
  if (n > (std::uint64_t{1} << 32)) throw std::runtime_error("checkpoint: corrupt string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

inline void write_doubles(std::ostream& os, const std::vector<double>& v) {
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline std::vector<double> read_doubles(std::istream& is, std::size_t n) {
  std::vector<double> v(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  detail::write_pod<std::uint64_t>(os, ckpt.metadata.size());
  for (const auto& [k, v] : ckpt.metadata) {
    detail::write_string(os, k);
    detail::write_string(os, v);
  }
  detail::write_pod<std::uint64_t>(os, ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) {
    detail::write_string(os, t.name);
    detail::write_pod<std::uint64_t>(os, t.tensor.rank());
    for (std::size_t d : t.tensor.shape()) detail::write_pod<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.tensor.values().data()),
             static_cast<std::streamsize>(t.tensor.size() * sizeof(double)));
  }
  detail::write_pod<std::uint8_t>(os, ckpt.optimizer ? 1 : 0);
  if (ckpt.optimizer) {
    const auto& o = *ckpt.optimizer;
    detail::write_pod<std::uint64_t>(os, o.step);
    detail::write_pod<double>(os, o.schedule.base_rate);
    detail::write_pod<std::uint64_t>(os, o.schedule.warmup_steps);
    detail::write_pod<double>(os, o.hyper.beta1);
    detail::write_pod<double>(os, o.hyper.beta2);
    detail::write_pod<double>(os, o.hyper.epsilon);
    detail::write_pod<std::uint64_t>(os, o.first_moment.size());
    for (std::size_t i = 0; i < o.first_moment.size(); ++i) {
      detail::write_pod<std::uint64_t>(os, o.first_moment[i].size());
      detail::write_doubles(os, o.first_moment[i]);
      detail::write_doubles(os, o.second_moment[i]);
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[sizeof(detail::kCheckpointMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("checkpoint: '" + path + "' is not an enat checkpoint");
  Checkpoint ckpt;
  const auto n_meta = detail::read_pod<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < n_meta; ++i) {
    auto k = detail::read_string(is);
    ckpt.metadata[k] = detail::read_string(is);
  }
  const auto n_tensors = detail::read_pod<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < n_tensors; ++i) {
    NamedTensor t;
    t.name = detail::read_string(is);
    const auto rank = detail::read_pod<std::uint64_t>(is);
    if (rank == 0 || rank > 8) throw std::runtime_error("checkpoint: corrupt rank for " + t.name);
    Shape shape(rank);
    for (auto& d : shape) d = detail::read_pod<std::uint64_t>(is);
    t.tensor = Tensor(shape, detail::read_doubles(is, element_count(shape)), true);
    ckpt.tensors.push_back(std::move(t));
  }
  if (detail::read_pod<std::uint8_t>(is)) {
    OptimizerState o;
    o.step = detail::read_pod<std::uint64_t>(is);
    o.schedule.base_rate = detail::read_pod<double>(is);
    o.schedule.warmup_steps = detail::read_pod<std::uint64_t>(is);
    o.hyper.beta1 = detail::read_pod<double>(is);
    o.hyper.beta2 = detail::read_pod<double>(is);
    o.hyper.epsilon = detail::read_pod<double>(is);
    const auto slots = detail::read_pod<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < slots; ++i) {
      const auto n = detail::read_pod<std::uint64_t>(is);
      o.first_moment.push_back(detail::read_doubles(is, n));
      o.second_moment.push_back(detail::read_doubles(is, n));
    }
    ckpt.optimizer = std::move(o);
  }
  return ckpt;
}

/// Copies tensor values from `ckpt` into `params` by name; shapes must agree.
inline void load_parameters(ParameterList& params, const Checkpoint& ckpt) {
  for (auto& p : params) {
    const Tensor& src = ckpt.tensor(p.name);
    if (src.shape() != p.tensor.shape())
      throw ShapeError("checkpoint: shape mismatch for " + p.name + ": " + to_string(src.shape()) +
                       " vs " + to_string(p.tensor.shape()));
    std::copy(src.values().begin(), src.values().end(), p.tensor.mutable_values().begin());
  }
}

}  // namespace enat
