#pragma once

// Binary checkpoint layout (all integers and values little-endian):
//
//   magic      8 bytes  "LRNETCKP"
//   version    u32
//   precision  u8       bytes per stored value (4 or 8)
//   phase      u32
//   epoch      u64
//   spec       string   network description (to_text)
//   params     block    named tensors
//   optimizer  f64 lr, f64 momentum, f64 weight_decay, u8 decay_biases, block velocity
//   rng        string   engine state (operator<< form)
//   config     string   key=value snapshot
//
// string = u64 length + bytes; block = u32 count, then per tensor
// u32 name length, name bytes, 4 x u64 extents (n,c,h,w), raw values.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "lrnet/config.hpp"
#include "lrnet/network.hpp"
#include "lrnet/optim.hpp"

namespace lrnet {

inline constexpr char kCheckpointMagic[8] = {'L', 'R', 'N', 'E', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Real>
struct Checkpoint {
  Model<Real> model;
  OptimState<Real> optim;
  std::uint32_t phase = 1;
  std::uint64_t epoch = 0;
  std::mt19937_64 rng;
  TrainConfig config;
};

namespace detail {

template <typename T>
T to_little(T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

class Writer {
 public:
  explicit Writer(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) fail(ErrorKind::kData, "checkpoint: cannot write '" + path + "'");
  }

  template <typename T>
  void pod(T v) {
    v = to_little(v);
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void bytes(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }

  template <typename Real>
  void block(const ParameterSet<Real>& ps) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(ps.size()));
    for (const auto& [name, t] : ps) {
      pod<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
      bytes(name.data(), name.size());
      for (std::size_t d : {t.shape().n, t.shape().c, t.shape().h, t.shape().w})
        pod<std::uint64_t>(d);
      for (Real v : t.data()) pod<Real>(v);
    }
  }

  void finish() {
    out_.flush();
    if (!out_) fail(ErrorKind::kData, "checkpoint: write to '" + path_ + "' failed");
  }

 private:
  std::string path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) fail(ErrorKind::kData, "checkpoint: cannot open '" + path + "'");
  }

  template <typename T>
  T pod() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in_) fail(ErrorKind::kData, "checkpoint: '" + path_ + "' is truncated");
    return to_little(v);
  }
  std::string raw(std::size_t n) {
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (!in_) fail(ErrorKind::kData, "checkpoint: '" + path_ + "' is truncated");
    return s;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    if (n > (std::uint64_t(1) << 30))
      fail(ErrorKind::kData, "checkpoint: string length " + std::to_string(n) +
                                 " is implausible");
    return raw(n);
  }

  /// Reads a tensor block stored with `Stored` values, converting to `Real`.
  template <typename Real, typename Stored>
  ParameterSet<Real> block() {
    ParameterSet<Real> ps;
    const auto count = pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto len = pod<std::uint32_t>();
      if (len == 0 || len > 4096)
        fail(ErrorKind::kData, "checkpoint: tensor name length " + std::to_string(len) +
                                   " is implausible");
      std::string name = raw(len);
      Shape s;
      s.n = pod<std::uint64_t>();
      s.c = pod<std::uint64_t>();
      s.h = pod<std::uint64_t>();
      s.w = pod<std::uint64_t>();
      Tensor<Real> t(s);
      for (auto& v : t.data()) v = static_cast<Real>(pod<Stored>());
      ps.add(std::move(name), std::move(t));
    }
    return ps;
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::string path_;
  std::ifstream in_;
};

}  // namespace detail

template <typename Real>
void save_checkpoint(const Checkpoint<Real>& ck, const std::string& path) {
  detail::Writer w(path);
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.pod<std::uint8_t>(sizeof(Real));
  w.pod<std::uint32_t>(ck.phase);
  w.pod<std::uint64_t>(ck.epoch);
  w.str(to_text(ck.model.spec));
  w.block(ck.model.params);
  w.pod<double>(ck.optim.learning_rate);
  w.pod<double>(ck.optim.momentum);
  w.pod<double>(ck.optim.weight_decay);
  w.pod<std::uint8_t>(ck.optim.decay_biases ? 1 : 0);
  w.block(ck.optim.velocity);
  std::ostringstream rng;
  rng << ck.rng;
  w.str(rng.str());
  w.str(ck.config.to_text());
  w.finish();
}

/// Stored precision of a checkpoint, in bytes per value.
inline std::size_t checkpoint_value_bytes(const std::string& path) {
  detail::Reader r(path);
  char magic[8];
  for (char& c : magic) c = static_cast<char>(r.pod<std::uint8_t>());
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    fail(ErrorKind::kData, "checkpoint: '" + path + "' has a bad magic string");
  r.pod<std::uint32_t>();
  return r.pod<std::uint8_t>();
}

/// Loads a checkpoint, converting values if it was stored at another precision.
template <typename Real>
Checkpoint<Real> load_checkpoint(const std::string& path) {
  detail::Reader r(path);
  char magic[8];
  for (char& c : magic) c = static_cast<char>(r.pod<std::uint8_t>());
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    fail(ErrorKind::kData, "checkpoint: '" + path + "' has a bad magic string");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    fail(ErrorKind::kData, "checkpoint: unsupported format version " + std::to_string(version));
  const auto value_bytes = r.pod<std::uint8_t>();
  if (value_bytes != 4 && value_bytes != 8)
    fail(ErrorKind::kData, "checkpoint: unsupported value width " + std::to_string(value_bytes));
  auto block = [&]() {
    return value_bytes == 4 ? r.block<Real, float>() : r.block<Real, double>();
  };

  Checkpoint<Real> ck;
  ck.phase = r.pod<std::uint32_t>();
  ck.epoch = r.pod<std::uint64_t>();
  ck.model.spec = spec_from_text(r.str());
  ck.model.params = block();
  ck.optim.learning_rate = r.pod<double>();
  ck.optim.momentum = r.pod<double>();
  ck.optim.weight_decay = r.pod<double>();
  ck.optim.decay_biases = r.pod<std::uint8_t>() != 0;
  ck.optim.velocity = block();
  std::istringstream rng(r.str());
  rng >> ck.rng;
  if (rng.fail()) fail(ErrorKind::kData, "checkpoint: corrupt RNG state");
  ck.config = config_from_text(r.str());
  if (!r.at_end()) fail(ErrorKind::kData, "checkpoint: trailing bytes in '" + path + "'");
  validate_parameters(ck.model.spec, ck.model.params);
  return ck;
}

}  // namespace lrnet
