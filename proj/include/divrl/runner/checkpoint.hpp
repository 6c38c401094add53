#pragma once

// Binary checkpoints. Layout (little-endian):
//   8 bytes   magic "DIVRLCKP"
//   u32       format version
//   32 bytes  SHA-256 of the canonical config JSON
//   sections  repeated: u32 name length, name, u64 payload length, payload
//   32 bytes  SHA-256 of everything before it
// Sections: "config" (JSON text + seed), then the trainer's own sections.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "divrl/error.hpp"
#include "divrl/runner/config.hpp"
#include "divrl/runner/trainer.hpp"

namespace divrl::run {

inline constexpr char kCheckpointMagic[8] = {'D', 'I', 'V', 'R', 'L', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using Digest = std::array<std::uint8_t, 32>;

inline Digest sha256(std::string_view data) {
  Digest d{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), d.data(), &len, EVP_sha256(), nullptr) != 1 || len != d.size())
    throw Error("SHA-256 computation failed");
  return d;
}

inline std::string canonical_config(const RunConfig& c) { return to_json(c).dump(); }
inline Digest config_hash(const RunConfig& c) { return sha256(canonical_config(c)); }

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class ByteWriter {
 public:
  static constexpr bool loading = false;

  template <typename T>
  void raw(const T& v) {
    const char* p = reinterpret_cast<const char*>(&v);
    out_.append(p, sizeof(T));
  }
  void io(const double& v) { raw(v); }
  void io(const std::int64_t& v) { raw(v); }
  void io(const std::uint64_t& v) { raw(v); }
  void io(const bool& v) { raw(static_cast<std::uint8_t>(v ? 1 : 0)); }
  void io(const std::string& s) {
    raw(static_cast<std::uint64_t>(s.size()));
    out_ += s;
  }
  void io(const std::vector<double>& v) {
    raw(static_cast<std::uint64_t>(v.size()));
    out_.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }

  void section(const std::string& name, const std::function<void()>& body) {
    std::string saved;
    saved.swap(out_);
    body();
    std::string payload;
    payload.swap(out_);
    out_.swap(saved);
    raw(static_cast<std::uint32_t>(name.size()));
    out_ += name;
    raw(static_cast<std::uint64_t>(payload.size()));
    out_ += payload;
  }

  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  static constexpr bool loading = true;

  explicit ByteReader(std::string_view data) : data_(data) {}

  template <typename T>
  T raw() {
    if (pos_ + sizeof(T) > data_.size()) throw ChecksumError("checkpoint truncated");
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view take(std::size_t n) {
    if (n > data_.size() - pos_) throw ChecksumError("checkpoint truncated");
    const std::string_view s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void io(double& v) { v = raw<double>(); }
  void io(std::int64_t& v) { v = raw<std::int64_t>(); }
  void io(std::uint64_t& v) { v = raw<std::uint64_t>(); }
  void io(bool& v) { v = raw<std::uint8_t>() != 0; }
  void io(std::string& s) { s = std::string(take(static_cast<std::size_t>(raw<std::uint64_t>()))); }
  /// Vectors that already have a size (parameters) must keep it; empty ones adopt the stored size.
  void io(std::vector<double>& v) {
    const auto n = static_cast<std::size_t>(raw<std::uint64_t>());
    if (!v.empty() && v.size() != n) throw ChecksumError("checkpoint tensor has the wrong size");
    const std::string_view bytes = take(n * sizeof(double));
    v.resize(n);
    std::memcpy(v.data(), bytes.data(), bytes.size());
  }

  void section(const std::string& name, const std::function<void()>& body) {
    const auto len = raw<std::uint32_t>();
    const std::string_view got = take(len);
    if (got != name) throw ChecksumError("checkpoint section '" + std::string(got) + "' where '" + name + "' expected");
    const auto size = static_cast<std::size_t>(raw<std::uint64_t>());
    const std::size_t end = pos_ + size;
    if (end > data_.size()) throw ChecksumError("checkpoint truncated");
    body();
    if (pos_ != end) throw ChecksumError("checkpoint section '" + name + "' has the wrong length");
  }

  bool at_end() const { return pos_ == data_.size(); }
  std::size_t position() const { return pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Serialized checkpoint of a trainer.
inline std::string checkpoint_bytes(Trainer& trainer) {
  detail::ByteWriter w;
  w.bytes().append(kCheckpointMagic, sizeof kCheckpointMagic);
  w.raw(kCheckpointVersion);
  const Digest h = config_hash(trainer.config());
  w.bytes().append(reinterpret_cast<const char*>(h.data()), h.size());
  w.section("config", [&] {
    w.io(canonical_config(trainer.config()));
    w.io(trainer.seed());
  });
  trainer.serialize(w);
  const Digest sum = sha256(w.bytes());
  w.bytes().append(reinterpret_cast<const char*>(sum.data()), sum.size());
  return std::move(w.bytes());
}

inline void checkpoint_save(const std::string& path, Trainer& trainer) {
  const std::string bytes = checkpoint_bytes(trainer);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write checkpoint '" + path + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing checkpoint '" + path + "'");
}

struct CheckpointHeader {
  std::uint32_t version = 0;
  Digest config_hash{};
  RunConfig config;
  std::uint64_t seed = 0;
};

/// Validates magic, version and checksum, then reads the config section.
inline CheckpointHeader read_checkpoint_header(std::string_view bytes, detail::ByteReader& r) {
  CheckpointHeader h;
  if (bytes.size() < sizeof kCheckpointMagic + 4 + 32 + 32 ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw ChecksumError("not a checkpoint file (bad magic)");
  r.take(sizeof kCheckpointMagic);
  h.version = r.raw<std::uint32_t>();
  if (h.version != kCheckpointVersion)
    throw VersionError("checkpoint format version " + std::to_string(h.version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  const Digest stored = [&] {
    Digest d{};
    std::memcpy(d.data(), bytes.data() + bytes.size() - 32, 32);
    return d;
  }();
  if (sha256(bytes.substr(0, bytes.size() - 32)) != stored) throw ChecksumError("checkpoint checksum mismatch");
  std::memcpy(h.config_hash.data(), r.take(32).data(), 32);
  std::string text;
  r.section("config", [&] {
    r.io(text);
    r.io(h.seed);
  });
  h.config = parse_config_text(text);
  if (config_hash(h.config) != h.config_hash) throw ChecksumError("checkpoint config section does not match its hash");
  return h;
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot read '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Rebuilds a trainer from checkpoint bytes. When `expected` is given its
/// config hash must match the stored one.
inline Trainer checkpoint_restore(std::string_view bytes, const RunConfig* expected = nullptr) {
  detail::ByteReader r(bytes.substr(0, bytes.size() >= 32 ? bytes.size() - 32 : 0));
  const CheckpointHeader h = read_checkpoint_header(bytes, r);
  if (expected && config_hash(*expected) != h.config_hash)
    throw ConfigError("checkpoint was written for a different config (hash mismatch); refusing to load");
  Trainer t(h.config, h.seed);
  t.serialize(r);
  if (!r.at_end()) throw ChecksumError("trailing bytes after the last checkpoint section");
  return t;
}

inline Trainer checkpoint_load(const std::string& path, const RunConfig* expected = nullptr) {
  return checkpoint_restore(read_file(path), expected);
}

}  // namespace divrl::run
