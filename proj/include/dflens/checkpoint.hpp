#pragma once

// Checkpoint file layout, little-endian throughout:
//
//   magic            8 bytes  "DFLENS01"
//   version          u16
//   descriptor       u32 byte length + UTF-8 JSON architecture descriptor
//   tensor count     u32
//   per tensor:      u32 name length + UTF-8 name
//                    u8 dtype tag (1 = float64)
//                    u32 rank, rank x u64 extents
//                    numel x float64 payload

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dflens/denoiser.hpp"
#include "dflens/error.hpp"

namespace dflens {

inline constexpr std::string_view kCheckpointMagic = "DFLENS01";
inline constexpr std::uint16_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeFloat64 = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_string(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void put_raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_string(const char* what) { return get_raw(get<std::uint32_t>(what), what); }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(concat("checkpoint truncated while reading ", what, " at byte ", pos_));
    }
  }
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> serialize_checkpoint(const Denoiser& model) {
  detail::ByteWriter w;
  w.put_raw(kCheckpointMagic);
  w.put(kCheckpointVersion);
  w.put_string(to_json(model.config()).dump());
  w.put(static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& [name, t] : model.parameters()) {
    w.put_string(name);
    w.put(kDtypeFloat64);
    w.put(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put(static_cast<std::uint64_t>(d));
    for (double v : t.data()) w.put(v);
  }
  return w.bytes();
}

inline Denoiser deserialize_checkpoint(std::vector<char> bytes) {
  detail::ByteReader r(std::move(bytes));
  const std::string magic = r.get_raw(kCheckpointMagic.size(), "magic");
  if (magic != kCheckpointMagic) throw FormatError("checkpoint: bad magic bytes (not a DFLENS01 file)");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError(concat("checkpoint: unsupported version ", version, " (expected ", kCheckpointVersion, ")"));
  }
  nlohmann::json descriptor;
  try {
    descriptor = nlohmann::json::parse(r.get_string("architecture descriptor"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(concat("checkpoint: malformed architecture descriptor: ", e.what()));
  }
  DenoiserConfig config;
  try {
    config = config_from_json(descriptor);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(concat("checkpoint: incomplete architecture descriptor: ", e.what()));
  }
  Denoiser model(config, 0);
  const auto count = r.get<std::uint32_t>("tensor count");
  if (count != model.parameters().size()) {
    throw FormatError(concat("checkpoint: tensor table lists ", count, " tensors, architecture needs ",
                             model.parameters().size()));
  }
  std::vector<std::pair<std::string, std::vector<double>>> loaded;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.get_string("tensor name");
    const auto dtype = r.get<std::uint8_t>("dtype tag");
    if (dtype != kDtypeFloat64) throw FormatError(concat("checkpoint: tensor '", name, "' has unknown dtype tag ", int{dtype}));
    const auto rank = r.get<std::uint32_t>("rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>("extent")));
    if (!model.parameters().count(name)) throw FormatError(concat("checkpoint: unexpected tensor '", name, "'"));
    for (const auto& prior : loaded) {
      if (prior.first == name) throw FormatError(concat("checkpoint: duplicate tensor '", name, "'"));
    }
    const Tensor& expected = model.param(name);
    if (expected.shape() != shape) {
      throw FormatError(concat("checkpoint: tensor '", name, "' has shape ", shape_string(shape), ", architecture expects ",
                               shape_string(expected.shape())));
    }
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = r.get<double>("tensor payload");
    loaded.emplace_back(std::move(name), std::move(values));
  }
  if (!r.at_end()) throw FormatError("checkpoint: trailing bytes after tensor table");
  for (auto& [name, values] : loaded) model.set_param(name, std::move(values));
  return model;
}

inline void save_checkpoint(const Denoiser& model, const std::string& path) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(concat("save_checkpoint: cannot open '", path, "' for writing"));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(concat("save_checkpoint: write to '", path, "' failed"));
}

inline Denoiser load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(concat("load_checkpoint: cannot open '", path, "'"));
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(std::move(bytes));
}

}  // namespace dflens
