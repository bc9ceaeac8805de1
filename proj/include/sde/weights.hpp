#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sde/common.hpp"
#include "sde/tensor.hpp"

namespace sde {

// Named-tensor container behind model assembly. The map is ordered so
// serialization is deterministic.
struct WeightStore {
  std::map<std::string, TensorF> tensors;
  uint64_t seed = 0;
  uint64_t spec_hash = 0;

  size_t param_count() const {
    size_t n = 0;
    for (const auto& [name, t] : tensors) n += t.numel();
    return n;
  }
};

namespace detail {

constexpr uint32_t kWeightsVersion = 1;

inline void put_bytes(std::string& out, const void* p, size_t n) {
  out.append(static_cast<const char*>(p), n);
}

inline void put_u16le(std::string& out, uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>(v >> 8)};
  put_bytes(out, b, 2);
}

inline void put_u32le(std::string& out, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(out, b, 4);
}

inline void put_u64le(std::string& out, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(out, b, 8);
}

class ByteReader {
 public:
  ByteReader(const std::string& data, const std::string& origin)
      : data_(data), origin_(origin) {}

  uint64_t take(int n) {
    if (pos_ + size_t(n) > data_.size())
      throw ParseError(origin_ + ": truncated at byte offset " +
                       std::to_string(pos_));
    uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= uint64_t(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += size_t(n);
    return v;
  }
  std::string take_str(size_t n) {
    if (pos_ + n > data_.size())
      throw ParseError(origin_ + ": truncated at byte offset " +
                       std::to_string(pos_));
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  size_t pos() const { return pos_; }
  bool exhausted() const { return pos_ == data_.size(); }
  const std::string& origin() const { return origin_; }

 private:
  const std::string& data_;
  std::string origin_;
  size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_weights(const WeightStore& store) {
  std::string out;
  out += "SDEW";
  detail::put_u32le(out, detail::kWeightsVersion);
  detail::put_u64le(out, store.spec_hash);
  detail::put_u32le(out, static_cast<uint32_t>(store.tensors.size()));
  for (const auto& [name, t] : store.tensors) {
    detail::put_u16le(out, static_cast<uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.rank()));
    for (int d = 0; d < t.rank(); ++d)
      detail::put_u32le(out, static_cast<uint32_t>(t.dim(d)));
    for (float v : t.values())
      detail::put_u32le(out, std::bit_cast<uint32_t>(v));
  }
  return out;
}

inline void save_weights(const WeightStore& store, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  const std::string bytes = serialize_weights(store);
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw IoError("short write to " + path);
}

inline WeightStore parse_weights(const std::string& bytes,
                                 const std::string& origin) {
  detail::ByteReader r(bytes, origin);
  if (r.take_str(4) != "SDEW")
    throw ParseError(origin + ": bad magic, not a weights file");
  const auto version = static_cast<uint32_t>(r.take(4));
  if (version != detail::kWeightsVersion)
    throw ParseError(origin + ": unsupported weights version " +
                     std::to_string(version));
  WeightStore store;
  store.spec_hash = r.take(8);
  const auto count = static_cast<uint32_t>(r.take(4));
  for (uint32_t i = 0; i < count; ++i) {
    const auto name_len = static_cast<size_t>(r.take(2));
    const std::string name = r.take_str(name_len);
    const int rank = static_cast<int>(r.take(1));
    Shape shape(rank);
    size_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      shape[d] = static_cast<int>(r.take(4));
      if (shape[d] <= 0)
        throw ParseError(origin + ": non-positive extent in tensor " + name);
      numel *= size_t(shape[d]);
    }
    std::vector<float> data(numel);
    for (size_t k = 0; k < numel; ++k)
      data[k] = std::bit_cast<float>(static_cast<uint32_t>(r.take(4)));
    if (!store.tensors.emplace(name, TensorF::from_data(shape, std::move(data)))
             .second)
      throw ParseError(origin + ": duplicate tensor name " + name);
  }
  if (!r.exhausted())
    throw ParseError(origin + ": trailing bytes at offset " +
                     std::to_string(r.pos()));
  return store;
}

inline WeightStore load_weights(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open weights file " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  return parse_weights(bytes, path);
}

}  // namespace sde
