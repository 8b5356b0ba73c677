#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmil/tensor.hpp"

// Versioned binary checkpoint container: magic + version + dtype byte, a JSON
// metadata blob, then a named tensor table (little-endian payloads).

namespace cmil {

namespace ckpt_detail {

inline void put_bytes(std::string& out, const void* p, std::size_t n) {
  out.append(reinterpret_cast<const char*>(p), n);
}

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t b = 0; b < sizeof(U); ++b)
    out.push_back(char((v >> (8 * b)) & 0xFF));
}

template <typename U>
U get_le(const unsigned char*& p, const unsigned char* end) {
  if (p + sizeof(U) > end) fail("checkpoint: truncated file");
  U v = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b) v |= U(p[b]) << (8 * b);
  p += sizeof(U);
  return v;
}

}  // namespace ckpt_detail

struct NamedTensorF64 {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

struct CheckpointFile {
  int precision_bytes = 8;  // 4 = f32 payloads, 8 = f64
  nlohmann::json meta;
  std::vector<NamedTensorF64> tensors;  // held as f64 in memory

  const NamedTensorF64* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline void save_checkpoint(const CheckpointFile& ck, const std::filesystem::path& path) {
  using namespace ckpt_detail;
  std::string blob;
  blob.append("CMILCKP1");
  put_le<std::uint32_t>(blob, 1);
  blob.push_back(char(ck.precision_bytes));
  const std::string meta = ck.meta.dump();
  put_le<std::uint64_t>(blob, meta.size());
  blob.append(meta);
  put_le<std::uint32_t>(blob, std::uint32_t(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    put_le<std::uint16_t>(blob, std::uint16_t(t.name.size()));
    blob.append(t.name);
    blob.push_back(char(t.shape.size()));
    for (auto d : t.shape) put_le<std::uint64_t>(blob, d);
    if (ck.precision_bytes == 8) {
      for (double v : t.data) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        put_le<std::uint64_t>(blob, bits);
      }
    } else {
      for (double v : t.data) {
        const float f = float(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_le<std::uint32_t>(blob, bits);
      }
    }
  }
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("checkpoint: cannot write " + path.string());
  out.write(blob.data(), std::streamsize(blob.size()));
}

inline CheckpointFile load_checkpoint(const std::filesystem::path& path) {
  using namespace ckpt_detail;
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("checkpoint: cannot open " + path.string());
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
  const auto* end = p + blob.size();
  if (blob.size() < 13 || std::memcmp(p, "CMILCKP1", 8) != 0)
    fail("checkpoint: bad magic in " + path.string());
  p += 8;
  const auto version = get_le<std::uint32_t>(p, end);
  if (version != 1) fail("checkpoint: unsupported format version " + std::to_string(version));
  CheckpointFile ck;
  ck.precision_bytes = int(*p++);
  if (ck.precision_bytes != 4 && ck.precision_bytes != 8)
    fail("checkpoint: invalid precision byte");
  const auto meta_len = get_le<std::uint64_t>(p, end);
  if (p + meta_len > end) fail("checkpoint: truncated metadata");
  ck.meta = nlohmann::json::parse(std::string(reinterpret_cast<const char*>(p), meta_len));
  p += meta_len;
  const auto count = get_le<std::uint32_t>(p, end);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensorF64 t;
    const auto name_len = get_le<std::uint16_t>(p, end);
    if (p + name_len > end) fail("checkpoint: truncated tensor name");
    t.name.assign(reinterpret_cast<const char*>(p), name_len);
    p += name_len;
    if (p >= end) fail("checkpoint: truncated tensor header");
    const std::size_t rank = *p++;
    for (std::size_t r = 0; r < rank; ++r)
      t.shape.push_back(std::size_t(get_le<std::uint64_t>(p, end)));
    const std::size_t n = numel(t.shape);
    t.data.resize(n);
    if (ck.precision_bytes == 8) {
      for (std::size_t q = 0; q < n; ++q) {
        const auto bits = get_le<std::uint64_t>(p, end);
        std::memcpy(&t.data[q], &bits, 8);
      }
    } else {
      for (std::size_t q = 0; q < n; ++q) {
        const auto bits = get_le<std::uint32_t>(p, end);
        float f;
        std::memcpy(&f, &bits, 4);
        t.data[q] = double(f);
      }
    }
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

}  // namespace cmil
