#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "atmodist/error.hpp"
#include "atmodist/nn/layers.hpp"

namespace atmodist {

// Binary layout: "ATMD" magic, u32 version, u64 tensor count, then per tensor
// u64 length and that many little-endian float32 values. Parameters come
// first, running buffers after, both in the model's collection order.
inline constexpr char checkpoint_magic[4] = {'A', 'T', 'M', 'D'};
inline constexpr std::uint32_t checkpoint_version = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_le(std::istream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("truncated checkpoint " + path);
  return v;
}

}  // namespace detail

/// Write parameter values and buffers as float32.
template <typename S>
void save_tensors(const std::filesystem::path& path, const std::vector<nn::Param<S>*>& params,
                  const std::vector<aligned_vector<S>*>& buffers) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os.write(checkpoint_magic, 4);
  detail::write_le(os, checkpoint_version);
  detail::write_le<std::uint64_t>(os, params.size() + buffers.size());
  auto put = [&](const aligned_vector<S>& v) {
    detail::write_le<std::uint64_t>(os, v.size());
    for (S x : v) detail::write_le(os, static_cast<float>(x));
  };
  for (const auto* p : params) put(p->value);
  for (const auto* b : buffers) put(*b);
  if (!os) throw Error("write failed for " + path.string());
}

/// Load tensors saved by save_tensors into a model of identical architecture.
template <typename S>
void load_tensors(const std::filesystem::path& path, const std::vector<nn::Param<S>*>& params,
                  const std::vector<aligned_vector<S>*>& buffers) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("missing checkpoint " + path.string());
  const std::string p = path.string();
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, checkpoint_magic, 4) != 0) throw FormatError(p + " is not a checkpoint");
  if (const auto v = detail::read_le<std::uint32_t>(is, p); v != checkpoint_version)
    throw FormatError(p + ": unsupported checkpoint version " + std::to_string(v));
  const auto count = detail::read_le<std::uint64_t>(is, p);
  if (count != params.size() + buffers.size())
    throw FormatError(p + ": expected " + std::to_string(params.size() + buffers.size()) + " tensors, found " +
                      std::to_string(count));
  auto get = [&](aligned_vector<S>& v, const std::string& what) {
    const auto n = detail::read_le<std::uint64_t>(is, p);
    if (n != v.size())
      throw FormatError(p + ": tensor " + what + " has " + std::to_string(n) + " values, expected " +
                        std::to_string(v.size()));
    for (auto& x : v) x = static_cast<S>(detail::read_le<float>(is, p));
  };
  for (auto* q : params) get(q->value, q->name);
  for (std::size_t i = 0; i < buffers.size(); ++i) get(*buffers[i], "buffer " + std::to_string(i));
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(p + ": trailing bytes");
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("missing file " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

}  // namespace atmodist
