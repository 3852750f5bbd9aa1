#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "alft/diffcore/graph.hpp"
#include "alft/diffcore/params.hpp"

// Binary array container shared by checkpoints and dataset sidecars:
//   8 bytes   magic "ALFT0001"
//   8 bytes   manifest length, little-endian uint64
//   N bytes   UTF-8 JSON manifest {"meta": ..., "arrays": [{name, shape, offset, count}]}
//   rest      float64 payload, little-endian; offsets count doubles

namespace alft::io {

inline constexpr char kMagic[8] = {'A', 'L', 'F', 'T', '0', '0', '0', '1'};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedArray {
  std::string name;
  ad::Shape shape;
  std::vector<double> data;
};

struct Container {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  [[nodiscard]] const NamedArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode(const Container& c) {
  nlohmann::json manifest;
  manifest["meta"] = c.meta;
  manifest["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& a : c.arrays) {
    if (a.data.size() != a.shape.size())
      throw FormatError("array '" + a.name + "' has " + std::to_string(a.data.size()) + " values for shape " + a.shape.str());
    manifest["arrays"].push_back({{"name", a.name}, {"shape", a.shape.dims}, {"offset", offset}, {"count", a.data.size()}});
    offset += a.data.size();
  }
  const std::string text = manifest.dump();
  std::string out(kMagic, kMagic + 8);
  detail::put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset * 8);
  for (const auto& a : c.arrays)
    for (double v : a.data) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline Container decode(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw FormatError("bad magic; not an ALFT0001 file");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t len = detail::get_u64(raw + 8);
  if (16 + len > bytes.size()) throw FormatError("truncated manifest");
  const nlohmann::json manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + static_cast<std::ptrdiff_t>(16 + len));
  const std::size_t payload = 16 + len;
  Container c;
  c.meta = manifest.at("meta");
  for (const auto& entry : manifest.at("arrays")) {
    NamedArray a;
    a.name = entry.at("name").get<std::string>();
    a.shape = ad::Shape(entry.at("shape").get<std::vector<int>>());
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto count = entry.at("count").get<std::uint64_t>();
    if (count != a.shape.size()) throw FormatError("array '" + a.name + "' count does not match its shape");
    if (payload + (offset + count) * 8 > bytes.size()) throw FormatError("array '" + a.name + "' runs past end of file");
    a.data.resize(count);
    for (std::uint64_t i = 0; i < count; ++i)
      a.data[i] = std::bit_cast<double>(detail::get_u64(raw + payload + (offset + i) * 8));
    c.arrays.push_back(std::move(a));
  }
  return c;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_container(const std::filesystem::path& path, const Container& c) { write_file(path, encode(c)); }
inline Container read_container(const std::filesystem::path& path) { return decode(read_file(path)); }

/// Parameter values (not optimizer state) as a container.
inline Container to_container(const ad::ParameterStore& store, nlohmann::json meta) {
  Container c;
  c.meta = std::move(meta);
  for (std::size_t i = 0; i < store.count(); ++i) c.arrays.push_back({store[i].name, store[i].shape, store[i].value});
  return c;
}

/// Copies values into an already-registered store; names and shapes must match.
inline void restore(ad::ParameterStore& store, const Container& c) {
  if (c.arrays.size() != store.count())
    throw FormatError("checkpoint has " + std::to_string(c.arrays.size()) + " parameters, model expects " +
                      std::to_string(store.count()));
  for (const auto& a : c.arrays) {
    if (!store.contains(a.name)) throw FormatError("checkpoint parameter not in model: " + a.name);
    ad::Parameter& p = store.at(a.name);
    if (!(p.shape == a.shape)) throw FormatError("shape mismatch for " + a.name + ": " + a.shape.str() + " vs " + p.shape.str());
    p.value = a.data;
  }
}

}  // namespace alft::io
