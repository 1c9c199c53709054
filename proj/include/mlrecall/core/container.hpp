#pragma once

// Binary tensor container shared by checkpoints, steering vectors and traces.
//
//   offset 0   : magic "MLRT"
//   offset 4   : uint32 format version (1)
//   offset 8   : uint64 header length H in bytes
//   offset 16  : H bytes of UTF-8 JSON
//                {"metadata": {...},
//                 "tensors": [{"name", "dtype": "f32"|"f64", "shape": [...], "offset"}]}
//   then zero padding to an 8-byte boundary, then the data section.
//
// All integers and tensor elements are little-endian; tensors are row-major
// IEEE floats (f32 for weights, f64 for steering vectors), "offset" counts
// bytes from the start of the data section.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlrecall/core/error.hpp"

namespace mlrecall {

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;
  std::vector<double> data_f64; // used instead of `data` when dtype is f64
  std::string dtype = "f32";

  std::size_t numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
  }
};

class TensorContainer {
public:
  static constexpr char kMagic[4] = {'M', 'L', 'R', 'T'};
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json metadata = nlohmann::json::object();

  void add(std::string name, std::vector<std::size_t> shape, std::vector<float> data) {
    NamedTensor t{std::move(name), std::move(shape), std::move(data)};
    if (t.numel() != t.data.size())
      throw ShapeError("tensor '" + t.name + "': shape does not match element count");
    if (find(t.name) != nullptr) throw FormatError("duplicate tensor name '" + t.name + "'");
    tensors_.push_back(std::move(t));
  }

  void add_f64(std::string name, std::vector<std::size_t> shape, std::vector<double> data) {
    NamedTensor t{std::move(name), std::move(shape), {}, std::move(data), "f64"};
    if (t.numel() != t.data_f64.size())
      throw ShapeError("tensor '" + t.name + "': shape does not match element count");
    if (find(t.name) != nullptr) throw FormatError("duplicate tensor name '" + t.name + "'");
    tensors_.push_back(std::move(t));
  }

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors_)
      if (t.name == name) return &t;
    return nullptr;
  }

  const NamedTensor& at(const std::string& name) const {
    if (const auto* t = find(name)) return *t;
    throw FormatError("container has no tensor '" + name + "'");
  }

  const std::vector<NamedTensor>& tensors() const { return tensors_; }

  std::string serialize() const {
    nlohmann::json header;
    header["metadata"] = metadata;
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& t : tensors_) {
      header["tensors"].push_back({{"name", t.name}, {"dtype", t.dtype}, {"shape", t.shape}, {"offset", offset}});
      offset += t.dtype == "f64" ? t.data_f64.size() * sizeof(double) : t.data.size() * sizeof(float);
    }
    const std::string h = header.dump();

    std::string out(kMagic, 4);
    put_le<std::uint32_t>(out, kVersion);
    put_le<std::uint64_t>(out, h.size());
    out += h;
    while (out.size() % 8 != 0) out.push_back('\0');
    for (const auto& t : tensors_) {
      for (float v : t.data) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
      for (double v : t.data_f64) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
  }

  static TensorContainer parse(const std::string& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0)
      throw FormatError("not a tensor container (bad magic)");
    const auto version = get_le<std::uint32_t>(bytes, 4);
    if (version != kVersion) throw FormatError("unsupported container version " + std::to_string(version));
    const auto hlen = get_le<std::uint64_t>(bytes, 8);
    if (16 + hlen > bytes.size()) throw FormatError("truncated container header");

    nlohmann::json header;
    try {
      header = nlohmann::json::parse(bytes.substr(16, hlen));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("container header is not JSON: ") + e.what());
    }
    std::size_t data_start = 16 + hlen;
    data_start = (data_start + 7) / 8 * 8;

    TensorContainer c;
    c.metadata = header.value("metadata", nlohmann::json::object());
    for (const auto& entry : header.at("tensors")) {
      NamedTensor t;
      t.dtype = entry.value("dtype", "f32");
      if (t.dtype != "f32" && t.dtype != "f64") throw FormatError("unsupported dtype '" + t.dtype + "'");
      const std::size_t width = t.dtype == "f64" ? 8 : 4;
      t.name = entry.at("name").get<std::string>();
      t.shape = entry.at("shape").get<std::vector<std::size_t>>();
      const auto off = entry.at("offset").get<std::uint64_t>();
      const auto n = t.numel();
      if (data_start + off + n * width > bytes.size())
        throw FormatError("tensor '" + t.name + "' extends past end of container");
      if (width == 8) {
        t.data_f64.resize(n);
        for (std::size_t i = 0; i < n; ++i)
          t.data_f64[i] = std::bit_cast<double>(get_le<std::uint64_t>(bytes, data_start + off + i * 8));
      } else {
        t.data.resize(n);
        for (std::size_t i = 0; i < n; ++i)
          t.data[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, data_start + off + i * 4));
      }
      c.tensors_.push_back(std::move(t));
    }
    return c;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + path.string() + "' for writing");
    const auto bytes = serialize();
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }

  static TensorContainer load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw LoadError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

private:
  std::vector<NamedTensor> tensors_;

  template <typename U>
  static void put_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }

  template <typename U>
  static U get_le(const std::string& in, std::size_t at) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return v;
  }
};

} // namespace mlrecall
