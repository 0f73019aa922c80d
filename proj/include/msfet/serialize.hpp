#pragma once

#include <map>
#include <string>
#include <vector>

#include "msfet/binary_io.hpp"
#include "msfet/parameters.hpp"

namespace msfet {

/// Weights file layout (little-endian):
///
///   "WTS1" u32 count
///   count x { u16 name_len, name bytes, u8 rank, u32 dims[rank], f32 data[] }
///   optional trailer: "CFG1" u32 text_len, UTF-8 "key=value\n" lines
///
/// Readers that only know the entry table stop before the trailer.
struct WeightsFile {
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<float> values;
  };
  std::vector<Entry> entries;
  std::map<std::string, std::string> manifest;
};

inline std::vector<char> encode_weights(const WeightsFile& file) {
  io::ByteWriter w;
  w.bytes("WTS1");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(file.entries.size()));
  for (const auto& e : file.entries) {
    if (e.name.size() > 0xFFFF) throw ArgumentError("parameter name too long: " + e.name);
    if (e.shape.size() > 0xFF) throw ArgumentError("rank too large for " + e.name);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.bytes(e.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    if (shape_numel(e.shape) != e.values.size()) throw ShapeError("entry '" + e.name + "' size mismatch");
    for (float v : e.values) w.put<float>(v);
  }
  if (!file.manifest.empty()) {
    std::string text;
    for (const auto& [k, v] : file.manifest) text += k + "=" + v + "\n";
    w.bytes("CFG1");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
    w.bytes(text);
  }
  return w.take();
}

inline WeightsFile decode_weights(std::string_view bytes) {
  io::ByteReader r(bytes);
  if (r.bytes(4, "magic") != "WTS1") throw ParseError("weights file: bad magic at byte offset 0");
  WeightsFile file;
  const auto count = r.get<std::uint32_t>("entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    WeightsFile::Entry e;
    const auto len = r.get<std::uint16_t>("name length");
    e.name = std::string(r.bytes(len, "name"));
    const auto rank = r.get<std::uint8_t>("rank");
    for (std::uint8_t d = 0; d < rank; ++d) e.shape.push_back(r.get<std::uint32_t>("dimension"));
    e.values.resize(shape_numel(e.shape));
    for (auto& v : e.values) v = r.get<float>("tensor data");
    file.entries.push_back(std::move(e));
  }
  if (!r.at_end()) {
    const std::size_t at = r.offset();
    if (r.bytes(4, "trailer magic") != "CFG1") {
      throw ParseError("weights file: unexpected bytes at offset " + std::to_string(at));
    }
    const auto len = r.get<std::uint32_t>("manifest length");
    std::string text(r.bytes(len, "manifest"));
    std::size_t start = 0;
    while (start < text.size()) {
      std::size_t end = text.find('\n', start);
      if (end == std::string::npos) end = text.size();
      std::string line = text.substr(start, end - start);
      start = end + 1;
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError("weights manifest: malformed line '" + line + "'");
      file.manifest[line.substr(0, eq)] = line.substr(eq + 1);
    }
    if (!r.at_end()) throw ParseError("weights file: trailing bytes at offset " + std::to_string(r.offset()));
  }
  return file;
}

template <typename T>
WeightsFile snapshot_weights(const ParameterStore<T>& store,
                             std::map<std::string, std::string> manifest = {}) {
  WeightsFile file;
  file.manifest = std::move(manifest);
  for (const auto& p : store.params()) {
    WeightsFile::Entry e;
    e.name = p.name;
    e.shape = p.tensor.shape();
    e.values.reserve(p.tensor.numel());
    for (T v : p.tensor.data()) e.values.push_back(static_cast<float>(v));
    file.entries.push_back(std::move(e));
  }
  return file;
}

/// Copies stored values into the matching parameters. Every parameter of
/// the store must be present with the same shape.
template <typename T>
void restore_weights(ParameterStore<T>& store, const WeightsFile& file) {
  std::map<std::string, const WeightsFile::Entry*> by_name;
  for (const auto& e : file.entries) by_name[e.name] = &e;
  for (auto& p : store.params()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw ConfigError("weights file lacks parameter '" + p.name + "'");
    if (it->second->shape != p.tensor.shape()) {
      throw ShapeError("parameter '" + p.name + "' has shape " + shape_str(p.tensor.shape()) +
                       " but file stores " + shape_str(it->second->shape));
    }
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->values[i]);
  }
  if (by_name.size() != store.size()) {
    for (const auto& e : file.entries) {
      if (!store.contains(e.name)) throw ConfigError("weights file has unknown parameter '" + e.name + "'");
    }
  }
}

}  // namespace msfet
