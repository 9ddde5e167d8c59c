// Copyright 2026 The prior3d Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "prior3d/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

namespace prior3d {

namespace fs = std::filesystem;

void append_f32_le(std::vector<char>& out, std::span<const float> values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * sizeof(float));
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(values[i]);
    if constexpr (std::endian::native == std::endian::big) {
      bits = ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) | ((bits >> 8) & 0xff00u) | (bits >> 24);
    }
    std::memcpy(out.data() + start + i * sizeof(float), &bits, sizeof(bits));
  }
}

std::vector<float> read_f32_le(std::span<const char> bytes, std::size_t offset, std::size_t count) {
  if (offset > bytes.size() || count > (bytes.size() - offset) / sizeof(float)) {
    throw FormatError("blob truncated: need " + std::to_string(offset + count * sizeof(float)) +
                      " bytes, have " + std::to_string(bytes.size()));
  }
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + offset + i * sizeof(float), sizeof(bits));
    if constexpr (std::endian::native == std::endian::big) {
      bits = ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) | ((bits >> 8) & 0xff00u) | (bits >> 24);
    }
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

std::vector<char> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file_bytes(const fs::path& path, std::span<const char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

template <typename T>
void save_checkpoint(const fs::path& dir, const NamedParameters<T>& params, const nlohmann::json& extra) {
  fs::create_directories(dir);
  std::vector<char> blob;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [name, tensor] : params) {
    std::vector<float> values(tensor.value().data(), tensor.value().data() + tensor.size());
    entries.push_back({{"name", name}, {"shape", tensor.shape()}, {"offset", blob.size()}});
    append_f32_le(blob, values);
  }
  nlohmann::json manifest = {{"format", "prior3d-checkpoint-v1"},
                             {"dtype", "f32-le"},
                             {"blob", kCheckpointBlob},
                             {"blob_bytes", blob.size()},
                             {"parameters", entries},
                             {"meta", extra}};
  write_file_bytes(dir / kCheckpointBlob, blob);
  write_json_file(dir / kCheckpointManifest, manifest);
}

nlohmann::json read_checkpoint_meta(const fs::path& dir) {
  const auto manifest = read_json_file(dir / kCheckpointManifest);
  return manifest.value("meta", nlohmann::json::object());
}

template <typename T>
nlohmann::json load_checkpoint(const fs::path& dir, NamedParameters<T>& params) {
  const auto manifest = read_json_file(dir / kCheckpointManifest);
  const auto blob = read_file_bytes(dir / manifest.value("blob", std::string(kCheckpointBlob)));
  if (manifest.contains("blob_bytes") && manifest["blob_bytes"].get<std::size_t>() != blob.size()) {
    throw FormatError("checkpoint blob size does not match manifest in " + dir.string());
  }
  std::map<std::string, nlohmann::json> by_name;
  for (const auto& e : manifest.at("parameters")) by_name[e.at("name").get<std::string>()] = e;
  for (auto& [name, tensor] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing parameter '" + name + "'");
    const Shape shape = it->second.at("shape").template get<Shape>();
    if (shape != tensor.shape()) {
      throw FormatError("parameter '" + name + "' has shape " + shape_string(shape) + " in checkpoint, model expects " +
                        shape_string(tensor.shape()));
    }
    const auto values = read_f32_le(blob, it->second.at("offset").template get<std::size_t>(), tensor.size());
    Vec<T>& dst = tensor.mutable_value();
    for (std::size_t i = 0; i < values.size(); ++i) dst[static_cast<Eigen::Index>(i)] = static_cast<T>(values[i]);
  }
  return manifest.value("meta", nlohmann::json::object());
}

template void save_checkpoint<float>(const fs::path&, const NamedParameters<float>&, const nlohmann::json&);
template void save_checkpoint<double>(const fs::path&, const NamedParameters<double>&, const nlohmann::json&);
template nlohmann::json load_checkpoint<float>(const fs::path&, NamedParameters<float>&);
template nlohmann::json load_checkpoint<double>(const fs::path&, NamedParameters<double>&);

}  // namespace prior3d
