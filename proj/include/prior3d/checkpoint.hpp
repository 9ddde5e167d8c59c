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

// Checkpoints: `params.json` lists every parameter's name, shape and byte
// offset into `params.bin`, a flat little-endian f32 blob.

#pragma once

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "prior3d/tensor.hpp"

namespace prior3d {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
using NamedParameters = std::vector<std::pair<std::string, Tensor<T>>>;

inline constexpr const char* kCheckpointManifest = "params.json";
inline constexpr const char* kCheckpointBlob = "params.bin";

// Writes the parameter manifest and blob into `dir` (created if needed).
// `extra` is stored verbatim under the manifest's "meta" key.
template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const NamedParameters<T>& params,
                     const nlohmann::json& extra = nlohmann::json::object());

// Loads values into `params` by name; every name must be present with the
// same shape. Returns the stored "meta" object.
template <typename T>
nlohmann::json load_checkpoint(const std::filesystem::path& dir, NamedParameters<T>& params);

// Reads only the "meta" object of a checkpoint manifest.
nlohmann::json read_checkpoint_meta(const std::filesystem::path& dir);

// Little-endian f32 blob helpers shared with the dataset writer.
void append_f32_le(std::vector<char>& out, std::span<const float> values);
std::vector<float> read_f32_le(std::span<const char> bytes, std::size_t offset, std::size_t count);

std::vector<char> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const char> bytes);
nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace prior3d
