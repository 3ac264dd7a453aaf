/*
 * Copyright 2026 The HRQ Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Run provenance for CLI invocations: content digests of inputs, atomic
// output writes, and the manifest recording both.

#pragma once

#include <openssl/evp.h>

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "hrq/common.hpp"
#include "json.hpp"

namespace hrq::cli {

using json = nlohmann::json;

/// Lowercase hex SHA-256 of the file's bytes.
inline std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256: init failed");
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0 && EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount())) != 1) {
      throw std::runtime_error("sha256: update failed");
    }
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(ctx.get(), md.data(), &len) != 1) throw std::runtime_error("sha256: final failed");
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return hex.str();
}

/// Writes `content` to a sibling temporary file, then renames it over `path`,
/// so readers never observe a partial file.
inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + tmp.string() + "'");
    out << content;
    out.flush();
    if (!out) throw DataError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

/// Provenance of one invocation. Written last, after every output.
class RunManifest {
 public:
  RunManifest(std::string command, std::vector<std::string> argv)
      : command_(std::move(command)), argv_(std::move(argv)), start_(std::chrono::steady_clock::now()) {}

  void set_config(json config) { config_ = std::move(config); }
  void set_seed(std::uint64_t seed) { seed_ = seed; }

  void add_input(const std::string& path) { inputs_.push_back({{"path", path}, {"sha256", sha256_file(path)}}); }

  /// Atomically writes an output file and records it.
  void write_output(const std::filesystem::path& path, const std::string& content) {
    atomic_write(path, content);
    outputs_.push_back(path.string());
  }

  json to_json() const {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    return {{"command", command_}, {"argv", argv_},   {"config", config_},       {"seed", seed_},
            {"inputs", inputs_},   {"outputs", outputs_}, {"wall_clock_seconds", secs}, {"version", HRQ_VERSION}};
  }

  void write(const std::filesystem::path& path) const { atomic_write(path, to_json().dump(2) + "\n"); }

 private:
  std::string command_;
  std::vector<std::string> argv_;
  json config_ = json::object();
  std::uint64_t seed_ = 0;
  json inputs_ = json::array();
  std::vector<std::string> outputs_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace hrq::cli
