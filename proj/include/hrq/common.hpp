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

// Error types, logging and seeded randomness shared by every module.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#ifndef HRQ_VERSION
#define HRQ_VERSION "0.1.0"
#endif

namespace hrq {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Caller violated an API contract (shape mismatch, bad argument).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration value.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite value encountered.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Geometry of a quantizer, network or embedding table.
enum class Flavor { kEuclidean, kHyperbolic };

inline const char* to_string(Flavor f) {
  return f == Flavor::kEuclidean ? "euclidean" : "hyperbolic";
}

inline Flavor flavor_from_string(std::string_view s) {
  if (s == "euclidean" || s == "rq") return Flavor::kEuclidean;
  if (s == "hyperbolic" || s == "hrq") return Flavor::kHyperbolic;
  throw ConfigError("unknown flavor '" + std::string(s) + "' (expected euclidean|hyperbolic)");
}

// ---------------------------------------------------------------------------
// Logging. Verbosity comes from HRQ_LOG_LEVEL (error|warn|info|debug).

enum class LogLevel { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

inline LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("HRQ_LOG_LEVEL");
    if (env == nullptr) return LogLevel::kWarn;
    const std::string_view v(env);
    if (v == "error") return LogLevel::kError;
    if (v == "info") return LogLevel::kInfo;
    if (v == "debug") return LogLevel::kDebug;
    return LogLevel::kWarn;
  }();
  return level;
}

inline void log(LogLevel level, std::string_view msg) {
  if (static_cast<int>(level) > static_cast<int>(log_level())) return;
  static constexpr const char* kNames[] = {"error", "warn", "info", "debug"};
  std::cerr << "[hrq:" << kNames[static_cast<int>(level)] << "] " << msg << '\n';
}

inline void log_warn(std::string_view msg) { log(LogLevel::kWarn, msg); }
inline void log_info(std::string_view msg) { log(LogLevel::kInfo, msg); }
inline void log_debug(std::string_view msg) { log(LogLevel::kDebug, msg); }

// ---------------------------------------------------------------------------
// Randomness. Every component derives its own stream from one run seed:
// derive_seed(seed, "component") = splitmix64(seed ^ fnv1a64("component")).

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view component) {
  return splitmix64(seed ^ fnv1a64(component));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::string_view component) {
  return Rng(derive_seed(seed, component));
}

/// Uniform integer in [0, n). Avoids std::uniform_int_distribution so that
/// streams are identical across standard library implementations.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  if (n == 0) throw UsageError("uniform_index: empty range");
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
  std::uint64_t x = rng();
  while (x >= limit) x = rng();
  return static_cast<std::size_t>(x % n);
}

/// Uniform double in [0, 1).
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

/// Standard normal via Box-Muller.
inline double normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[uniform_index(rng, i)]);
  }
}

inline void require_finite(const Matrix& m, std::string_view what) {
  if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite value");
}

}  // namespace hrq
