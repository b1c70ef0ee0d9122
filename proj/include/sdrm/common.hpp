// SPDX-License-Identifier: Apache-2.0
//
// Error types, RNG alias and small shared helpers.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>

namespace sdrm {

/// Base of every error raised by the toolkit. CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or settings that cannot work together.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// API called out of order (e.g. backward without a forward trace).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient during optimisation.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Input data that cannot be turned into a usable dataset.
class DataError : public Error {
 public:
  using Error::Error;
};

/// File-system failures.
class IoError : public Error {
 public:
  using Error::Error;
};

using Rng = std::mt19937_64;

/// Derives an independent stream seed from a base seed and a salt (splitmix64).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Worker cap: SDRM_THREADS if set and positive, otherwise hardware concurrency.
inline unsigned worker_count() {
  if (const char* env = std::getenv("SDRM_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace sdrm
