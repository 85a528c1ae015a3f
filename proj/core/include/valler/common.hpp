#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace valler {

/// Failure categories surfaced by the library. `std::invalid_argument` is used
/// directly for precondition violations; everything else derives from Error.
enum class ErrorKind {
  Io,
  CorruptCode,
  Capacity,
  Numeric,
  TrainingFailure,
  Pointer,
  EmptyBatch,
  UndefinedMetric,
  Load,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Thrown when LM training produces a non-finite loss.
class TrainingFailure : public Error {
 public:
  TrainingFailure(int step, const std::string& what)
      : Error(ErrorKind::TrainingFailure, what), step_(step) {}
  int step() const noexcept { return step_; }

 private:
  int step_;
};

using Rng = std::mt19937_64;

/// splitmix64 finaliser; used to derive independent sub-seeds from a master seed.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based seed splitting: stream `counter` of `seed`.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t counter) noexcept {
  return mix_seed(mix_seed(seed) ^ mix_seed(counter + 0x632be59bd9b4e019ULL));
}

/// FNV-1a, used for config hashes carried in artifact files.
constexpr std::uint64_t fnv1a(std::string_view bytes,
                              std::uint64_t h = 0xcbf29ce484222325ULL) noexcept {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace valler
