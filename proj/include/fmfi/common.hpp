#pragma once

// Shared vocabulary for the fmfi library: error types, dense matrix aliases
// and the deterministic seeding helpers every module draws from.

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace fmfi {

/// Embedding width shared by the teacher, the text anchors and the student.
inline constexpr int kEmbeddingDim = 512;

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatD = Mat<double>;

enum class ErrorKind {
  EmptyFrame,
  NonMonotonicTimestamps,
  ShapeMismatch,
  ZeroNormEmbedding,
  InsufficientSamples,
  NoTrainableData,
  MissingSupport,
  UnknownLabel,
  SchemaError,
  DuplicateClass,
  Usage,
  Io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::EmptyFrame: return "EmptyFrame";
    case ErrorKind::NonMonotonicTimestamps: return "NonMonotonicTimestamps";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::ZeroNormEmbedding: return "ZeroNormEmbedding";
    case ErrorKind::InsufficientSamples: return "InsufficientSamples";
    case ErrorKind::NoTrainableData: return "NoTrainableData";
    case ErrorKind::MissingSupport: return "MissingSupport";
    case ErrorKind::UnknownLabel: return "UnknownLabel";
    case ErrorKind::SchemaError: return "SchemaError";
    case ErrorKind::DuplicateClass: return "DuplicateClass";
    case ErrorKind::Usage: return "Usage";
    case ErrorKind::Io: return "Io";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// SchemaError raised while reading a line-oriented file; `line` is 1-based.
class SchemaError : public Error {
 public:
  SchemaError(std::size_t line, const std::string& what)
      : Error(ErrorKind::SchemaError, "line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// splitmix64 finalizer; used to derive independent per-item seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index = 0) {
  return mix_seed(mix_seed(base ^ mix_seed(stream)) + index);
}

using Rng = std::mt19937_64;

/// Uniform double in [0, 1) from the top 53 bits of one engine draw.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Uniform index in [0, n) without the platform-dependent distribution objects.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
}

}  // namespace fmfi
