#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace veroi {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
// One sample per row.
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Errc {
  kIo,
  kBadMagic,
  kBadVersion,
  kTruncated,
  kTrailingData,
  kOutOfBounds,
  kDimMismatch,
  kInvalidArgument,
  kRankDeficient,
  kParse,
};

inline const char* errc_name(Errc code) {
  switch (code) {
    case Errc::kIo: return "io";
    case Errc::kBadMagic: return "bad_magic";
    case Errc::kBadVersion: return "bad_version";
    case Errc::kTruncated: return "truncated";
    case Errc::kTrailingData: return "trailing_data";
    case Errc::kOutOfBounds: return "out_of_bounds";
    case Errc::kDimMismatch: return "dim_mismatch";
    case Errc::kInvalidArgument: return "invalid_argument";
    case Errc::kRankDeficient: return "rank_deficient";
    case Errc::kParse: return "parse";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what),
        code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

// Every randomized operation takes its own generator seeded from the caller,
// so results never depend on call order across operations.
using Rng = std::mt19937_64;

// Uniform in [0, 1) with 53 random bits; independent of the standard
// library's distribution implementations.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
}

// Box-Muller; deterministic across standard library implementations.
inline double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

// Mixes a stream tag into a seed so sub-operations draw independent streams.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Unit-normalizes in place; returns false (and zeroes) when the norm is
// below `eps`.
inline bool normalize_or_zero(Vec& v, double eps = 1e-12) {
  const double n = v.norm();
  if (!(n > eps)) {
    v.setZero();
    return false;
  }
  v /= n;
  return true;
}

}  // namespace veroi
