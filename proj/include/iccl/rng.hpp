// SPDX-License-Identifier: Apache-2.0
//
// Counter-based random streams. Every draw is a pure function of
// (seed, derivation words..., counter), so simulations are bit-reproducible
// regardless of execution order or thread count.

#pragma once

#include <cmath>
#include <cstdint>

#include <Eigen/Dense>

namespace iccl::rng {

namespace detail {

inline constexpr std::uint64_t kPhi = 0x9e3779b97f4a7c15ULL;

// SplitMix64 finalizer (Steele/Lea/Flood).
inline constexpr std::uint64_t mix(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ULL;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebULL;
  z ^= z >> 31;
  return z;
}

// 53-bit mantissa to [0, 1).
inline double to_unit(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

}  // namespace detail

// An immutable stream handle. `derive` appends a word to the key, `raw(c)`
// reads the c-th output of the stream (the SplitMix64 sequence rooted at
// the derived state).
class Stream {
 public:
  explicit constexpr Stream(std::uint64_t state) : state_(state) {}

  constexpr Stream derive(std::uint64_t word) const {
    return Stream(detail::mix(state_ ^ detail::mix(word + detail::kPhi)));
  }

  constexpr std::uint64_t raw(std::uint64_t counter) const {
    return detail::mix(state_ + (counter + 1) * detail::kPhi);
  }

  double uniform(std::uint64_t counter) const { return detail::to_unit(raw(counter)); }

  // Standard normal via Box-Muller; consumes raws 2c and 2c+1.
  double normal(std::uint64_t counter) const {
    const double u1 =
        (static_cast<double>(raw(2 * counter) >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = detail::to_unit(raw(2 * counter + 1));
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

inline constexpr Stream make_stream(std::uint64_t seed) {
  return Stream(detail::mix(seed + detail::kPhi));
}

inline Eigen::VectorXd normal_vector(const Stream& stream, Eigen::Index n) {
  Eigen::VectorXd z(n);
  for (Eigen::Index c = 0; c < n; ++c) {
    z[c] = stream.normal(static_cast<std::uint64_t>(c));
  }
  return z;
}

}  // namespace iccl::rng
