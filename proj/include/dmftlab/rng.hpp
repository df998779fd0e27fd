#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace dmftlab {

// Stateless counter-based generator: every draw is a pure function of
// (seed, stream, index), so the order in which entries are generated or the
// worker that generates them never changes the value.
class CounterRng {
 public:
  constexpr CounterRng(std::uint64_t seed, std::uint64_t stream) noexcept
      : key_(mix(seed ^ mix(stream + 0x632be59bd9b4e019ULL))) {}

  // Child stream, e.g. one per replica or per path.
  constexpr CounterRng substream(std::uint64_t id) const noexcept {
    CounterRng r(0, 0);
    r.key_ = mix(key_ ^ mix(id * 0x9e3779b97f4a7c15ULL + 0x94d049bb133111ebULL));
    return r;
  }

  constexpr std::uint64_t bits(std::uint64_t index) const noexcept {
    return mix(key_ + mix(index + 0xda942042e4dd58b5ULL));
  }

  // Uniform on the open interval (0,1).
  double uniform(std::uint64_t index) const noexcept {
    return (static_cast<double>(bits(index) >> 11) + 0.5) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller on two derived counters.
  double normal(std::uint64_t index) const noexcept {
    const double u1 = uniform(2 * index);
    const double u2 = uniform(2 * index + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double rademacher(std::uint64_t index) const noexcept {
    return (bits(index) >> 63) ? 1.0 : -1.0;
  }

 private:
  // splitmix64 finalizer
  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
};

// Named streams so instance pieces never share counters.
namespace streams {
inline constexpr std::uint64_t design = 1;
inline constexpr std::uint64_t theta_star = 2;
inline constexpr std::uint64_t noise = 3;
inline constexpr std::uint64_t theta0 = 4;
inline constexpr std::uint64_t brownian = 5;
inline constexpr std::uint64_t probes = 6;
inline constexpr std::uint64_t dmft_u = 7;
inline constexpr std::uint64_t dmft_brownian = 8;
inline constexpr std::uint64_t dmft_init = 9;
}  // namespace streams

}  // namespace dmftlab
