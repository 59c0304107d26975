#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>

namespace bmfact {

using Rng = std::mt19937_64;

namespace detail {

// splitmix64 finalizer; good enough to decorrelate structured seed tuples.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Deterministic RNG stream for (seed, salt, a, b). Streams for distinct
/// tuples are independent regardless of construction order, which keeps
/// parallel sweeps reproducible for any worker count.
inline Rng make_stream(std::uint64_t seed, std::uint64_t salt, std::uint64_t a,
                       std::uint64_t b = 0) {
  std::uint64_t s = detail::mix64(seed ^ 0x8f1bbcdcbfa53e0bULL);
  s = detail::mix64(s ^ detail::mix64(salt));
  s = detail::mix64(s ^ detail::mix64(a));
  s = detail::mix64(s ^ detail::mix64(b));
  return Rng(s);
}

/// Derives a child seed, e.g. for per-job chains in a grid.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
  return detail::mix64(detail::mix64(detail::mix64(seed ^ detail::mix64(a)) ^ detail::mix64(b)) ^
                       detail::mix64(c));
}

/// Draw from the inverse gamma distribution with density
/// p(x) ∝ x^{-(shape+1)} exp(-scale/x).
inline double draw_inverse_gamma(Rng& rng, double shape, double scale) {
  if (!(shape > 0.0) || !(scale > 0.0))
    throw std::invalid_argument("draw_inverse_gamma: shape and scale must be positive");
  std::gamma_distribution<double> gamma(shape, 1.0 / scale);
  double g = 0.0;
  do {
    g = gamma(rng);
  } while (g <= 0.0);
  return 1.0 / g;
}

}  // namespace bmfact
