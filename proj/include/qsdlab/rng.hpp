#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace qsdlab {

// Philox4x32-10 block cipher. Counter-based: every draw is a pure function of
// (key, counter), so particle i at step n sees the same randomness no matter
// how the loop is scheduled across threads.
inline std::array<uint32_t, 4> philox4x32(std::array<uint32_t, 4> x,
                                          uint32_t k0, uint32_t k1) {
  constexpr uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
  constexpr uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
  for (int r = 0;; ++r) {
    const uint64_t p0 = uint64_t(M0) * x[0];
    const uint64_t p1 = uint64_t(M1) * x[2];
    x = {uint32_t(p1 >> 32) ^ x[1] ^ k0, uint32_t(p1),
         uint32_t(p0 >> 32) ^ x[3] ^ k1, uint32_t(p0)};
    if (r == 9) return x;
    k0 += W0;
    k1 += W1;
  }
}

// One double in (0,1) from 64 random bits; never exactly 0 or 1. The
// half-offset form (k + 1/2) * 2^-52 is exact in double, so the range is
// [2^-53, 1 - 2^-53] with no rounding back onto an endpoint.
inline double u01(uint32_t hi, uint32_t lo) {
  const uint64_t u = (uint64_t(hi) << 32) | lo;
  return (double(u >> 12) + 0.5) * 0x1.0p-52;
}

// Stream of draws for one particle. Counter layout: (particle lo, particle hi,
// step, block). Normal blocks use block indices [0, 2^31); uniforms live in
// [2^31, 2^32) so the two kinds never collide.
struct RngStream {
  uint32_t key0, key1;
  uint32_t pid_lo, pid_hi;

  RngStream(uint64_t seed, uint64_t particle)
      : key0(uint32_t(seed)), key1(uint32_t(seed >> 32)),
        pid_lo(uint32_t(particle)), pid_hi(uint32_t(particle >> 32)) {}

  std::array<uint32_t, 4> block(uint32_t step, uint32_t blk) const {
    return philox4x32({pid_lo, pid_hi, step, blk}, key0, key1);
  }

  // Fills out[0..n) with standard normals via Box-Muller, two per block.
  // Each (step, blk) pair is generated fresh; odd tails are discarded so the
  // draw pattern depends only on (particle, step).
  void normals(uint32_t step, double* out, int n) const {
    for (int k = 0; k < n; k += 2) {
      const auto r = block(step, uint32_t(k / 2));
      const double u1 = u01(r[0], r[1]);
      const double u2 = u01(r[2], r[3]);
      const double rad = std::sqrt(-2.0 * std::log(u1));
      const double ang = 6.283185307179586476925286766559 * u2;
      out[k] = rad * std::cos(ang);
      if (k + 1 < n) out[k + 1] = rad * std::sin(ang);
    }
  }

  double normal(uint32_t step, uint32_t idx) const {
    const auto r = block(step, idx);
    const double u1 = u01(r[0], r[1]);
    const double u2 = u01(r[2], r[3]);
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(6.283185307179586476925286766559 * u2);
  }

  double uniform(uint32_t step, uint32_t idx) const {
    const auto r = block(step, 0x80000000u | idx);
    return u01(r[0], r[1]);
  }
};

// splitmix64: bijective mixer, used to decorrelate user seeds.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace qsdlab
