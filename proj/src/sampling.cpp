#include "qsdlab/sampling.hpp"

#include <cmath>
#include <stdexcept>

#include "qsdlab/rng.hpp"

namespace qsdlab {

double halton(uint64_t index, uint32_t base) {
  double f = 1.0, r = 0.0;
  while (index > 0) {
    f /= base;
    r += f * double(index % base);
    index /= base;
  }
  return r;
}

static const uint32_t kPrimes[] = {2,  3,  5,  7,  11, 13, 17, 19,
                                   23, 29, 31, 37, 41, 43, 47, 53};

std::vector<double> box_samples_log(int d, int n, double lo, double hi,
                                    uint64_t skip) {
  if (d < 1 || d > 16) throw std::invalid_argument("box_samples_log: d");
  if (!(lo > 0 && hi > lo)) throw std::invalid_argument("box_samples_log: box");
  const double llo = std::log(lo), lhi = std::log(hi);
  std::vector<double> out(size_t(n) * d);
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < d; ++i) {
      const double u = halton(uint64_t(k) + skip, kPrimes[i]);
      out[size_t(k) * d + i] = std::exp(llo + u * (lhi - llo));
    }
  return out;
}

std::vector<double> shell_samples(int d, double R, int n, uint64_t seed) {
  if (d < 1 || d > 16) throw std::invalid_argument("shell_samples: d");
  std::vector<double> out(size_t(n) * d);
  RngStream rs(splitmix64(seed), 0x5A11ULL);
  double g[16];
  for (int k = 0; k < n; ++k) {
    double norm2 = 0;
    rs.normals(uint32_t(k), g, d);
    for (int i = 0; i < d; ++i) {
      g[i] = std::abs(g[i]) + 1e-12;
      norm2 += g[i] * g[i];
    }
    const double s = R / std::sqrt(norm2);
    for (int i = 0; i < d; ++i) out[size_t(k) * d + i] = g[i] * s;
  }
  return out;
}

std::vector<double> make_shell_ladder(double r_lo, double r_hi, int count) {
  std::vector<double> r(count);
  const double q = (count > 1) ? std::pow(r_hi / r_lo, 1.0 / (count - 1)) : 1.0;
  double v = r_lo;
  for (int k = 0; k < count; ++k, v *= q) r[k] = v;
  r.back() = r_hi;
  return r;
}

std::vector<double> log_spaced(double lo, double hi, int n) {
  std::vector<double> s(n);
  const double llo = std::log(lo), lhi = std::log(hi);
  for (int k = 0; k < n; ++k)
    s[k] = std::exp(llo + (lhi - llo) * k / double(n - 1));
  return s;
}

}  // namespace qsdlab
