#pragma once

#include <cstdint>
#include <vector>

namespace qsdlab {

// Deterministic sample plans shared by the hypothesis checkers and the
// certificate search: a low-discrepancy cloud in a box (log-scaled per
// coordinate so the near-boundary region is resolved) plus points on a
// geometric ladder of spherical shells in the positive orthant.
struct SamplePlan {
  int n_box = 10000;
  double box_lo = 1e-3;
  double box_hi = 10.0;
  std::vector<double> shell_radii;  // defaults set by make_shell_ladder
  int n_shell = 1000;
  uint64_t seed = 0x5EEDULL;
  double s_max = 1e4;  // cutoff for 1D tail heuristics
};

double halton(uint64_t index, uint32_t base);

// n points in [lo,hi]^d, log-spaced per coordinate, Halton bases 2,3,5,...
// Returned packed row-major (point-major).
std::vector<double> box_samples_log(int d, int n, double lo, double hi,
                                    uint64_t skip = 32);

// n points on the radius-R sphere intersected with the open positive
// orthant: |g| direction vectors from Philox-driven normals.
std::vector<double> shell_samples(int d, double R, int n, uint64_t seed);

std::vector<double> make_shell_ladder(double r_lo, double r_hi, int count);

std::vector<double> log_spaced(double lo, double hi, int n);

}  // namespace qsdlab
