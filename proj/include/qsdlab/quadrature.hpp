#pragma once

#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <functional>

namespace qsdlab {

// Fixed-order Gauss-Legendre on one interval; used for table construction
// where the integrand is smooth and determinism matters.
template <class F>
double gauss31(const F& f, double a, double b) {
  return boost::math::quadrature::gauss<double, 31>::integrate(f, a, b);
}

// Adaptive Gauss-Kronrod for the partial integrals behind the tail
// heuristics.
template <class F>
double integrate(const F& f, double a, double b, double tol = 1e-10) {
  return boost::math::quadrature::gauss_kronrod<double, 31>::integrate(
      f, a, b, 12, tol);
}

// Two-cutoff power-law fit for improper-integral heuristics: computes
// partial integrals I(T1), I(T2) of f over [lo, T] and returns the fitted
// growth exponent log(I2/I1)/log(T2/T1). Values near 0 signal a convergent
// (or logarithmically divergent) tail; clear divergence shows up as a
// positive exponent.
struct TailFit {
  double I1 = 0, I2 = 0, T1 = 0, T2 = 0, exponent = 0;
};

template <class F>
TailFit tail_exponent_fit(const F& f, double lo, double T1, double T2) {
  TailFit r;
  r.T1 = T1;
  r.T2 = T2;
  r.I1 = integrate(f, lo, T1);
  r.I2 = r.I1 + integrate(f, T1, T2);
  if (r.I1 > 0 && r.I2 > 0)
    r.exponent = std::log(r.I2 / r.I1) / std::log(T2 / T1);
  else
    r.exponent = 0;
  return r;
}

}  // namespace qsdlab
