#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace qsdlab {

// C^1 cubic Hermite interpolant of strictly increasing data with caller-
// supplied slopes (here: analytic ones), Fritsch-Carlson clamped so the piece
// stays monotone even where the data barely moves. Beyond the node range it
// extends linearly with the end slope, which keeps the inverse well-defined
// on the whole real line above the first node value.
class MonotoneHermite {
 public:
  MonotoneHermite() = default;
  MonotoneHermite(std::vector<double> x, std::vector<double> y,
                  std::vector<double> slope)
      : x_(std::move(x)), y_(std::move(y)), d_(std::move(slope)) {
    const size_t n = x_.size();
    if (n < 2 || y_.size() != n || d_.size() != n)
      throw std::invalid_argument("MonotoneHermite: need >=2 matching nodes");
    for (size_t k = 0; k + 1 < n; ++k) {
      if (!(x_[k + 1] > x_[k]))
        throw std::invalid_argument("MonotoneHermite: nodes not increasing");
      const double s = (y_[k + 1] - y_[k]) / (x_[k + 1] - x_[k]);
      if (!(s > 0.0))
        throw std::invalid_argument("MonotoneHermite: data not increasing");
      // Fritsch-Carlson: d/s in [0,3] guarantees monotonicity on the piece.
      d_[k] = std::clamp(d_[k], 0.0, 3.0 * s);
      d_[k + 1] = std::clamp(d_[k + 1], 0.0, 3.0 * s);
    }
  }

  double x_min() const { return x_.front(); }
  double x_max() const { return x_.back(); }
  double y_min() const { return y_.front(); }
  double y_max() const { return y_.back(); }
  const std::vector<double>& nodes() const { return x_; }
  const std::vector<double>& values() const { return y_; }

  double eval(double t) const {
    if (t <= x_.front()) return y_.front() + d_.front() * (t - x_.front());
    if (t >= x_.back()) return y_.back() + d_.back() * (t - x_.back());
    const size_t k = piece(t);
    const double h = x_[k + 1] - x_[k];
    const double s = (t - x_[k]) / h;
    const double s2 = s * s, s3 = s2 * s;
    return (2 * s3 - 3 * s2 + 1) * y_[k] + (s3 - 2 * s2 + s) * h * d_[k] +
           (-2 * s3 + 3 * s2) * y_[k + 1] + (s3 - s2) * h * d_[k + 1];
  }

  double deriv(double t) const {
    if (t <= x_.front()) return d_.front();
    if (t >= x_.back()) return d_.back();
    const size_t k = piece(t);
    const double h = x_[k + 1] - x_[k];
    const double s = (t - x_[k]) / h;
    return (6 * s * s - 6 * s) * (y_[k] - y_[k + 1]) / h +
           (3 * s * s - 4 * s + 1) * d_[k] + (3 * s * s - 2 * s) * d_[k + 1];
  }

  // Solves eval(t) = v by bracketed Newton with bisection fallback.
  double inverse(double v) const {
    double lo, hi;
    if (v <= y_.front()) {
      if (d_.front() <= 0.0)
        throw std::domain_error("MonotoneHermite: inverse below range");
      return x_.front() + (v - y_.front()) / d_.front();
    }
    if (v >= y_.back()) {
      if (d_.back() <= 0.0)
        throw std::domain_error("MonotoneHermite: inverse above range");
      return x_.back() + (v - y_.back()) / d_.back();
    }
    const size_t k = size_t(std::upper_bound(y_.begin(), y_.end(), v) -
                            y_.begin()) - 1;
    lo = x_[k];
    hi = x_[std::min(k + 1, x_.size() - 1)];
    double t = 0.5 * (lo + hi);
    const double tol = 1e-14 * std::max(1.0, std::abs(v));
    for (int it = 0; it < 100; ++it) {
      const double f = eval(t) - v;
      if (std::abs(f) <= tol) return t;
      if (f > 0)
        hi = t;
      else
        lo = t;
      const double df = deriv(t);
      double tn = (df > 0) ? t - f / df : lo - 1;
      if (!(tn > lo && tn < hi)) tn = 0.5 * (lo + hi);
      t = tn;
    }
    return t;
  }

 private:
  size_t piece(double t) const {
    return size_t(std::upper_bound(x_.begin(), x_.end(), t) - x_.begin()) - 1;
  }
  std::vector<double> x_, y_, d_;
};

}  // namespace qsdlab
