#include "qsdlab/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <Eigen/SparseLU>

#include "qsdlab/io.hpp"
#include "qsdlab/rng.hpp"

namespace qsdlab {

namespace {

// Graded 1D node list: geometric from delta with the given ratio until the
// remaining nodes can cover the rest of [x, R] uniformly at no coarser a
// spacing, then uniform. First node is exactly delta, last exactly R.
std::vector<double> build_coord(double delta, double R, int n, double rho) {
  const int nseg = n - 1;
  int m = 0;
  for (;; ++m) {
    const double xm = delta * std::pow(rho, m);
    if (xm >= R)
      throw std::invalid_argument(
          "build_grid: node count too small to reach R_cut at this ratio");
    const double h = xm * (rho - 1);
    const long bulk = long(std::ceil((R - xm) / h));
    if (m + bulk <= nseg) break;
  }
  std::vector<double> x(size_t(n), 0.0);
  for (int k = 0; k <= m; ++k) x[size_t(k)] = delta * std::pow(rho, k);
  const double xm = x[size_t(m)];
  const int nb = nseg - m;
  const double H = (R - xm) / nb;
  for (int j = 1; j <= nb; ++j) x[size_t(m + j)] = xm + H * j;
  x[size_t(n - 1)] = R;
  return x;
}

long checked_flat(const Grid& g, const std::vector<long>& k) {
  long idx = 0;
  for (int i = 0; i < g.d; ++i) idx += k[size_t(i)] * g.stride(i);
  return idx;
}

struct NodeFields {
  std::vector<double> e;                  // per interior node
  std::vector<std::vector<double>> conv;  // [coordinate][interior node]
  std::vector<std::vector<double>> fpv;
};

NodeFields evaluate_fields(const TransformedOperator& t, const Grid& g,
                           ExecPolicy pol, int threads) {
  const int d = g.d;
  // per-coordinate pullback of the full node lists
  std::vector<std::vector<double>> zeta(size_t(d), std::vector<double>{});
  for (int i = 0; i < d; ++i) {
    zeta[size_t(i)].resize(g.coords[size_t(i)].size());
    for (size_t j = 0; j < g.coords[size_t(i)].size(); ++j) {
      const double u = t.tables[size_t(i)].g.inverse(g.coords[size_t(i)][j]);
      zeta[size_t(i)][j] = u * u;
    }
  }
  NodeFields nf;
  nf.e.assign(size_t(g.total), 0.0);
  nf.conv.assign(size_t(d), std::vector<double>(size_t(g.total), 0.0));
  nf.fpv.assign(size_t(d), std::vector<double>(size_t(g.total), 0.0));
  for_range(pol, threads, g.total, [&](long idx) {
    std::vector<long> k(size_t(d), 0);
    long r = idx;
    for (int i = 0; i < d; ++i) {
      const long s = g.stride(i);
      k[size_t(i)] = r / s;
      r %= s;
    }
    std::vector<double> z(size_t(d), 0.0);
    for (int i = 0; i < d; ++i)
      z[size_t(i)] = zeta[size_t(i)][size_t(k[size_t(i)] + 1)];
    const FieldSample fs = field_sample_z(t, z);
    nf.e[size_t(idx)] = fs.e;
    for (int i = 0; i < d; ++i) {
      nf.conv[size_t(i)][size_t(idx)] = fs.conv[size_t(i)];
      nf.fpv[size_t(i)][size_t(idx)] = fs.fpvel[size_t(i)];
    }
  });
  return nf;
}

using Trip = Eigen::Triplet<double>;

void assemble_flavor(const Grid& g, const NodeFields& nf, OpFlavor flavor,
                     std::vector<Trip>& trips) {
  const int d = g.d;
  const bool divergence_form = flavor != OpFlavor::Forward;
  const auto& vel = (flavor == OpFlavor::FokkerPlanckX) ? nf.fpv : nf.conv;
  trips.clear();
  trips.reserve(size_t(g.total) * size_t(2 * d + 1));

  std::vector<long> k(size_t(d), 0);
  for (long idx = 0; idx < g.total; ++idx) {
    long r = idx;
    for (int i = 0; i < d; ++i) {
      const long s = g.stride(i);
      k[size_t(i)] = r / s;
      r %= s;
    }
    double diag = (flavor == OpFlavor::FokkerPlanckX)
                      ? 0.0
                      : -nf.e[size_t(idx)];
    for (int i = 0; i < d; ++i) {
      const auto& xs = g.coords[size_t(i)];
      const long j = k[size_t(i)] + 1;  // full-list position
      const double hm = xs[size_t(j)] - xs[size_t(j - 1)];
      const double hp = xs[size_t(j + 1)] - xs[size_t(j)];
      const long s = g.stride(i);
      const bool has_l = k[size_t(i)] > 0;
      const bool has_r = k[size_t(i)] + 1 < g.n_int[size_t(i)];

      // diffusion (1/2) d^2/dx_i^2 on the nonuniform stencil
      const double dl = 1.0 / (hm * (hm + hp));
      const double dr = 1.0 / (hp * (hm + hp));
      const double dc = -1.0 / (hm * hp);
      diag += dc;
      if (has_l) trips.emplace_back(idx, idx - s, dl);
      if (has_r) trips.emplace_back(idx, idx + s, dr);

      const double c = vel[size_t(i)][size_t(idx)];
      // centered first-derivative weights on the nonuniform stencil
      const double fl = -hp / (hm * (hm + hp));
      const double fc = (hp - hm) / (hm * hp);
      const double fr = hm / (hp * (hm + hp));

      if (!divergence_form) {
        // forward flavor carries -c . grad; with diffusion 1/2 the cell
        // Peclet number is 2|c|h, and centered keeps the off-diagonal
        // entries nonnegative exactly while it stays <= 2
        const double pe = 2.0 * std::abs(c) * std::max(hm, hp);
        if (pe <= 2.0) {
          diag += -c * fc;
          if (has_l) trips.emplace_back(idx, idx - s, -c * fl);
          if (has_r) trips.emplace_back(idx, idx + s, -c * fr);
        } else if (c > 0) {  // upwind: backward difference
          diag += -c / hm;
          if (has_l) trips.emplace_back(idx, idx - s, c / hm);
        } else {  // upwind: forward difference
          diag += c / hp;
          if (has_r) trips.emplace_back(idx, idx + s, -c / hp);
        }
      } else {
        // divergence form s * d/dx_i (c_i w) with neighbor velocities:
        // s = +1 for the adjoint, s = -1 for the Fokker-Planck flow
        const double sgn = (flavor == OpFlavor::FokkerPlanckX) ? -1.0 : 1.0;
        const double cl = has_l ? vel[size_t(i)][size_t(idx - s)] : c;
        const double cr = has_r ? vel[size_t(i)][size_t(idx + s)] : c;
        const double speed =
            std::max({std::abs(c), std::abs(cl), std::abs(cr)});
        const double pe = 2.0 * speed * std::max(hm, hp);
        if (pe <= 2.0) {
          diag += sgn * fc * c;
          if (has_l) trips.emplace_back(idx, idx - s, sgn * fl * cl);
          if (has_r) trips.emplace_back(idx, idx + s, sgn * fr * cr);
        } else {
          // donor-cell interface fluxes: s d/dx (c w) ~ (Phi_+ - Phi_-)/hbar
          // with Phi = V * (upwind value), V = s*c at the interface. The
          // donor choice keeps every off-diagonal entry nonnegative even
          // across sign changes of the velocity (Perron structure).
          const double hbar = 0.5 * (hm + hp);
          const double Vp = sgn * 0.5 * (c + cr);
          const double Vm = sgn * 0.5 * (cl + c);
          if (Vp < 0) {  // flow crosses the right interface from the right
            diag += Vp / hbar;
          } else if (has_r) {
            trips.emplace_back(idx, idx + s, Vp / hbar);
          }
          if (Vm < 0) {  // flow crosses the left interface from the left
            if (has_l) trips.emplace_back(idx, idx - s, -Vm / hbar);
          } else {
            diag += -Vm / hbar;
          }
        }
      }
    }
    trips.emplace_back(idx, idx, diag);
  }
}

Eigen::SparseMatrix<double> to_sparse(long n, std::vector<Trip>& trips) {
  Eigen::SparseMatrix<double> A(n, n);
  A.setFromTriplets(trips.begin(), trips.end());
  A.makeCompressed();
  return A;
}

std::string hash_grid(const Grid& g) {
  std::ostringstream os;
  os << g.d;
  for (const auto& c : g.coords)
    os << ":" << c.size() << "," << c.front() << "," << c.back();
  const std::string s = os.str();
  return hex64(fnv1a64(s.data(), s.size()));
}

}  // namespace

Grid build_grid(const GridSpec& spec, int d) {
  if (d >= 4)
    throw std::invalid_argument(
        "build_grid: tensor grids are infeasible for d >= 4 under the node "
        "budget; use the Monte Carlo path");
  if (d < 1) throw std::invalid_argument("build_grid: d must be >= 1");
  if (!(spec.delta_cut > 0 && spec.delta_cut <= 1e-2))
    throw std::invalid_argument("build_grid: delta_cut outside (0, 1e-2]");
  if (!(spec.R_cut >= 10))
    throw std::invalid_argument("build_grid: R_cut must be >= 10");
  if (!(spec.ratio >= 1.02 && spec.ratio <= 1.5))
    throw std::invalid_argument("build_grid: grading ratio outside [1.02,1.5]");
  Grid g;
  g.d = d;
  g.coords.resize(size_t(d));
  g.n_int.resize(size_t(d));
  g.total = 1;
  for (int i = 0; i < d; ++i) {
    const int n = spec.nodes_for(i);
    if (n < 64) throw std::invalid_argument("build_grid: need >= 64 nodes");
    g.coords[size_t(i)] =
        build_coord(spec.delta_cut, spec.R_cut, n, spec.ratio);
    g.n_int[size_t(i)] = n - 2;
    g.total *= g.n_int[size_t(i)];
    if (g.total > kNodeBudget)
      throw std::invalid_argument(
          "build_grid: interior node count exceeds the 4e6 budget");
  }
  return g;
}

std::vector<double> grid_weights(const Grid& g) {
  std::vector<std::vector<double>> w1(size_t(g.d), std::vector<double>{});
  for (int i = 0; i < g.d; ++i) {
    const auto& xs = g.coords[size_t(i)];
    w1[size_t(i)].resize(size_t(g.n_int[size_t(i)]));
    for (long k = 0; k < g.n_int[size_t(i)]; ++k)
      w1[size_t(i)][size_t(k)] =
          0.5 * (xs[size_t(k + 2)] - xs[size_t(k)]);
  }
  std::vector<double> w(size_t(g.total), 1.0);
  std::vector<long> k(size_t(g.d), 0);
  for (long idx = 0; idx < g.total; ++idx) {
    long r = idx;
    double v = 1;
    for (int i = 0; i < g.d; ++i) {
      const long s = g.stride(i);
      k[size_t(i)] = r / s;
      r %= s;
      v *= w1[size_t(i)][size_t(k[size_t(i)])];
    }
    w[size_t(idx)] = v;
  }
  return w;
}

DiscretizedOperator discretize(const TransformedOperator& t, const Grid& grid,
                               OpFlavor flavor, ExecPolicy pol, int threads) {
  if (!t.certified)
    throw std::logic_error(
        "discretize: transform has no certificate; run certify_beta0 first");
  for (int i = 0; i < grid.d; ++i)
    if (grid.coords[size_t(i)].front() < kQFloor)
      throw std::domain_error("discretize: grid node below q_floor");

  DiscretizedOperator op;
  op.grid = grid;
  op.flavor = flavor;
  op.t = &t;
  const NodeFields nf = evaluate_fields(t, grid, pol, threads);
  std::vector<Trip> trips;
  assemble_flavor(grid, nf, flavor, trips);
  op.A = to_sparse(grid.total, trips);

  if (flavor == OpFlavor::Adjoint) {
    std::vector<Trip> ftr;
    assemble_flavor(grid, nf, OpFlavor::Forward, ftr);
    const Eigen::SparseMatrix<double> F = to_sparse(grid.total, ftr);
    const Eigen::SparseMatrix<double> D =
        (op.A - Eigen::SparseMatrix<double>(F.transpose())).pruned();
    double mx = 0;
    for (int kk = 0; kk < D.outerSize(); ++kk)
      for (Eigen::SparseMatrix<double>::InnerIterator it(D, kk); it; ++it)
        mx = std::max(mx, std::abs(it.value()));
    op.diagnostics["adjoint_vs_transpose_max_abs"] = mx;
  }
  return op;
}

EigenPair principal_eigen(const DiscretizedOperator& op, double tol) {
  if (!(tol >= 1e-12))
    throw std::invalid_argument("principal_eigen: tol must be >= 1e-12");
  const long n = op.A.rows();
  Eigen::SparseMatrix<double> B = -op.A;
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  lu.compute(B);
  if (lu.info() != Eigen::Success)
    throw std::runtime_error("principal_eigen: sparse factorization failed");

  Eigen::VectorXd v = Eigen::VectorXd::Ones(n);
  v.normalize();
  EigenPair out;
  for (int it = 0; it < 500; ++it) {
    Eigen::VectorXd w = lu.solve(v);
    if (!w.allFinite())
      throw std::runtime_error("principal_eigen: inverse iteration produced "
                               "non-finite values");
    v = w.normalized();
    const Eigen::VectorXd Bv = B * v;
    const double lam = v.dot(Bv);
    const double res = (Bv - lam * v).norm();
    out.lambda = lam;
    out.residual = res;
    out.iterations = it + 1;
    if (res <= tol) break;
  }
  if (out.residual > tol)
    throw std::runtime_error(
        "principal_eigen: stagnation, residual " +
        std::to_string(out.residual) + " > tol after 500 iterations");

  Eigen::Index imax;
  v.cwiseAbs().maxCoeff(&imax);
  if (v[imax] < 0) v = -v;
  // Far-tail components can sit at roundoff relative to the peak; only a
  // genuinely negative excursion signals a broken Perron structure.
  const double vmax = v[imax];
  if (v.minCoeff() < -1e-8 * vmax)
    throw std::runtime_error(
        "principal_eigen: eigenfunction has non-positive components after "
        "sign fixing; the grid is too coarse for this operator");
  v = v.cwiseMax(0.0);
  out.v = v;
  return out;
}

SubSpectrum subdominant_spectrum(const DiscretizedOperator& op, int k,
                                 const EigenPair& principal) {
  const long n = op.A.rows();
  const int m = std::min<long>(std::max(30, 2 * k + 10), n);
  if (k < 1 || k > m - 2)
    throw std::invalid_argument(
        "subdominant_spectrum: k exceeds the subspace capacity");

  Eigen::SparseMatrix<double> B = -op.A;
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  lu.compute(B);
  if (lu.info() != Eigen::Success)
    throw std::runtime_error("subdominant_spectrum: factorization failed");

  // left principal eigenvector for oblique deflation of the lambda1 branch
  Eigen::VectorXd w1 = Eigen::VectorXd::Ones(n);
  w1.normalize();
  for (int it = 0; it < 200; ++it) {
    Eigen::VectorXd y = lu.transpose().solve(w1);
    y.normalize();
    const double res = (B.transpose() * y - principal.lambda * y).norm();
    w1 = y;
    if (res <= 1e-10) break;
  }
  const Eigen::VectorXd& v1 = principal.v;
  const double vw = w1.dot(v1);

  auto apply = [&](const Eigen::VectorXd& q) {
    Eigen::VectorXd y = lu.solve(q);
    y -= v1 * (w1.dot(y) / vw);
    return y;
  };

  Eigen::MatrixXd V(n, m + 1);
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(m + 1, m);
  Eigen::VectorXd q = Eigen::VectorXd::Ones(n);
  q -= v1 * (w1.dot(q) / vw);
  q.normalize();
  V.col(0) = q;
  int mm = m;
  for (int j = 0; j < m; ++j) {
    Eigen::VectorXd y = apply(V.col(j));
    for (int pass = 0; pass < 2; ++pass)
      for (int i = 0; i <= j; ++i) {
        const double h = V.col(i).dot(y);
        H(i, j) += h;
        y -= h * V.col(i);
      }
    const double hn = y.norm();
    H(j + 1, j) = hn;
    if (hn < 1e-12) {
      mm = j + 1;
      break;
    }
    V.col(j + 1) = y / hn;
  }

  Eigen::MatrixXd Hm = H.topLeftCorner(mm, mm);
  Eigen::EigenSolver<Eigen::MatrixXd> es(Hm);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("subdominant_spectrum: Hessenberg eigensolve "
                             "failed");
  const double hlast = (mm < m + 1) ? H(mm, mm - 1) : 0.0;

  struct Ritz {
    std::complex<double> mu;
    double res;
  };
  std::vector<Ritz> ritz;
  for (int j = 0; j < mm; ++j) {
    const std::complex<double> th = es.eigenvalues()[j];
    if (std::abs(th) < 1e-300) continue;
    const std::complex<double> mu = 1.0 / th;
    if (!(mu.real() >
          principal.lambda + std::max(1e-10, 1e-8 * principal.lambda)))
      continue;
    const double yl = std::abs(es.eigenvectors()(mm - 1, j));
    ritz.push_back({mu, std::abs(hlast) * yl / std::abs(th)});
  }
  std::sort(ritz.begin(), ritz.end(), [](const Ritz& a, const Ritz& b) {
    if (a.mu.real() != b.mu.real()) return a.mu.real() < b.mu.real();
    return std::abs(a.mu.imag()) < std::abs(b.mu.imag());
  });
  if (int(ritz.size()) < k) {
    std::ostringstream os;
    os << "subdominant_spectrum: only " << ritz.size() << " of " << k
       << " eigenvalues beyond lambda1 converged in a subspace of " << mm;
    throw std::runtime_error(os.str());
  }
  SubSpectrum out;
  for (int j = 0; j < k; ++j) {
    out.eigs.push_back(ritz[size_t(j)].mu);
    out.residuals.push_back(ritz[size_t(j)].res);
  }
  out.gap = out.eigs[0].real() - principal.lambda;
  return out;
}

QsdAssembly assemble_qsd(const TransformedOperator& t,
                         const Eigen::VectorXd& v1, const Grid& grid) {
  if (v1.size() != grid.total)
    throw std::invalid_argument("assemble_qsd: v1 size mismatch");
  if (v1.minCoeff() <= 0)
    throw std::invalid_argument("assemble_qsd: v1 must be positive");
  const int d = grid.d;
  const double beta = t.beta;

  // per-coordinate pullbacks and the 1D pieces of Q
  QsdAssembly out;
  out.z_coords.resize(size_t(d));
  std::vector<std::vector<double>> qlog(size_t(d), std::vector<double>{});
  for (int i = 0; i < d; ++i) {
    const auto& xs = grid.coords[size_t(i)];
    auto& zc = out.z_coords[size_t(i)];
    zc.resize(xs.size());
    qlog[size_t(i)].resize(xs.size());
    const double uref = t.tables[size_t(i)].g.inverse(1.0);
    const double laref = std::log(t.model->a[size_t(i)].a(uref * uref));
    for (size_t j = 0; j < xs.size(); ++j) {
      const double u = t.tables[size_t(i)].g.inverse(xs[j]);
      zc[j] = u * u;
      qlog[size_t(i)][j] =
          0.5 * (std::log(t.model->a[size_t(i)].a(zc[j])) - laref);
    }
  }

  const std::vector<double> w = grid_weights(grid);
  std::vector<double> raw(size_t(grid.total), 0.0);
  std::vector<double> rawz(size_t(grid.total), 0.0);
  std::vector<long> k(size_t(d), 0);
  std::vector<double> z(size_t(d), 0.0);
  double mass_x = 0;
  for (long idx = 0; idx < grid.total; ++idx) {
    long r = idx;
    double Q = 0, jac = 1;
    for (int i = 0; i < d; ++i) {
      const long s = grid.stride(i);
      k[size_t(i)] = r / s;
      r %= s;
      const size_t j = size_t(k[size_t(i)] + 1);
      Q += qlog[size_t(i)][j];
      z[size_t(i)] = out.z_coords[size_t(i)][j];
      jac /= std::sqrt(t.model->a[size_t(i)].a(z[size_t(i)]));
    }
    const double U = t.lyap->V(z.data());
    const double val = v1[idx] * std::exp(-0.5 * Q - beta * U);
    raw[size_t(idx)] = val;
    rawz[size_t(idx)] = val * jac;
    mass_x += w[size_t(idx)] * val;
  }
  // z-space trapezoid weights on the pulled-back (still tensor) nodes
  double mass_z = 0;
  {
    std::vector<std::vector<double>> wz1(size_t(d), std::vector<double>{});
    for (int i = 0; i < d; ++i) {
      const auto& zc = out.z_coords[size_t(i)];
      wz1[size_t(i)].resize(size_t(grid.n_int[size_t(i)]));
      for (long kk = 0; kk < grid.n_int[size_t(i)]; ++kk)
        wz1[size_t(i)][size_t(kk)] =
            0.5 * (zc[size_t(kk + 2)] - zc[size_t(kk)]);
    }
    for (long idx = 0; idx < grid.total; ++idx) {
      long r = idx;
      double v = 1;
      for (int i = 0; i < d; ++i) {
        const long s = grid.stride(i);
        v *= wz1[size_t(i)][size_t(r / s)];
        r %= s;
      }
      mass_z += v * rawz[size_t(idx)];
    }
  }
  if (!(mass_x > 0) || !(mass_z > 0))
    throw std::runtime_error("assemble_qsd: density mass is not positive");
  out.qsd_x = std::move(raw);
  out.qsd_z = std::move(rawz);
  for (auto& v : out.qsd_x) v /= mass_x;
  for (auto& v : out.qsd_z) v /= mass_z;
  out.normalization = mass_x;
  out.mass_x_raw = mass_x;
  out.mass_z_raw = mass_z;
  return out;
}

std::vector<std::vector<double>> sample_qsd_z(const QsdAssembly& q,
                                              const Grid& g, long n,
                                              std::uint64_t seed) {
  if (long(q.qsd_z.size()) != g.total)
    throw std::invalid_argument("sample_qsd_z: density/grid mismatch");
  // cumulative node masses in z (quadrature weight times density)
  std::vector<std::vector<double>> wz1(size_t(g.d), std::vector<double>{});
  for (int i = 0; i < g.d; ++i) {
    const auto& zc = q.z_coords[size_t(i)];
    wz1[size_t(i)].resize(size_t(g.n_int[size_t(i)]));
    for (long k = 0; k < g.n_int[size_t(i)]; ++k)
      wz1[size_t(i)][size_t(k)] = 0.5 * (zc[size_t(k + 2)] - zc[size_t(k)]);
  }
  std::vector<double> cum(size_t(g.total), 0.0);
  double acc = 0;
  for (long idx = 0; idx < g.total; ++idx) {
    long r = idx;
    double w = 1;
    for (int i = 0; i < g.d; ++i) {
      const long s = g.stride(i);
      w *= wz1[size_t(i)][size_t(r / s)];
      r %= s;
    }
    acc += w * q.qsd_z[size_t(idx)];
    cum[size_t(idx)] = acc;
  }
  if (!(acc > 0))
    throw std::runtime_error("sample_qsd_z: density has no mass");

  std::vector<std::vector<double>> out(size_t(n),
                                       std::vector<double>(size_t(g.d), 0.0));
  for (long k = 0; k < n; ++k) {
    const RngStream rs(seed, std::uint64_t(k));
    const double u = rs.uniform(0, 0) * acc;
    const long idx =
        std::lower_bound(cum.begin(), cum.end(), u) - cum.begin();
    long r = std::min(idx, g.total - 1);
    for (int i = 0; i < g.d; ++i) {
      const long s = g.stride(i);
      out[size_t(k)][size_t(i)] = q.z_coords[size_t(i)][size_t(r / s + 1)];
      r %= s;
    }
  }
  return out;
}

SemigroupResult semigroup_apply(const DiscretizedOperator& op,
                                const Eigen::VectorXd& f_tilde,
                                double t_final, TimeScheme scheme, double dt) {
  if (!(dt > 0)) throw std::invalid_argument("semigroup_apply: dt <= 0");
  if (!(t_final >= 0))
    throw std::invalid_argument("semigroup_apply: t_final < 0");
  SemigroupResult out;
  out.scheme = scheme;
  out.dt = dt;
  out.u = f_tilde;
  if (t_final == 0) return out;

  const Eigen::SparseMatrix<double>& A = op.A;
  const long n = A.rows();
  Eigen::SparseMatrix<double> I(n, n);
  I.setIdentity();

  auto run = [&](double step, long count) {
    const double c = (scheme == TimeScheme::CrankNicolson) ? 0.5 * step : step;
    Eigen::SparseMatrix<double> M = I - c * A;
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
    lu.compute(M);
    if (lu.info() != Eigen::Success)
      throw std::runtime_error("semigroup_apply: factorization failed");
    for (long s = 0; s < count; ++s) {
      Eigen::VectorXd rhs =
          (scheme == TimeScheme::CrankNicolson)
              ? Eigen::VectorXd(out.u + 0.5 * step * (A * out.u))
              : out.u;
      out.u = lu.solve(rhs);
      ++out.steps;
    }
  };

  const long full = long(std::floor(t_final / dt + 1e-12));
  const double rem = t_final - double(full) * dt;
  if (full > 0) run(dt, full);
  if (rem > 1e-12 * std::max(1.0, t_final)) run(rem, 1);
  return out;
}

json refinement_study(const TransformedOperator& t,
                      const std::vector<GridSpec>& ladder,
                      const std::string& quantity) {
  if (quantity != "lambda1" && quantity != "gap" && quantity != "qsd_l1")
    throw std::invalid_argument("refinement_study: unknown quantity " +
                                quantity);
  json rep;
  rep["quantity"] = quantity;
  std::vector<double> vals;
  std::vector<Grid> grids;
  std::vector<QsdAssembly> qsds;
  for (const auto& spec : ladder) {
    const Grid g = build_grid(spec, t.d());
    const DiscretizedOperator fwd = discretize(t, g, OpFlavor::Forward);
    const EigenPair pe = principal_eigen(fwd);
    if (quantity == "lambda1") {
      vals.push_back(pe.lambda);
    } else if (quantity == "gap") {
      const DiscretizedOperator adj = discretize(t, g, OpFlavor::Adjoint);
      const EigenPair pa = principal_eigen(adj);
      vals.push_back(subdominant_spectrum(adj, 1, pa).gap);
    } else {
      if (t.d() != 1)
        throw std::invalid_argument(
            "refinement_study: qsd_l1 ladder is implemented for d = 1 only");
      grids.push_back(g);
      qsds.push_back(assemble_qsd(t, pe.v, g));
    }
  }
  if (quantity == "qsd_l1") {
    // L1 distance between successive grids: linear interpolation of the
    // coarse density onto the finer grid
    for (size_t k = 0; k + 1 < qsds.size(); ++k) {
      const Grid& gc = grids[k];
      const Grid& gf = grids[k + 1];
      const auto wf = grid_weights(gf);
      double dist = 0;
      const auto& xc = gc.coords[0];
      const auto& qc = qsds[k].qsd_x;
      auto coarse_at = [&](double x) {
        if (x <= xc[1] || x >= xc[xc.size() - 2]) return 0.0;
        const size_t j =
            size_t(std::upper_bound(xc.begin(), xc.end(), x) - xc.begin()) -
            1;
        const double xl = xc[j], xr = xc[j + 1];
        const double vl = (j >= 1 && j - 1 < qc.size()) ? qc[j - 1] : 0.0;
        const double vr = (j < qc.size()) ? qc[j] : 0.0;
        return vl + (vr - vl) * (x - xl) / (xr - xl);
      };
      for (long i = 0; i < gf.total; ++i)
        dist += wf[size_t(i)] *
                std::abs(qsds[k + 1].qsd_x[size_t(i)] - coarse_at(gf.node(0, i)));
      vals.push_back(dist);
    }
  }
  rep["values"] = vals;
  std::vector<double> changes;
  if (quantity == "qsd_l1") {
    changes = vals;  // the values are already successive distances
  } else {
    for (size_t k = 0; k + 1 < vals.size(); ++k)
      changes.push_back(std::abs(vals[k + 1] - vals[k]) /
                        std::max(1e-300, std::abs(vals[k + 1])));
  }
  rep["changes"] = changes;
  rep["converged"] = !changes.empty() && changes.back() < kRichTol;
  if (quantity != "qsd_l1" && vals.size() >= 3) {
    const size_t K = vals.size();
    const double d1 = vals[K - 2] - vals[K - 3];
    const double d2 = vals[K - 1] - vals[K - 2];
    if (std::abs(d2 - d1) > 1e-300)
      rep["extrapolated"] = vals[K - 1] - d2 * d2 / (d2 - d1);
  }
  return rep;
}

SpectralResult compute_spectral_result(const TransformedOperator& t,
                                       const Grid& grid, int k_sub,
                                       double tol) {
  SpectralResult r;
  const DiscretizedOperator fwd = discretize(t, grid, OpFlavor::Forward);
  DiscretizedOperator adj = discretize(t, grid, OpFlavor::Adjoint);
  const EigenPair pf = principal_eigen(fwd, tol);
  const EigenPair pa = principal_eigen(adj, tol);
  const SubSpectrum sub = subdominant_spectrum(adj, k_sub, pa);

  r.lambda1 = pf.lambda;
  r.sub_eigs = sub.eigs;
  r.v1 = pf.v;
  r.gap = sub.eigs[0].real() - pf.lambda;
  r.qsd = assemble_qsd(t, pf.v, grid);
  r.normalization = r.qsd.normalization;

  const std::vector<double> w = grid_weights(grid);
  double pair_raw = 0;
  for (long i = 0; i < grid.total; ++i)
    pair_raw += w[size_t(i)] * pf.v[i] * pa.v[i];
  r.v1_star = pa.v * (r.normalization / pair_raw);

  r.residuals = {pf.residual, pa.residual};
  r.residuals.insert(r.residuals.end(), sub.residuals.begin(),
                     sub.residuals.end());
  r.diagnostics = adj.diagnostics;
  r.diagnostics["lambda1_forward"] = pf.lambda;
  r.diagnostics["lambda1_adjoint"] = pa.lambda;
  r.diagnostics["forward_adjoint_gap"] = std::abs(pf.lambda - pa.lambda);
  r.diagnostics["pairing_raw"] = pair_raw;
  r.diagnostics["interior_nodes"] = grid.total;
  return r;
}

json SpectralResult::to_json() const {
  json sub = json::array();
  for (const auto& e : sub_eigs) sub.push_back({e.real(), e.imag()});
  return json{{"lambda1", lambda1},
              {"sub_eigs", sub},
              {"gap", gap},
              {"residuals", residuals},
              {"normalization", normalization},
              {"diagnostics", diagnostics}};
}

void export_grid_csv(const Grid& g, const std::string& path,
                     const std::string& config_hash) {
  CsvWriter w(path, {"coordinate", "index", "x"},
              config_hash.empty() ? hash_grid(g) : config_hash);
  for (int i = 0; i < g.d; ++i)
    for (size_t j = 0; j < g.coords[size_t(i)].size(); ++j)
      w.row({double(i), double(j), g.coords[size_t(i)][j]});
}

void export_grid_function_csv(const Grid& g, const std::vector<double>& vals,
                              const std::string& value_name,
                              const std::string& path,
                              const std::string& config_hash) {
  if (long(vals.size()) != g.total)
    throw std::invalid_argument("export_grid_function_csv: size mismatch");
  std::vector<std::string> cols;
  for (int i = 0; i < g.d; ++i) cols.push_back("x" + std::to_string(i + 1));
  cols.push_back(value_name);
  CsvWriter w(path, cols, config_hash.empty() ? hash_grid(g) : config_hash);
  std::vector<double> row(size_t(g.d) + 1, 0.0);
  for (long idx = 0; idx < g.total; ++idx) {
    long r = idx;
    for (int i = 0; i < g.d; ++i) {
      const long s = g.stride(i);
      row[size_t(i)] = g.node(i, r / s);
      r %= s;
    }
    row[size_t(g.d)] = vals[size_t(idx)];
    w.row(row);
  }
}

void export_z_function_csv(const QsdAssembly& q, const Grid& g,
                           const std::string& path,
                           const std::string& config_hash) {
  std::vector<std::string> cols;
  for (int i = 0; i < g.d; ++i) cols.push_back("z" + std::to_string(i + 1));
  cols.push_back("qsd_z");
  CsvWriter w(path, cols, config_hash.empty() ? hash_grid(g) : config_hash);
  std::vector<double> row(size_t(g.d) + 1, 0.0);
  for (long idx = 0; idx < g.total; ++idx) {
    long r = idx;
    for (int i = 0; i < g.d; ++i) {
      const long s = g.stride(i);
      row[size_t(i)] = q.z_coords[size_t(i)][size_t(r / s + 1)];
      r %= s;
    }
    row[size_t(g.d)] = q.qsd_z[size_t(idx)];
    w.row(row);
  }
}

}  // namespace qsdlab
