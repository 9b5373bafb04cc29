#include "qsdlab/transform.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "qsdlab/io.hpp"
#include "qsdlab/quadrature.hpp"
#include "qsdlab/rng.hpp"

namespace qsdlab {

namespace {

constexpr double kMarginFloor = 0.05;  // relative slack baked into the fit
constexpr double kMCap = 1e6;          // largest additive constant accepted

void check_dim(const TransformedOperator& t, const std::vector<double>& v) {
  if (int(v.size()) != t.d())
    throw std::invalid_argument("transform: point has wrong dimension");
}

void check_interior(const std::vector<double>& x) {
  for (double xi : x)
    if (!(xi >= kQFloor))
      throw std::domain_error(
          "transform: singular evaluation below the q_floor collar");
}

// Everything e_{beta,N} needs, reduced over coordinates at z = xi^{-1}(x).
struct PointTerms {
  double dU2 = 0;   // |grad U|^2            = sum a_i (d_i V)^2
  double lapU = 0;  // Laplacian U           = sum (a_i d_ii V + da_i d_i V/2)
  double pdU = 0;   // p . grad U            = b . grad V
  double sq = 0;    // sum (q_i^2 - q_i')    = sum (3 da^2/(16 a) - d2a/4)
  double pq = 0;    // p . q                 = sum b_i da_i/(4 a_i)
  double divp = 0;  // div p                 = sum (d_i b_i - b_i da_i/(2a_i))
};

PointTerms point_terms_z(const TransformedOperator& t,
                         const std::vector<double>& z) {
  const int d = t.d();
  const DiffusionModel& m = *t.model;
  std::vector<double> b(d), db(d), gV(d), hV(d);
  m.b(z.data(), b.data());
  m.drift_jac_diag(z.data(), db.data());
  t.lyap->gradV(z.data(), gV.data());
  t.lyap->hessdiagV(z.data(), hV.data());
  PointTerms o;
  for (int i = 0; i < d; ++i) {
    const double a = m.a[i].a(z[i]);
    const double da = m.a[i].da(z[i]);
    const double d2a = m.a[i].d2a(z[i]);
    o.dU2 += gV[i] * gV[i] * a;
    o.lapU += hV[i] * a + 0.5 * gV[i] * da;
    o.pdU += b[i] * gV[i];
    o.sq += 3 * da * da / (16 * a) - d2a / 4;
    o.pq += b[i] * da / (4 * a);
    o.divp += db[i] - b[i] * da / (2 * a);
  }
  return o;
}

double eval_e(const PointTerms& o, double beta, double invN) {
  return (invN - 0.5) * beta * o.lapU - 0.5 * beta * beta * o.dU2 -
         beta * o.pdU + 0.5 * o.sq - o.pq + invN * o.divp;
}

double neg_bgv_at_x(const TransformedOperator& t,
                    const std::vector<double>& x) {
  const std::vector<double> z = xi_inverse(t, x);
  return -bdotgradV(*t.model, *t.lyap, z.data());
}

double euclid(const std::vector<double>& x) {
  double s = 0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

}  // namespace

std::vector<XiTable> build_xi_tables(const DiffusionModel& model,
                                     const TableSpec& cache) {
  std::vector<XiTable> tables(size_t(model.d));

  for (int i = 0; i < model.d; ++i) {
    const auto& cd = model.a[size_t(i)];
    const double da0 = cd.da(0.0);
    // xi has an integrable square-root singularity exactly when a'(0) > 0;
    // probing the u-substituted integrand keeps the diagnosis numerical.
    auto gprime = [&cd](double u) { return 2 * u / std::sqrt(cd.a(u * u)); };
    if (!(da0 > 0) || !std::isfinite(gprime(1e-10)) ||
        gprime(1e-10) > 1e6 * gprime(1e-6) + 1e6)
      throw std::domain_error(
          "build_transform: quadrature for xi_" + std::to_string(i) +
          " does not converge near 0 (is a_i'(0) > 0?)");

    const int n = std::max(64, cache.nodes_for(i));
    const double zmax = cache.z_max_for(i);
    const double umax = std::sqrt(zmax);
    std::vector<double> u(size_t(n), 0.0), g(size_t(n), 0.0),
        dg(size_t(n), 0.0);
    u[0] = 0;
    const double ratio = std::pow(umax / cache.u_min, 1.0 / double(n - 2));
    for (int k = 1; k < n; ++k)
      u[size_t(k)] = cache.u_min * std::pow(ratio, double(k - 1));
    u[size_t(n - 1)] = umax;

    g[0] = 0;
    dg[0] = 2 / std::sqrt(da0);
    for (int k = 1; k < n; ++k) {
      const double piece = integrate(gprime, u[size_t(k - 1)], u[size_t(k)]);
      if (!std::isfinite(piece))
        throw std::domain_error(
            "build_transform: quadrature for xi_" + std::to_string(i) +
            " failed on [" + std::to_string(u[size_t(k - 1)]) + ", " +
            std::to_string(u[size_t(k)]) + "]");
      g[size_t(k)] = g[size_t(k - 1)] + piece;
      dg[size_t(k)] = gprime(u[size_t(k)]);
    }

    XiTable& tab = tables[size_t(i)];
    try {
      tab.g = MonotoneHermite(u, g, dg);
    } catch (const std::invalid_argument&) {
      throw std::domain_error(
          "build_transform: xi_" + std::to_string(i) +
          " table is not strictly increasing (is a_i > 0 on (0, inf)?)");
    }
    tab.u_max = umax;
    tab.z_max = zmax;
    tab.x_max = g[size_t(n - 1)];
  }
  return tables;
}

TransformedOperator build_transform(const DiffusionModel& model,
                                    const LyapunovSpec& lyap,
                                    const TableSpec& cache) {
  TransformedOperator t;
  t.model = &model;
  t.lyap = &lyap;
  t.tables = build_xi_tables(model, cache);

  // R0: smallest shell radius (in x) with -(b . grad V) o xi^{-1} > 0 at
  // every probe, doubled. Without one the far-field branches stay disabled
  // and only certify_beta0 can complain.
  double xmax_min = t.tables[0].x_max;
  for (const auto& tab : t.tables) xmax_min = std::min(xmax_min, tab.x_max);
  const auto ladder = make_shell_ladder(1.0, 0.45 * xmax_min, 16);
  for (size_t k = 0; k < ladder.size(); ++k) {
    const auto pts = shell_samples(model.d, ladder[k], 200, 0xA1FA + k);
    bool all_pos = true;
    std::vector<double> x(size_t(model.d));
    for (int p = 0; p < 200 && all_pos; ++p) {
      for (int i = 0; i < model.d; ++i)
        x[size_t(i)] = pts[size_t(p) * model.d + i];
      if (!(neg_bgv_at_x(t, x) > 0)) all_pos = false;
    }
    if (all_pos) {
      t.alpha_config.R0 = 2 * ladder[k];
      t.alpha_config.far_field = true;
      break;
    }
  }
  return t;
}

std::vector<double> xi(const TransformedOperator& t,
                       const std::vector<double>& z) {
  check_dim(t, z);
  std::vector<double> x(z.size());
  for (size_t i = 0; i < z.size(); ++i) {
    const XiTable& tab = t.tables[i];
    if (!(z[i] >= 0) || z[i] > tab.z_max)
      throw std::domain_error("xi: point outside the table extent");
    x[i] = (z[i] == 0) ? 0.0 : tab.g.eval(std::sqrt(z[i]));
  }
  return x;
}

std::vector<double> xi_inverse(const TransformedOperator& t,
                               const std::vector<double>& x) {
  check_dim(t, x);
  std::vector<double> z(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const XiTable& tab = t.tables[i];
    if (!(x[i] >= 0) || x[i] > tab.x_max)
      throw std::domain_error("xi_inverse: point outside the table extent");
    const double u = (x[i] == 0) ? 0.0 : tab.g.inverse(x[i]);
    z[i] = u * u;
  }
  return z;
}

std::vector<double> drift_p(const TransformedOperator& t,
                            const std::vector<double>& x) {
  check_dim(t, x);
  check_interior(x);
  const std::vector<double> z = xi_inverse(t, x);
  std::vector<double> b(z.size()), p(z.size());
  t.model->b(z.data(), b.data());
  for (size_t i = 0; i < z.size(); ++i)
    p[i] = b[i] / std::sqrt(t.model->a[i].a(z[i]));
  return p;
}

std::vector<double> killing_q(const TransformedOperator& t,
                              const std::vector<double>& x) {
  check_dim(t, x);
  check_interior(x);
  const std::vector<double> z = xi_inverse(t, x);
  std::vector<double> q(z.size());
  for (size_t i = 0; i < z.size(); ++i)
    q[i] = t.model->a[i].da(z[i]) / (4 * std::sqrt(t.model->a[i].a(z[i])));
  return q;
}

double potential_U(const TransformedOperator& t,
                   const std::vector<double>& x) {
  check_dim(t, x);
  check_interior(x);
  const std::vector<double> z = xi_inverse(t, x);
  return t.lyap->V(z.data());
}

double log_density_Q(const TransformedOperator& t,
                     const std::vector<double>& x) {
  check_dim(t, x);
  check_interior(x);
  const std::vector<double> z = xi_inverse(t, x);
  double Q = 0;
  for (size_t i = 0; i < z.size(); ++i) {
    const double zref =
        t.tables[i].g.inverse(1.0);  // xi_i^{-1}(1) in u units
    Q += 0.5 * (std::log(t.model->a[i].a(z[i])) -
                std::log(t.model->a[i].a(zref * zref)));
  }
  return Q;
}

double weight_alpha(const TransformedOperator& t,
                    const std::vector<double>& x) {
  check_dim(t, x);
  for (double v : x)
    if (!(v > 0)) throw std::domain_error("weight_alpha: point not interior");
  const AlphaConfig& ac = t.alpha_config;
  bool collar = false;
  for (double v : x)
    if (v <= ac.delta0) collar = true;
  const bool far = ac.far_field && euclid(x) > ac.R0;

  double s = 0;
  if (far) {
    s = neg_bgv_at_x(t, x);
    if (!(s > 0))
      throw std::domain_error(
          "weight_alpha: -(b . grad V) is not positive at |x| = " +
          std::to_string(euclid(x)) +
          "; R0 = " + std::to_string(ac.R0) +
          " is too small for this model, rebuild with a larger R0");
  }
  if (collar) {
    double c = 0;
    for (double v : x) c += std::max(1.0 / (v * v), 1.0);
    return far ? c + s : c;
  }
  return far ? s : 1.0;
}

double zeroth_order_e(const TransformedOperator& t, double beta, double N,
                      const std::vector<double>& x) {
  if (!(beta > 0)) throw std::invalid_argument("zeroth_order_e: beta <= 0");
  if (!(N >= 1)) throw std::invalid_argument("zeroth_order_e: N < 1");
  check_dim(t, x);
  check_interior(x);
  const std::vector<double> z = xi_inverse(t, x);
  const double invN = std::isinf(N) ? 0.0 : 1.0 / N;
  return eval_e(point_terms_z(t, z), beta, invN);
}

FieldSample field_sample_z(const TransformedOperator& t,
                           const std::vector<double>& z) {
  const int d = t.d();
  FieldSample fs;
  fs.conv.resize(size_t(d));
  fs.fpvel.resize(size_t(d));
  std::vector<double> b(size_t(d), 0.0), gV(size_t(d), 0.0);
  t.model->b(z.data(), b.data());
  t.lyap->gradV(z.data(), gV.data());
  for (int i = 0; i < d; ++i) {
    const double a = t.model->a[size_t(i)].a(z[size_t(i)]);
    const double da = t.model->a[size_t(i)].da(z[size_t(i)]);
    const double sq = std::sqrt(a);
    fs.conv[size_t(i)] = b[size_t(i)] / sq + t.beta * gV[size_t(i)] * sq;
    fs.fpvel[size_t(i)] = b[size_t(i)] / sq - da / (4 * sq);
  }
  fs.e = eval_e(point_terms_z(t, z), t.beta, 1.0);
  return fs;
}

LiouvilleCertificate certify_beta0(TransformedOperator& t,
                                   const SamplePlan& plan, ExecPolicy pol,
                                   int threads) {
  const int d = t.d();
  double xmax_min = t.tables[0].x_max;
  for (const auto& tab : t.tables) xmax_min = std::min(xmax_min, tab.x_max);

  // Sample cloud in x: log box plus a shell ladder reaching the far field.
  std::vector<double> pts =
      box_samples_log(d, plan.n_box, plan.box_lo, plan.box_hi, 32);
  std::vector<int> shell_of(size_t(plan.n_box), -1);
  std::vector<double> radii = plan.shell_radii;
  if (radii.empty()) {
    const double hi = 0.9 * xmax_min;
    const double lo = std::min(2.0, 0.3 * hi);
    radii = make_shell_ladder(lo, hi, 12);
  }
  for (size_t k = 0; k < radii.size(); ++k) {
    const auto sh = shell_samples(d, radii[k], plan.n_shell,
                                  plan.seed + 101 * (k + 1));
    pts.insert(pts.end(), sh.begin(), sh.end());
    shell_of.insert(shell_of.end(), size_t(plan.n_shell), int(k));
  }
  const long nsamp = long(pts.size()) / d;

  // Geometry pass: one PointTerms and one alpha per sample, parallel with
  // per-slot writes so the reduction below is order-independent.
  std::vector<PointTerms> terms{size_t(nsamp)};
  std::vector<double> alpha(size_t(nsamp), 0.0);
  std::vector<std::string> errs{size_t(nsamp)};
  for_range(pol, threads, nsamp, [&](long j) {
    std::vector<double> x(size_t(d), 0.0);
    for (int i = 0; i < d; ++i) x[size_t(i)] = pts[size_t(j) * d + i];
    try {
      terms[size_t(j)] = point_terms_z(t, xi_inverse(t, x));
      alpha[size_t(j)] = weight_alpha(t, x);
    } catch (const std::exception& e) {
      errs[size_t(j)] = e.what();
    }
  });
  for (long j = 0; j < nsamp; ++j)
    if (!errs[size_t(j)].empty())
      throw std::domain_error("certify_beta0: sample " + std::to_string(j) +
                              ": " + errs[size_t(j)]);

  std::vector<double> betas;
  for (int k = 0; k < 25; ++k)
    betas.push_back(std::pow(2.0, -6.0 + 12.0 * k / 24.0));
  std::vector<double> cgrid;
  for (int k = 0; k <= 60; ++k)
    cgrid.push_back(std::pow(2.0, -12.0 + 20.0 * k / 60.0));

  json search_log = json::array();
  double best_score = -1, best_beta = 0, best_M = 0, best_C = 0;
  double diag_worst_need = std::numeric_limits<double>::infinity();
  long diag_sample = -1;
  std::vector<double> m(size_t(nsamp), 0.0);

  for (double beta : betas) {
    for (long j = 0; j < nsamp; ++j)
      m[size_t(j)] =
          std::min(eval_e(terms[size_t(j)], beta, 1.0),
                   eval_e(terms[size_t(j)], beta, 0.0));

    json entry{{"beta", beta}};

    // Far-field divergence guard: if the shell-minimum of m/alpha is
    // negative and still falling on the outermost shells, no additive M
    // can rescue the bound past the sampled horizon; reject this beta.
    {
      std::vector<double> lo(radii.size(),
                             std::numeric_limits<double>::infinity());
      for (long j = 0; j < nsamp; ++j)
        if (shell_of[size_t(j)] >= 0) {
          auto& v = lo[size_t(shell_of[size_t(j)])];
          v = std::min(v, m[size_t(j)] / alpha[size_t(j)]);
        }
      const size_t K = lo.size();
      if (K >= 3 && lo[K - 1] < 0 && lo[K - 1] < lo[K - 2] &&
          lo[K - 2] < 0 && lo[K - 2] < lo[K - 3] && lo[K - 3] < 0) {
        entry["outcome"] = "tail-divergence";
        entry["shell_tail"] = {lo[K - 3], lo[K - 2], lo[K - 1]};
        search_log.push_back(entry);
        continue;
      }
    }

    double loc_score = -1, loc_M = 0, loc_C = 0;
    for (double C : cgrid) {
      double need = 0;
      long worst = -1;
      for (long j = 0; j < nsamp; ++j) {
        const double nj = (C + kMarginFloor) * alpha[size_t(j)] - m[size_t(j)];
        if (nj > need) {
          need = nj;
          worst = j;
        }
      }
      if (need < diag_worst_need && worst >= 0) {
        diag_worst_need = need;
        diag_sample = worst;
      }
      if (need > kMCap) continue;
      const double M = std::max(need, 1e-9);
      const double score = C / (1 + M);
      if (score > loc_score) {
        loc_score = score;
        loc_M = M;
        loc_C = C;
      }
    }
    if (loc_score < 0) {
      entry["outcome"] = "M-exceeds-cap";
      search_log.push_back(entry);
      continue;
    }
    entry["outcome"] = "certified";
    entry["M"] = loc_M;
    entry["C_star"] = loc_C;
    entry["score"] = loc_score;
    search_log.push_back(entry);
    if (loc_score > best_score) {
      best_score = loc_score;
      best_beta = beta;
      best_M = loc_M;
      best_C = loc_C;
    }
  }

  if (best_score < 0) {
    std::ostringstream os;
    os << "certify_beta0: no beta on the ladder certifies; smallest additive "
          "constant needed anywhere was "
       << diag_worst_need << " against a cap of " << kMCap;
    if (!t.alpha_config.far_field)
      os << "; no shell radius with -(b . grad V) > 0 was found, so the "
            "model shows no confinement in the sampled window";
    if (diag_sample >= 0) {
      os << "; binding sample x = (";
      for (int i = 0; i < d; ++i)
        os << (i ? ", " : "") << pts[size_t(diag_sample) * d + i];
      os << ")";
    }
    throw std::runtime_error(os.str());
  }

  LiouvilleCertificate cert;
  cert.beta0 = best_beta;
  cert.M = best_M;
  cert.C_star = best_C;
  cert.sample_count = nsamp;
  cert.search_log = std::move(search_log);
  double mm = std::numeric_limits<double>::infinity();
  for (long j = 0; j < nsamp; ++j) {
    const double e1 = eval_e(terms[size_t(j)], best_beta, 1.0);
    const double ei = eval_e(terms[size_t(j)], best_beta, 0.0);
    const double a = alpha[size_t(j)];
    mm = std::min(mm, (std::min(e1, ei) + cert.M - cert.C_star * a) / a);
  }
  cert.min_margin = mm;
  t.beta = best_beta;
  t.certified = true;
  return cert;
}

CheckReport boundary_constant_check(const TransformedOperator& t) {
  CheckReport rep;
  rep.check = "boundary_constant";
  const double xs[3] = {1e-2, 1e-3, 1e-4};
  for (int i = 0; i < t.d(); ++i) {
    double v[3];
    for (int k = 0; k < 3; ++k) {
      const double u = t.tables[size_t(i)].g.inverse(xs[k]);
      const double z = u * u;
      const double a = t.model->a[size_t(i)].a(z);
      const double da = t.model->a[size_t(i)].da(z);
      const double d2a = t.model->a[size_t(i)].d2a(z);
      v[k] = xs[k] * xs[k] * (3 * da * da / (16 * a) - d2a / 4);
      rep.stats["bconst-i" + std::to_string(i) + "-x" + std::to_string(k)] =
          v[k];
    }
    const std::string tag = "-i" + std::to_string(i);
    rep.add("bconst-close" + tag, 1e-2 - std::abs(v[1] - 0.75), {1e-3});
    rep.add("bconst-trend-a" + tag,
            std::abs(v[0] - 0.75) - std::abs(v[1] - 0.75) + 1e-12);
    rep.add("bconst-trend-b" + tag,
            std::abs(v[1] - 0.75) - std::abs(v[2] - 0.75) + 1e-12);
  }
  rep.note("report-only: the limit constant is 3/4 whenever a_i'(0) > 0 and "
           "a_i''(0) is finite");
  rep.finalize();
  return rep;
}

json LiouvilleCertificate::to_json() const {
  return json{{"beta0", beta0},
              {"M", M},
              {"C_star", C_star},
              {"sample_count", sample_count},
              {"min_margin", min_margin},
              {"search_log", search_log}};
}

json transform_metadata(const TransformedOperator& t) {
  json tabs = json::array();
  for (const auto& tab : t.tables)
    tabs.push_back({{"nodes", tab.g.nodes().size()},
                    {"z_max", tab.z_max},
                    {"x_max", tab.x_max}});
  return json{{"beta", t.beta},
              {"delta0", t.alpha_config.delta0},
              {"R0", std::min(t.alpha_config.R0, 1e300)},
              {"far_field", t.alpha_config.far_field},
              {"tables", tabs}};
}

void export_xi_csv(const TransformedOperator& t, int coord,
                   const std::string& path,
                   const std::string& config_hash) {
  const XiTable& tab = t.tables.at(size_t(coord));
  const std::string meta = transform_metadata(t).dump();
  CsvWriter w(path, {"z", "x"},
              config_hash.empty() ? hex64(fnv1a64(meta.data(), meta.size()))
                                  : config_hash);
  const auto& u = tab.g.nodes();
  const auto& g = tab.g.values();
  for (size_t k = 0; k < u.size(); ++k) w.row({u[k] * u[k], g[k]});
}

}  // namespace qsdlab
