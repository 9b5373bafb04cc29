#include "qsdlab/montecarlo.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "qsdlab/interp.hpp"
#include "qsdlab/io.hpp"
#include "qsdlab/rng.hpp"

namespace qsdlab {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct StepPlan {
  double dt = 0, rem = 0, t_final = 0;
  long n_full = 0;
  std::vector<long> cp_steps;    // ascending; remainder step index = n_full+1
  std::vector<double> cp_times;  // matching times

  long total_steps() const { return n_full + (rem > 0 ? 1 : 0); }
  double time_of(long s) const {
    return (s <= n_full) ? double(s) * dt : t_final;
  }
};

StepPlan make_plan(double dt, double t_final,
                   const std::vector<double>& cp_times) {
  StepPlan plan;
  plan.dt = dt;
  plan.t_final = t_final;
  plan.n_full = long(std::floor(t_final / dt + 1e-9));
  const double rem = t_final - double(plan.n_full) * dt;
  plan.rem = (rem > 1e-9 * std::max(1.0, t_final)) ? rem : 0.0;

  std::vector<long> steps;
  if (cp_times.empty()) {
    const long S = plan.total_steps();
    for (int j = 0; j <= 50; ++j)
      steps.push_back(long(std::llround(double(j) * double(S) / 50.0)));
  } else {
    for (double t : cp_times) {
      if (t < -1e-12 || t > t_final * (1 + 1e-9) + 1e-12)
        throw std::invalid_argument(
            "simulate_paths: checkpoint time outside the horizon");
      if (plan.rem > 0 && std::abs(t - t_final) <= 1e-9 * std::max(1.0, t)) {
        steps.push_back(plan.n_full + 1);
        continue;
      }
      const long k = std::llround(t / dt);
      if (std::abs(double(k) * dt - t) > 1e-9 * std::max(1.0, t))
        throw std::invalid_argument(
            "simulate_paths: checkpoint times must land on step boundaries");
      steps.push_back(k);
    }
  }
  std::sort(steps.begin(), steps.end());
  steps.erase(std::unique(steps.begin(), steps.end()), steps.end());
  plan.cp_steps = steps;
  for (long s : steps) plan.cp_times.push_back(plan.time_of(s));
  return plan;
}

// Reverse tables and absorption thresholds for the transformed-X scheme.
struct XEngine {
  std::vector<MonotoneHermite> rev;  // x -> u = sqrt(z)
  std::vector<double> xeps;          // xi(abs_eps): absorption level in x
  double z_of(int i, double x) const {
    const double u = rev[size_t(i)].eval(x);
    return u * u;
  }
};

XEngine make_x_engine(const DiffusionModel& model, const TableSpec& spec) {
  const std::vector<XiTable> tables = build_xi_tables(model, spec);
  XEngine eng;
  for (int i = 0; i < model.d; ++i) {
    const auto& tab = tables[size_t(i)];
    const auto& u = tab.g.nodes();
    const auto& g = tab.g.values();
    std::vector<double> inv_slope(u.size(), 0.0);
    const auto& cd = model.a[size_t(i)];
    inv_slope[0] = std::sqrt(cd.da(0.0)) / 2;
    for (size_t k = 1; k < u.size(); ++k)
      inv_slope[k] = std::sqrt(cd.a(u[k] * u[k])) / (2 * u[k]);
    eng.rev.emplace_back(g, u, inv_slope);
    eng.xeps.push_back(tab.g.eval(std::sqrt(kAbsEps)));
  }
  return eng;
}

void validate_init_point(const std::vector<double>& z, int d) {
  if (int(z.size()) != d)
    throw std::invalid_argument("simulate_paths: init dimension mismatch");
  for (double v : z)
    if (!(v > kAbsEps))
      throw std::invalid_argument(
          "simulate_paths: init outside the orthant (strictly interior "
          "points required)");
}

const std::vector<double>& init_for(const InitSpec& init, long p) {
  if (init.samples.empty()) return init.point;
  return init.samples[size_t(p) % init.samples.size()];
}

// One Euler full-truncation step in z; returns true when the particle is
// absorbed by this step. Negative excursions are clipped to the facet.
bool step_euler_z(const DiffusionModel& model, std::vector<double>& z,
                  std::vector<double>& b, const double* w, double h) {
  const int d = model.d;
  std::vector<double> zp(z);
  for (auto& v : zp) v = std::max(v, 0.0);
  model.b(zp.data(), b.data());
  const double sh = std::sqrt(h);
  bool absorbed = false;
  for (int i = 0; i < d; ++i) {
    const double diff = std::sqrt(model.a[size_t(i)].a(zp[size_t(i)]));
    double zn = z[size_t(i)] + b[size_t(i)] * h + diff * sh * w[i];
    if (zn <= kAbsEps) {
      absorbed = true;
      zn = std::max(zn, 0.0);
    }
    z[size_t(i)] = zn;
  }
  return absorbed;
}

// One step of dX = (p - q) dt + dW; absorption on reaching xi(abs_eps) or on
// a drift increment too large for the step (the -1/(2x) singularity).
bool step_transformed_x(const DiffusionModel& model, const XEngine& eng,
                        std::vector<double>& x, std::vector<double>& z,
                        std::vector<double>& b, const double* w, double h) {
  const int d = model.d;
  for (int i = 0; i < d; ++i) z[size_t(i)] = eng.z_of(i, x[size_t(i)]);
  model.b(z.data(), b.data());
  const double sh = std::sqrt(h);
  for (int i = 0; i < d; ++i) {
    const double a = model.a[size_t(i)].a(z[size_t(i)]);
    const double sq = std::sqrt(a);
    const double drift =
        b[size_t(i)] / sq - model.a[size_t(i)].da(z[size_t(i)]) / (4 * sq);
    if (std::abs(drift) * h > x[size_t(i)] / 2) return true;
    x[size_t(i)] += drift * h + sh * w[i];
  }
  for (int i = 0; i < d; ++i)
    if (x[size_t(i)] <= eng.xeps[size_t(i)]) return true;
  return false;
}

bool finite_state(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

struct Slots {
  std::vector<unsigned char> alive;  // [cp * n + p]
  std::vector<double> states;        // [(cp * n + p) * d]
  std::vector<double> abs_time;      // [p]
  std::vector<std::string> err;      // [p], empty = ok
};

EnsembleResult assemble(const DiffusionModel& model, const StepPlan& plan,
                        long n, std::uint64_t seed, SdeScheme scheme,
                        bool fv, const Slots& slots,
                        const std::vector<double>* fv_survival) {
  for (long p = 0; p < n; ++p)
    if (!slots.err[size_t(p)].empty())
      throw std::runtime_error("simulate_paths: " + slots.err[size_t(p)]);

  EnsembleResult ens;
  ens.d = model.d;
  ens.n_particles = n;
  ens.dt = plan.dt;
  ens.scheme = scheme;
  ens.seed = seed;
  ens.fleming_viot = fv;
  ens.absorption_times = slots.abs_time;
  const int d = model.d;
  const size_t ncp = plan.cp_steps.size();
  ens.checkpoints.resize(ncp);
  for (size_t c = 0; c < ncp; ++c) {
    Checkpoint& cp = ens.checkpoints[c];
    cp.time = plan.cp_times[c];
    for (long p = 0; p < n; ++p) {
      if (!slots.alive[c * size_t(n) + size_t(p)]) continue;
      cp.ids.push_back(p);
      const double* st = &slots.states[(c * size_t(n) + size_t(p)) * size_t(d)];
      cp.states.insert(cp.states.end(), st, st + d);
    }
    cp.survival = fv ? (*fv_survival)[c]
                     : double(cp.ids.size()) / double(n);
  }
  long absorbed = 0;
  for (double t : slots.abs_time)
    if (std::isfinite(t)) ++absorbed;
  ens.metadata = json{
      {"seed", seed},
      {"dt", plan.dt},
      {"t_final", plan.t_final},
      {"n_particles", n},
      {"d", d},
      {"scheme", scheme == SdeScheme::EulerFullTruncation
                     ? "euler-full-truncation"
                     : "transformed-x"},
      {"fleming_viot", fv},
      {"n_checkpoints", ncp},
      {"absorbed_fraction", double(absorbed) / double(n)}};
  if (fv)
    ens.metadata["fleming_viot_note"] =
        "branching resampling keeps the population constant; conditioned "
        "means carry an O(1/N) bias at finite population size";
  return ens;
}

}  // namespace

const Checkpoint& EnsembleResult::at_time(double t) const {
  for (const auto& cp : checkpoints)
    if (std::abs(cp.time - t) <= 1e-9 * std::max(1.0, std::abs(t))) return cp;
  throw std::invalid_argument("no checkpoint at t = " + std::to_string(t));
}

EnsembleResult simulate_paths(const DiffusionModel& model,
                              const InitSpec& init, double dt, double t_final,
                              long n_particles, std::uint64_t seed,
                              SdeScheme scheme, const SimOptions& opt) {
  if (!(dt > 0) || dt > kDtMax)
    throw std::invalid_argument("simulate_paths: dt must lie in (0, 1e-2]");
  if (!(t_final >= 0))
    throw std::invalid_argument("simulate_paths: t_final < 0");
  if (n_particles < 1)
    throw std::invalid_argument("simulate_paths: need at least one particle");
  const int d = model.d;
  if (init.samples.empty()) {
    validate_init_point(init.point, d);
  } else {
    for (const auto& s : init.samples) validate_init_point(s, d);
  }

  const StepPlan plan = make_plan(dt, t_final, opt.checkpoint_times);
  const size_t ncp = plan.cp_steps.size();
  const long n = n_particles;

  XEngine eng;
  if (scheme == SdeScheme::TransformedX) eng = make_x_engine(model, opt.tables);

  Slots slots;
  slots.alive.assign(ncp * size_t(n), 0);
  slots.states.assign(ncp * size_t(n) * size_t(d), 0.0);
  slots.abs_time.assign(size_t(n), kInf);
  slots.err.assign(size_t(n), std::string{});

  if (!opt.fleming_viot) {
    for_range(opt.policy, opt.threads, n, [&](long p) {
      try {
        std::vector<double> z = init_for(init, p);
        std::vector<double> x(size_t(d), 0.0);
        if (scheme == SdeScheme::TransformedX)
          for (int i = 0; i < d; ++i)
            x[size_t(i)] = eng.rev[size_t(i)].inverse(std::sqrt(z[size_t(i)]));
        std::vector<double> b(size_t(d), 0.0), w(size_t(d), 0.0);
        RngStream rs(seed, std::uint64_t(p));
        bool dead = false;
        size_t c = 0;
        auto record = [&](size_t cp_idx) {
          if (dead) return;
          slots.alive[cp_idx * size_t(n) + size_t(p)] = 1;
          double* st =
              &slots.states[(cp_idx * size_t(n) + size_t(p)) * size_t(d)];
          std::copy(z.begin(), z.end(), st);
        };
        while (c < ncp && plan.cp_steps[c] == 0) record(c), ++c;
        const long S = plan.total_steps();
        for (long s = 1; s <= S && c < ncp; ++s) {
          if (!dead) {
            const double h = (s <= plan.n_full) ? dt : plan.rem;
            rs.normals(std::uint32_t(s), w.data(), d);
            bool absorbed;
            if (scheme == SdeScheme::TransformedX) {
              absorbed = step_transformed_x(model, eng, x, z, b, w.data(), h);
              if (!absorbed)
                for (int i = 0; i < d; ++i)
                  z[size_t(i)] = eng.z_of(i, x[size_t(i)]);
            } else {
              absorbed = step_euler_z(model, z, b, w.data(), h);
            }
            if (!absorbed && (!finite_state(z) || !finite_state(x))) {
              std::ostringstream os;
              os << "particle " << p << " produced a non-finite state at step "
                 << s;
              slots.err[size_t(p)] = os.str();
              return;
            }
            if (absorbed) {
              slots.abs_time[size_t(p)] = plan.time_of(s);
              dead = true;
            }
          }
          while (c < ncp && plan.cp_steps[c] == s) record(c), ++c;
        }
      } catch (const std::exception& ex) {
        slots.err[size_t(p)] = ex.what();
      }
    });
    return assemble(model, plan, n, seed, scheme, false, slots, nullptr);
  }

  // Fleming-Viot: step-synchronous branching. The move phase is parallel with
  // per-particle streams; deaths are resolved serially in particle-index
  // order, each using the dying particle's own uniform, so the result does
  // not depend on the worker count.
  std::vector<double> zst(size_t(n) * size_t(d), 0.0);
  std::vector<double> xst;
  if (scheme == SdeScheme::TransformedX) xst.assign(size_t(n) * size_t(d), 0.0);
  for (long p = 0; p < n; ++p) {
    const auto& z0 = init_for(init, p);
    std::copy(z0.begin(), z0.end(), zst.begin() + size_t(p) * size_t(d));
    if (scheme == SdeScheme::TransformedX)
      for (int i = 0; i < d; ++i)
        xst[size_t(p) * size_t(d) + size_t(i)] =
            eng.rev[size_t(i)].inverse(std::sqrt(z0[size_t(i)]));
  }
  std::vector<unsigned char> died(size_t(n), 0);
  std::vector<double> fv_survival(ncp, 1.0);
  double survival = 1.0;
  size_t c = 0;
  auto record_all = [&](size_t cp_idx) {
    for (long p = 0; p < n; ++p) {
      slots.alive[cp_idx * size_t(n) + size_t(p)] = 1;
      std::copy(zst.begin() + size_t(p) * size_t(d),
                zst.begin() + size_t(p + 1) * size_t(d),
                &slots.states[(cp_idx * size_t(n) + size_t(p)) * size_t(d)]);
    }
    fv_survival[cp_idx] = survival;
  };
  while (c < ncp && plan.cp_steps[c] == 0) record_all(c), ++c;
  const long S = plan.total_steps();
  for (long s = 1; s <= S && c < ncp; ++s) {
    const double h = (s <= plan.n_full) ? dt : plan.rem;
    for_range(opt.policy, opt.threads, n, [&](long p) {
      try {
        std::vector<double> z(zst.begin() + size_t(p) * size_t(d),
                              zst.begin() + size_t(p + 1) * size_t(d));
        std::vector<double> b(size_t(d), 0.0), w(size_t(d), 0.0);
        RngStream rs(seed, std::uint64_t(p));
        rs.normals(std::uint32_t(s), w.data(), d);
        bool absorbed;
        if (scheme == SdeScheme::TransformedX) {
          std::vector<double> x(xst.begin() + size_t(p) * size_t(d),
                                xst.begin() + size_t(p + 1) * size_t(d));
          absorbed = step_transformed_x(model, eng, x, z, b, w.data(), h);
          if (!absorbed)
            for (int i = 0; i < d; ++i) z[size_t(i)] = eng.z_of(i, x[size_t(i)]);
          std::copy(x.begin(), x.end(), xst.begin() + size_t(p) * size_t(d));
        } else {
          absorbed = step_euler_z(model, z, b, w.data(), h);
        }
        if (!absorbed && !finite_state(z)) {
          std::ostringstream os;
          os << "particle " << p << " produced a non-finite state at step "
             << s;
          slots.err[size_t(p)] = os.str();
          return;
        }
        died[size_t(p)] = absorbed ? 1 : 0;
        std::copy(z.begin(), z.end(), zst.begin() + size_t(p) * size_t(d));
      } catch (const std::exception& ex) {
        slots.err[size_t(p)] = ex.what();
      }
    });
    for (long p = 0; p < n; ++p)
      if (!slots.err[size_t(p)].empty())
        throw std::runtime_error("simulate_paths: " + slots.err[size_t(p)]);

    std::vector<long> donors;
    for (long p = 0; p < n; ++p)
      if (!died[size_t(p)]) donors.push_back(p);
    bool any_death = false;
    for (long p = 0; p < n; ++p) {
      if (!died[size_t(p)]) continue;
      any_death = true;
      if (donors.empty())
        throw std::runtime_error(
            "simulate_paths: Fleming-Viot population went extinct in a "
            "single step");
      RngStream rs(seed, std::uint64_t(p));
      const double u = rs.uniform(std::uint32_t(s), 0);
      const size_t k = std::min(size_t(u * double(donors.size())),
                                donors.size() - 1);
      const long q = donors[k];
      std::copy(zst.begin() + size_t(q) * size_t(d),
                zst.begin() + size_t(q + 1) * size_t(d),
                zst.begin() + size_t(p) * size_t(d));
      if (scheme == SdeScheme::TransformedX)
        std::copy(xst.begin() + size_t(q) * size_t(d),
                  xst.begin() + size_t(q + 1) * size_t(d),
                  xst.begin() + size_t(p) * size_t(d));
      if (slots.abs_time[size_t(p)] == kInf)
        slots.abs_time[size_t(p)] = plan.time_of(s);
      survival *= 1.0 - 1.0 / double(n);
      died[size_t(p)] = 0;
    }
    (void)any_death;
    while (c < ncp && plan.cp_steps[c] == s) record_all(c), ++c;
  }
  return assemble(model, plan, n, seed, scheme, true, slots, &fv_survival);
}

ConditionedMean conditioned_expectation(const EnsembleResult& ens,
                                        const Observable& f, double t) {
  const Checkpoint& cp = ens.at_time(t);
  const long ns = long(cp.ids.size());
  if (ns == 0)
    throw std::runtime_error("conditioned_expectation: zero survivors at t = " +
                             std::to_string(t));
  double sum = 0;
  std::vector<double> vals(size_t(ns), 0.0);
  for (long k = 0; k < ns; ++k) {
    vals[size_t(k)] = f(&cp.states[size_t(k) * size_t(ens.d)], ens.d);
    sum += vals[size_t(k)];
  }
  ConditionedMean out;
  out.mean = sum / double(ns);
  out.survivors = ns;
  out.low_sample_warning = ns < 30;
  if (ns >= 2) {
    double ss = 0;
    for (double v : vals) ss += (v - out.mean) * (v - out.mean);
    out.ci = 1.96 * std::sqrt(ss / double(ns - 1) / double(ns));
  } else {
    out.ci = kInf;
  }
  return out;
}

void record_observable(EnsembleResult& ens, const std::string& name,
                       const Observable& f) {
  ObsSeries series;
  for (const auto& cp : ens.checkpoints) {
    if (cp.ids.empty()) break;
    const ConditionedMean m = conditioned_expectation(ens, f, cp.time);
    series.mean.push_back(m.mean);
    series.ci.push_back(m.ci);
  }
  ens.observables[name] = std::move(series);
}

json RateFit::to_json() const {
  return json{{"rate", rate},          {"t_min", t_min},
              {"t_max", t_max},        {"stderr", stderr_},
              {"r_squared", r_squared}, {"note", note}};
}

namespace {

// OLS of y against t; returns slope, its standard error, and R^2.
void ols(const std::vector<double>& t, const std::vector<double>& y,
         double& slope, double& se, double& r2) {
  const size_t n = t.size();
  double tm = 0, ym = 0;
  for (size_t k = 0; k < n; ++k) tm += t[k], ym += y[k];
  tm /= double(n);
  ym /= double(n);
  double sxx = 0, sxy = 0, syy = 0;
  for (size_t k = 0; k < n; ++k) {
    sxx += (t[k] - tm) * (t[k] - tm);
    sxy += (t[k] - tm) * (y[k] - ym);
    syy += (y[k] - ym) * (y[k] - ym);
  }
  if (sxx <= 0) throw std::invalid_argument("rate fit: degenerate time axis");
  slope = sxy / sxx;
  double ssr = 0;
  for (size_t k = 0; k < n; ++k) {
    const double r = y[k] - ym - slope * (t[k] - tm);
    ssr += r * r;
  }
  se = (n > 2) ? std::sqrt(ssr / double(n - 2) / sxx) : 0.0;
  r2 = (syy > 0) ? 1.0 - ssr / syy : 1.0;
}

std::vector<size_t> window_checkpoints(const EnsembleResult& ens,
                                       std::pair<double, double> window) {
  if (!(window.first < window.second))
    throw std::invalid_argument("rate fit: need t_min < t_max");
  std::vector<size_t> idx;
  for (size_t k = 0; k < ens.checkpoints.size(); ++k) {
    const double t = ens.checkpoints[k].time;
    if (t >= window.first - 1e-12 && t <= window.second + 1e-12)
      idx.push_back(k);
  }
  if (idx.empty())
    throw std::invalid_argument("rate fit: no checkpoints in the window");
  return idx;
}

}  // namespace

RateFit survival_rate_fit(const EnsembleResult& ens,
                          std::pair<double, double> window) {
  const auto idx = window_checkpoints(ens, window);
  if (idx.size() < 5)
    throw std::invalid_argument(
        "survival_rate_fit: need at least 5 checkpoints in the window");
  std::vector<double> t, y;
  for (size_t k : idx) {
    const double s = ens.checkpoints[k].survival;
    if (!(s > 0))
      throw std::runtime_error(
          "survival_rate_fit: survival hits zero inside the window");
    t.push_back(ens.checkpoints[k].time);
    y.push_back(std::log(s));
  }
  RateFit fit;
  fit.t_min = window.first;
  fit.t_max = window.second;
  double slope, se, r2;
  ols(t, y, slope, se, r2);
  fit.rate = -slope;
  fit.stderr_ = se;
  fit.r_squared = r2;
  return fit;
}

RateFit convergence_rate_fit(const EnsembleResult& ens, const Observable& f,
                             double qsd_target,
                             std::pair<double, double> window) {
  const auto idx = window_checkpoints(ens, window);
  std::vector<double> t, y;
  size_t above = 0;
  for (size_t k : idx) {
    const Checkpoint& cp = ens.checkpoints[k];
    if (cp.ids.empty()) continue;
    const ConditionedMean m = conditioned_expectation(ens, f, cp.time);
    const double dist = std::abs(m.mean - qsd_target);
    if (dist > m.ci && dist > 0) {
      ++above;
      t.push_back(cp.time);
      y.push_back(std::log(dist));
    }
  }
  RateFit fit;
  fit.t_min = window.first;
  fit.t_max = window.second;
  if (above < 5) {
    fit.rate = std::numeric_limits<double>::quiet_NaN();
    fit.note = "resolved to noise";
    return fit;
  }
  double slope, se, r2;
  ols(t, y, slope, se, r2);
  fit.rate = -slope;
  fit.stderr_ = se;
  fit.r_squared = r2;
  return fit;
}

std::pair<double, double> default_fit_window(const EnsembleResult& ens) {
  const auto& cps = ens.checkpoints;
  if (cps.size() < 2)
    throw std::invalid_argument("default_fit_window: need checkpoints");
  const double horizon = cps.back().time;
  double t_lo = horizon / 4, t_hi = cps.back().time;
  for (const auto& cp : cps)
    if (cp.survival <= 0.5) {
      t_lo = cp.time;
      break;
    }
  for (const auto& cp : cps)
    if (double(cp.ids.size()) < 1e3 && cp.time > t_lo) {
      t_hi = cp.time;
      break;
    }
  if (!(t_lo < t_hi)) t_lo = cps[1].time < t_hi ? cps[1].time : 0.0;
  return {t_lo, t_hi};
}

json coming_down_diagnostic(const DiffusionModel& model, double R, double lam,
                            const std::vector<std::vector<double>>& starts,
                            long n, double dt, std::uint64_t seed,
                            const SimOptions& opt) {
  if (!(R > 0)) throw std::invalid_argument("coming_down: R must be positive");
  if (!(lam > 0))
    throw std::invalid_argument("coming_down: lam must be positive");
  if (!(dt > 0) || dt > kDtMax)
    throw std::invalid_argument("coming_down: dt must lie in (0, 1e-2]");
  const int d = model.d;
  const double t_cap = 100.0;
  const long step_cap = long(t_cap / dt);

  json per_start = json::array();
  std::vector<double> means;
  std::vector<double> norms;
  for (size_t si = 0; si < starts.size(); ++si) {
    const auto& z0 = starts[si];
    if (int(z0.size()) != d)
      throw std::invalid_argument("coming_down: start dimension mismatch");
    double nrm = 0;
    for (double v : z0) nrm += v * v;
    nrm = std::sqrt(nrm);
    if (nrm <= R)
      throw std::invalid_argument("coming_down: start inside the box");

    std::vector<double> expls(size_t(n), 0.0);
    std::vector<unsigned char> entered(size_t(n), 0), absorbed(size_t(n), 0),
        censored(size_t(n), 0);
    std::vector<std::string> errs(size_t(n), std::string{});
    for_range(opt.policy, opt.threads, n, [&](long p) {
      try {
        std::vector<double> z = z0;
        std::vector<double> b(size_t(d), 0.0), w(size_t(d), 0.0);
        RngStream rs(seed, std::uint64_t(si) * std::uint64_t(n) +
                               std::uint64_t(p));
        for (long s = 1; s <= step_cap; ++s) {
          rs.normals(std::uint32_t(s), w.data(), d);
          const bool abs_now = step_euler_z(model, z, b, w.data(), dt);
          if (!abs_now && !finite_state(z)) {
            std::ostringstream os;
            os << "particle " << p << " produced a non-finite state at step "
               << s;
            errs[size_t(p)] = os.str();
            return;
          }
          double r2 = 0;
          for (double v : z) r2 += v * v;
          if (abs_now || r2 <= R * R) {
            expls[size_t(p)] = std::exp(lam * double(s) * dt);
            (abs_now ? absorbed : entered)[size_t(p)] = 1;
            return;
          }
        }
        censored[size_t(p)] = 1;
      } catch (const std::exception& ex) {
        errs[size_t(p)] = ex.what();
      }
    });
    for (long p = 0; p < n; ++p)
      if (!errs[size_t(p)].empty())
        throw std::runtime_error("coming_down: " + errs[size_t(p)]);

    double sum = 0, count = 0, nent = 0, nabs = 0, ncen = 0;
    for (long p = 0; p < n; ++p) {
      if (censored[size_t(p)]) {
        ++ncen;
        continue;
      }
      sum += expls[size_t(p)];
      ++count;
      if (entered[size_t(p)]) ++nent;
      if (absorbed[size_t(p)]) ++nabs;
    }
    const double mean = (count > 0) ? sum / count : kInf;
    double ss = 0;
    for (long p = 0; p < n; ++p)
      if (!censored[size_t(p)])
        ss += (expls[size_t(p)] - mean) * (expls[size_t(p)] - mean);
    const double ci =
        (count >= 2) ? 1.96 * std::sqrt(ss / (count - 1) / count) : kInf;
    means.push_back(mean);
    norms.push_back(nrm);
    json entry{{"start", z0},
               {"norm", nrm},
               {"mean_exp_lambda_S", mean},
               {"ci", ci},
               {"frac_entered", nent / double(n)},
               {"frac_absorbed", nabs / double(n)},
               {"frac_censored", ncen / double(n)}};
    if (ncen / double(n) > 0.01)
      entry["note"] = "more than 1% of runs hit the internal horizon";
    per_start.push_back(entry);
  }

  double lo = kInf, hi = 0;
  for (double m : means) lo = std::min(lo, m), hi = std::max(hi, m);
  std::string cls = "bounded";
  if (hi > 2 * lo) {
    bool monotone = true;
    for (size_t k = 0; k + 1 < means.size(); ++k) {
      if (norms[k + 1] > norms[k] && means[k + 1] < 0.95 * means[k])
        monotone = false;
    }
    cls = monotone ? "growing" : "mixed";
  }
  return json{{"R", R},
              {"lambda", lam},
              {"n", n},
              {"dt", dt},
              {"starts", per_start},
              {"max_over_min", (lo > 0 && lo < kInf) ? hi / lo : kInf},
              {"classification", cls}};
}

json absorption_check(const DiffusionModel& model,
                      const std::vector<std::vector<double>>& starts,
                      double horizon, long n, double dt, std::uint64_t seed,
                      const SimOptions& opt) {
  if (!(dt > 0) || dt > kDtMax)
    throw std::invalid_argument("absorption_check: dt must lie in (0, 1e-2]");
  if (!(horizon >= 0))
    throw std::invalid_argument("absorption_check: horizon < 0");
  const int d = model.d;
  const long steps = long(std::floor(horizon / dt + 1e-9));
  json per_start = json::array();
  bool all_pass = true;
  for (size_t si = 0; si < starts.size(); ++si) {
    const auto& z0 = starts[si];
    validate_init_point(z0, d);
    std::vector<unsigned char> dead(size_t(n), 0);
    std::vector<std::string> errs(size_t(n), std::string{});
    for_range(opt.policy, opt.threads, n, [&](long p) {
      try {
        std::vector<double> z = z0;
        std::vector<double> b(size_t(d), 0.0), w(size_t(d), 0.0);
        RngStream rs(seed, std::uint64_t(si) * std::uint64_t(n) +
                               std::uint64_t(p));
        for (long s = 1; s <= steps; ++s) {
          rs.normals(std::uint32_t(s), w.data(), d);
          if (step_euler_z(model, z, b, w.data(), dt)) {
            dead[size_t(p)] = 1;
            return;
          }
          if (!finite_state(z)) {
            std::ostringstream os;
            os << "particle " << p << " produced a non-finite state at step "
               << s;
            errs[size_t(p)] = os.str();
            return;
          }
        }
      } catch (const std::exception& ex) {
        errs[size_t(p)] = ex.what();
      }
    });
    for (long p = 0; p < n; ++p)
      if (!errs[size_t(p)].empty())
        throw std::runtime_error("absorption_check: " + errs[size_t(p)]);
    long cnt = 0;
    for (auto v : dead) cnt += v;
    const double frac = double(cnt) / double(n);
    const bool flagged = frac < 0.99;
    all_pass = all_pass && !flagged;
    per_start.push_back(json{
        {"start", z0}, {"fraction_absorbed", frac}, {"flagged", flagged}});
  }
  return json{{"horizon", horizon},
              {"n", n},
              {"dt", dt},
              {"starts", per_start},
              {"all_pass", all_pass}};
}

json ensemble_metadata(const EnsembleResult& ens) { return ens.metadata; }

void export_survival_csv(const EnsembleResult& ens, const std::string& path,
                         const std::string& config_hash) {
  const std::string h = ens.metadata.dump();
  CsvWriter w(path, {"t", "survivors", "survival"},
              config_hash.empty() ? hex64(fnv1a64(h.data(), h.size()))
                                  : config_hash);
  for (const auto& cp : ens.checkpoints)
    w.row({cp.time, double(cp.ids.size()), cp.survival});
}

void export_observables_csv(const EnsembleResult& ens,
                            const std::string& path,
                            const std::string& config_hash) {
  std::vector<std::string> cols{"t"};
  for (const auto& [name, series] : ens.observables) {
    cols.push_back("mean_" + name);
    cols.push_back("ci_" + name);
  }
  const std::string h = ens.metadata.dump();
  CsvWriter w(path, cols,
              config_hash.empty() ? hex64(fnv1a64(h.data(), h.size()))
                                  : config_hash);
  for (size_t k = 0; k < ens.checkpoints.size(); ++k) {
    std::vector<double> row{ens.checkpoints[k].time};
    bool complete = true;
    for (const auto& [name, series] : ens.observables) {
      if (k >= series.mean.size()) {
        complete = false;
        break;
      }
      row.push_back(series.mean[k]);
      row.push_back(series.ci[k]);
    }
    if (!complete) break;
    w.row(row);
  }
}

}  // namespace qsdlab
