#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "qsdlab/sampling.hpp"

namespace qsdlab {

using json = nlohmann::json;

inline constexpr double kFacetTol = 1e-12;   // |b_i| tolerance on facets
inline constexpr double kFdStepRel = 1e-6;   // FD step h = 1e-6*max(1,|z|)
inline constexpr double kFMinZ = 1e-6;       // f_i = b_i/z_i only above this
inline constexpr double kStrictTol = 1e-12;  // slack for strict inequalities

// Per-coordinate diffusion a_i with its first two derivatives.
struct CoordDiffusion {
  std::function<double(double)> a, da, d2a;
};

// dZ^i = b_i(Z) dt + sqrt(a_i(Z^i)) dW^i on the positive orthant, absorbed at
// the facet set. Zoo models expose the per-capita rate f_i (b_i = z_i f_i)
// and its diagonal partials analytically; custom models fall back to guarded
// quotients and central differences.
struct DiffusionModel {
  int d = 1;
  std::vector<CoordDiffusion> a;
  std::function<void(const double*, double*)> b;
  std::function<void(const double*, double*)> db_diag;   // optional analytic
  std::function<void(const double*, double*)> f_percap;  // optional (zoo)
  std::function<void(const double*, double*)> df_diag;   // optional (zoo)
  std::string zoo_id;
  json params;

  void drift(const double* z, double* out) const { b(z, out); }
  void drift_jac_diag(const double* z, double* out) const;
  bool has_f() const { return bool(f_percap); }
  // f_i = b_i / z_i for custom models; callers must keep z_i >= kFMinZ there.
  void f(const double* z, double* out) const;
  void df(const double* z, double* out) const;
};

struct LyapunovSpec {
  std::function<double(const double*)> V;
  std::function<void(const double*, double*)> gradV;
  std::function<void(const double*, double*)> hessdiagV;
  std::function<double(double)> tildeV;  // may be empty
  double gamma = 0;                      // 0 means absent
  double m = -1;                         // >=0 when V(z)=|z|^{m+1}
};

// Assumption (A) envelope. Construction is permissive: the delta threshold
// for n = m is recorded as a check margin rather than enforced here, so the
// checker can report violations instead of refusing to run.
struct PolynomialEnvelope {
  double m = 1, n = 0;
  double C1 = 1, C2 = 1, C3 = 1, C4 = 1, R = 1, delta = 0;
};

struct Witness {
  std::string condition;
  std::vector<double> point;  // empty when the condition is parameter-level
  double margin = 0;
};

struct CheckReport {
  std::string check;
  bool passed = false;
  std::vector<Witness> witnesses;
  std::string notes;
  std::map<std::string, double> stats;  // fitted constants, slopes, exponents

  void add(const std::string& cond, double margin,
           std::vector<double> point = {});
  void note(const std::string& s);
  void finalize();  // passed := every margin >= 0
  json to_json() const;
};

DiffusionModel zoo_instantiate(const std::string& zoo_id, const json& params);

PolynomialEnvelope default_envelope(const DiffusionModel& model);
LyapunovSpec default_lyapunov(const PolynomialEnvelope& env, int d);

std::vector<double> default_radius_schedule();

CheckReport check_H1(const DiffusionModel& m, const SamplePlan& plan = {});
CheckReport check_H2(const DiffusionModel& m, const SamplePlan& plan = {});
CheckReport check_H3(const DiffusionModel& m, const LyapunovSpec& lyap,
                     const std::vector<double>& schedule,
                     const SamplePlan& plan = {});
CheckReport check_H4(const DiffusionModel& m, const LyapunovSpec& lyap,
                     const std::vector<double>& schedule,
                     const SamplePlan& plan = {});
CheckReport check_assumption_A(const DiffusionModel& m,
                               const PolynomialEnvelope& env,
                               const SamplePlan& plan = {});

double bdotgradV(const DiffusionModel& m, const LyapunovSpec& lyap,
                 const double* z);

}  // namespace qsdlab
