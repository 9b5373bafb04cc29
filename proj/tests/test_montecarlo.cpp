#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "qsdlab/models.hpp"
#include "qsdlab/montecarlo.hpp"
#include "qsdlab/spectral.hpp"
#include "qsdlab/transform.hpp"

using namespace qsdlab;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

DiffusionModel feller() {
  return zoo_instantiate("feller_linear",
                         json{{"r", {-1.0}}, {"gamma", {2.0}}});
}

// Riccati-flow oracle for dZ = -Z dt + sqrt(2Z) dW: the Laplace exponent
// u_theta(t) solves u' = -u - u^2, and theta -> infinity gives the
// absorption law P_z(T <= t) = exp(-z/(e^t - 1)). Survival and the surviving
// first moment E[Z_t 1_{T>t}] = z e^{-t} follow.
double feller_survival(double z, double t) {
  return -std::expm1(-z / std::expm1(t));
}
double feller_cond_mean(double z, double t) {
  return z * std::exp(-t) / feller_survival(z, t);
}

InitSpec point_init(std::vector<double> z) {
  InitSpec init;
  init.point = std::move(z);
  return init;
}

bool same_ensemble(const EnsembleResult& a, const EnsembleResult& b) {
  if (a.absorption_times != b.absorption_times) return false;
  if (a.checkpoints.size() != b.checkpoints.size()) return false;
  for (size_t k = 0; k < a.checkpoints.size(); ++k) {
    const auto& ca = a.checkpoints[k];
    const auto& cb = b.checkpoints[k];
    if (ca.time != cb.time || ca.ids != cb.ids || ca.states != cb.states ||
        ca.survival != cb.survival)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("t_final = 0 leaves every particle at its start") {
  InitSpec init;
  init.samples = {{0.5}, {1.5}};
  const EnsembleResult ens =
      simulate_paths(feller(), init, 1e-3, 0.0, 200, 9, \
                     SdeScheme::EulerFullTruncation);
  REQUIRE(ens.checkpoints.size() == 1);
  CHECK(ens.checkpoints[0].time == 0.0);
  CHECK(ens.checkpoints[0].survival == 1.0);
  CHECK(long(ens.checkpoints[0].ids.size()) == 200);
  for (double t : ens.absorption_times) CHECK(t == kInf);
  for (size_t p = 0; p < 200; ++p)
    CHECK(ens.checkpoints[0].states[p] == (p % 2 == 0 ? 0.5 : 1.5));

  // t = 0 conditioned mean is the plain mean under the initial law
  const ConditionedMean m = conditioned_expectation(
      ens, [](const double* z, int) { return z[0]; }, 0.0);
  CHECK(m.mean == 1.0);
  CHECK(m.survivors == 200);
}

TEST_CASE("same seed reproduces the ensemble bit for bit") {
  const auto m = feller();
  for (SdeScheme sc :
       {SdeScheme::EulerFullTruncation, SdeScheme::TransformedX}) {
    const EnsembleResult a =
        simulate_paths(m, point_init({1.0}), 1e-3, 1.0, 300, 77, sc);
    const EnsembleResult b =
        simulate_paths(m, point_init({1.0}), 1e-3, 1.0, 300, 77, sc);
    CHECK(same_ensemble(a, b));
    const EnsembleResult c =
        simulate_paths(m, point_init({1.0}), 1e-3, 1.0, 300, 78, sc);
    CHECK(!same_ensemble(a, c));
  }
}

TEST_CASE("subcritical Feller survival matches the Riccati flow") {
  SimOptions opt;
  opt.checkpoint_times = {0.0, 0.5, 1.0, 2.0, 3.0, 10.0};
  const EnsembleResult ens =
      simulate_paths(feller(), point_init({1.0}), 1e-3, 10.0, 20000, 4711,
                     SdeScheme::EulerFullTruncation, opt);

  // tolerances sit near 3.5 binomial sigmas at n = 20000; the weak
  // time-stepping bias at dt = 1e-3 is below the sampling noise here
  const double times[] = {0.5, 1.0, 2.0, 3.0};
  const double tol[] = {0.010, 0.010, 0.008, 0.006};
  for (int k = 0; k < 4; ++k) {
    const double exact = feller_survival(1.0, times[k]);
    const double mc = ens.at_time(times[k]).survival;
    CHECK(std::abs(mc - exact) < tol[k]);
  }
  // >= 99% absorbed by t = 10 (exact survival ~ 4.5e-5)
  CHECK(ens.at_time(10.0).survival < 0.01);
  CHECK(ens.metadata.at("absorbed_fraction").get<double>() > 0.999);

  // survival is non-increasing and every recorded state strictly interior
  for (size_t k = 0; k + 1 < ens.checkpoints.size(); ++k)
    CHECK(ens.checkpoints[k + 1].survival <= ens.checkpoints[k].survival);
  for (const auto& cp : ens.checkpoints)
    for (double v : cp.states) CHECK(v > kAbsEps);

  // conditioned first moment approaches the QSD moment (= 1) through the
  // exact transient z e^{-t} / P(T > t)
  const ConditionedMean m3 = conditioned_expectation(
      ens, [](const double* z, int) { return z[0]; }, 3.0);
  CHECK(m3.survivors > 500);
  CHECK(std::abs(m3.mean - feller_cond_mean(1.0, 3.0)) < 2.5 * m3.ci + 0.02);

  CHECK(ens.metadata.at("scheme") == "euler-full-truncation");
  CHECK(ens.metadata.at("seed").get<std::uint64_t>() == 4711);
}

TEST_CASE("conditioning normalizes exactly") {
  const EnsembleResult ens =
      simulate_paths(feller(), point_init({1.0}), 1e-3, 1.0, 2000, 5,
                     SdeScheme::EulerFullTruncation);
  for (const auto& cp : ens.checkpoints) {
    if (cp.ids.empty()) continue;
    const ConditionedMean m = conditioned_expectation(
        ens, [](const double*, int) { return 1.0; }, cp.time);
    CHECK(m.mean == 1.0);
    CHECK(m.ci == 0.0);
  }
  CHECK_THROWS_AS(conditioned_expectation(
                      ens, [](const double*, int) { return 1.0; }, 0.1234567),
                  std::invalid_argument);
}

TEST_CASE("synthetic exponential survival is recovered to high precision") {
  EnsembleResult ens;
  ens.d = 1;
  for (int k = 0; k <= 10; ++k) {
    Checkpoint cp;
    cp.time = 0.25 * k;
    cp.survival = std::exp(-1.3 * cp.time);
    ens.checkpoints.push_back(cp);
  }
  const RateFit fit = survival_rate_fit(ens, {0.0, 2.5});
  CHECK(fit.rate == doctest::Approx(1.3).epsilon(1e-10));
  CHECK(fit.stderr_ < 1e-8);
  CHECK(fit.r_squared == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(fit.t_min == 0.0);
  CHECK(fit.t_max == 2.5);
  const json j = fit.to_json();
  CHECK(j.at("rate").get<double>() == fit.rate);
  CHECK(j.at("stderr").get<double>() == fit.stderr_);
}

TEST_CASE("rate-fit window validation") {
  EnsembleResult ens;
  ens.d = 1;
  for (int k = 0; k <= 10; ++k) {
    Checkpoint cp;
    cp.time = 0.25 * k;
    cp.survival = (k == 10) ? 0.0 : std::exp(-cp.time);
    ens.checkpoints.push_back(cp);
  }
  CHECK_THROWS_AS(survival_rate_fit(ens, {2.0, 1.0}), std::invalid_argument);
  CHECK_THROWS_AS(survival_rate_fit(ens, {5.0, 6.0}), std::invalid_argument);
  // only 3 checkpoints inside [0, 0.5]
  CHECK_THROWS_AS(survival_rate_fit(ens, {0.0, 0.5}), std::invalid_argument);
  // survival hits zero at t = 2.5
  CHECK_THROWS_AS(survival_rate_fit(ens, {1.0, 2.5}), std::runtime_error);
}

TEST_CASE("synthetic conditioned decay recovers the rate; flat data is noise") {
  EnsembleResult ens;
  ens.d = 1;
  for (int k = 0; k <= 10; ++k) {
    Checkpoint cp;
    cp.time = 0.2 * k;
    cp.ids = {0, 1};
    const double v = 3.0 + 2.0 * std::exp(-0.7 * cp.time);
    cp.states = {v, v};  // identical -> zero CI, distance always counted
    cp.survival = 1.0;
    ens.checkpoints.push_back(cp);
  }
  const Observable id = [](const double* z, int) { return z[0]; };
  const RateFit fit = convergence_rate_fit(ens, id, 3.0, {0.0, 2.0});
  CHECK(fit.note.empty());
  CHECK(fit.rate == doctest::Approx(0.7).epsilon(1e-10));
  CHECK(fit.r_squared > 1.0 - 1e-12);

  // f constant = target: distance identically zero -> no fittable signal
  const RateFit flat = convergence_rate_fit(
      ens, [](const double*, int) { return 1.0; }, 1.0, {0.0, 2.0});
  CHECK(flat.note == "resolved to noise");
  CHECK(std::isnan(flat.rate));
}

TEST_CASE("default window spans survival half-life to a thousand survivors") {
  EnsembleResult ens;
  ens.d = 1;
  ens.n_particles = 20000;
  const double surv[] = {1.0, 0.8, 0.5, 0.3, 0.045, 0.01};
  const long cnt[] = {20000, 16000, 10000, 6000, 900, 200};
  for (int k = 0; k < 6; ++k) {
    Checkpoint cp;
    cp.time = double(k);
    cp.survival = surv[k];
    cp.ids.assign(size_t(cnt[k]), 0);
    ens.checkpoints.push_back(cp);
  }
  const auto w = default_fit_window(ens);
  CHECK(w.first == 2.0);
  CHECK(w.second == 4.0);
}

TEST_CASE("euler and transformed-x survival curves agree within combined CIs") {
  SimOptions opt;
  opt.checkpoint_times = {0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0};
  const long n = 8000;
  const EnsembleResult eu =
      simulate_paths(feller(), point_init({1.0}), 1e-3, 2.0, n, 2024,
                     SdeScheme::EulerFullTruncation, opt);
  const EnsembleResult tx =
      simulate_paths(feller(), point_init({1.0}), 1e-3, 2.0, n, 2024,
                     SdeScheme::TransformedX, opt);
  for (double t : opt.checkpoint_times) {
    const double s1 = eu.at_time(t).survival;
    const double s2 = tx.at_time(t).survival;
    const double sd = std::sqrt(s1 * (1 - s1) / double(n) +
                                s2 * (1 - s2) / double(n));
    CHECK(std::abs(s1 - s2) <= 1.96 * sd);
  }
}

TEST_CASE("initialization from the spectral QSD is stationary") {
  const auto model = feller();
  auto lyap = default_lyapunov(default_envelope(model), 1);
  auto t = build_transform(model, lyap);
  t.beta = 1.0;  // admissible for this model; lambda1 is beta-free
  t.certified = true;
  GridSpec gs;
  gs.nodes = {256};
  const Grid g = build_grid(gs, 1);
  const auto op = discretize(t, g, OpFlavor::Forward);
  const EigenPair pe = principal_eigen(op);
  const QsdAssembly q = assemble_qsd(t, pe.v, g);

  InitSpec init;
  init.samples = sample_qsd_z(q, g, 5000, 31337);
  SimOptions opt;
  opt.checkpoint_times = {0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5};
  EnsembleResult ens = simulate_paths(model, init, 1e-3, 1.5, 5000, 99,
                                      SdeScheme::EulerFullTruncation, opt);

  const std::vector<std::pair<std::string, Observable>> obs = {
      {"z", [](const double* z, int) { return z[0]; }},
      {"z2", [](const double* z, int) { return z[0] * z[0]; }},
      {"expz", [](const double* z, int) { return std::exp(-z[0]); }}};
  for (const auto& [name, f] : obs) {
    const ConditionedMean m0 = conditioned_expectation(ens, f, 0.0);
    for (double tt : opt.checkpoint_times) {
      const ConditionedMean mt = conditioned_expectation(ens, f, tt);
      const double combined =
          std::sqrt(m0.ci * m0.ci + mt.ci * mt.ci);
      CHECK(std::abs(mt.mean - m0.mean) <= 2.0 * combined + 1e-12);
    }
  }

  // from the QSD the survival curve is a pure exponential at rate lambda1
  const RateFit fit = survival_rate_fit(ens, {0.25, 1.5});
  CHECK(std::abs(fit.rate - 1.0) < 0.12);
  CHECK(fit.r_squared > 0.99);
}

TEST_CASE("Fleming-Viot keeps the population constant and labels itself") {
  SimOptions opt;
  opt.fleming_viot = true;
  opt.checkpoint_times = {0.0, 0.5, 1.0, 1.5};
  const long n = 1500;
  const EnsembleResult ens =
      simulate_paths(feller(), point_init({1.0}), 1e-3, 1.5, n, 13,
                     SdeScheme::EulerFullTruncation, opt);
  CHECK(ens.fleming_viot);
  for (const auto& cp : ens.checkpoints) {
    CHECK(long(cp.ids.size()) == n);
    for (double v : cp.states) CHECK(v > 0);
  }
  // product estimator tracks exp(-lambda1 t) = exp(-1.5) loosely
  const double s = ens.at_time(1.5).survival;
  CHECK(s > 0.223 * 0.6);
  CHECK(s < 0.223 / 0.6);
  long replaced = 0;
  for (double tt : ens.absorption_times)
    if (std::isfinite(tt)) ++replaced;
  CHECK(replaced > 0);
  CHECK(ens.metadata.contains("fleming_viot_note"));
}

TEST_CASE("coming-down diagnostic separates bounded from growing") {
  // 2D competitive LV comes down from infinity: the exp(lam * S_R) estimate
  // is insensitive to the start. Linear drift is not: entry takes
  // log(|z0|/R) time, so the estimate grows with the start.
  const auto lv = zoo_instantiate(
      "lotka_volterra", json{{"r", {1.0, 1.0}},
                             {"c", {{1.0, 0.5}, {0.5, 1.0}}},
                             {"gamma", {1.0, 1.0}}});
  const double s6 = 6.0 / std::sqrt(2.0), s12 = 12.0 / std::sqrt(2.0);
  const json lvrep = coming_down_diagnostic(
      lv, 5.0, 1.0, {{s6, s6}, {s12, s12}}, 400, 1e-3, 21);
  CHECK(lvrep.at("classification") == "bounded");
  CHECK(lvrep.at("max_over_min").get<double>() <= 2.0);

  const json frep = coming_down_diagnostic(feller(), 4.0, 1.0, {{8.0}, {32.0}},
                                           400, 1e-3, 22);
  CHECK(frep.at("classification") == "growing");
  CHECK(frep.at("max_over_min").get<double>() > 2.0);

  CHECK_THROWS_AS(
      coming_down_diagnostic(feller(), 4.0, 1.0, {{2.0}}, 10, 1e-3, 1),
      std::invalid_argument);  // start inside the box
  CHECK_THROWS_AS(
      coming_down_diagnostic(feller(), -1.0, 1.0, {{8.0}}, 10, 1e-3, 1),
      std::invalid_argument);
  CHECK_THROWS_AS(
      coming_down_diagnostic(feller(), 4.0, 0.0, {{8.0}}, 10, 1e-3, 1),
      std::invalid_argument);
  CHECK_THROWS_AS(
      coming_down_diagnostic(feller(), 4.0, 1.0, {{8.0}}, 10, 0.5, 1),
      std::invalid_argument);
}

TEST_CASE("absorption certainty report") {
  const json rep = absorption_check(feller(), {{1.0}}, 20.0, 2000, 1e-3, 7);
  CHECK(rep.at("all_pass").get<bool>());
  const auto& e = rep.at("starts").at(0);
  CHECK(e.at("fraction_absorbed").get<double>() >= 0.999);
  CHECK(!e.at("flagged").get<bool>());

  const json zero = absorption_check(feller(), {{1.0}}, 0.0, 100, 1e-3, 7);
  CHECK(zero.at("starts").at(0).at("fraction_absorbed").get<double>() == 0.0);
  CHECK(zero.at("starts").at(0).at("flagged").get<bool>());
  CHECK(!zero.at("all_pass").get<bool>());

  // pilot-run protocol on the 2D benchmark: the report structure is the
  // contract; the horizon here is a pilot, not a claim about lambda1
  const auto lv = zoo_instantiate(
      "lotka_volterra", json{{"r", {1.0, 1.0}},
                             {"c", {{1.0, 0.5}, {0.5, 1.0}}},
                             {"gamma", {1.0, 1.0}}});
  const json pilot = absorption_check(lv, {{1.0, 1.0}}, 10.0, 200, 1e-3, 3);
  const double frac =
      pilot.at("starts").at(0).at("fraction_absorbed").get<double>();
  CHECK(frac >= 0.0);
  CHECK(frac <= 1.0);
  CHECK(pilot.at("all_pass").get<bool>() ==
        !pilot.at("starts").at(0).at("flagged").get<bool>());
}

TEST_CASE("csv exports carry the hash header and the full table") {
  SimOptions opt;
  opt.checkpoint_times = {0.0, 0.5, 1.0};
  EnsembleResult ens =
      simulate_paths(feller(), point_init({1.0}), 1e-3, 1.0, 500, 123,
                     SdeScheme::EulerFullTruncation, opt);
  record_observable(ens, "z", [](const double* z, int) { return z[0]; });
  record_observable(ens, "one", [](const double*, int) { return 1.0; });

  const std::string sp = "/tmp/qsdlab_test_survival.csv";
  const std::string op_ = "/tmp/qsdlab_test_obs.csv";
  export_survival_csv(ens, sp, "deadbeefdeadbeef");
  export_observables_csv(ens, op_);

  std::ifstream fs(sp);
  std::string line;
  REQUIRE(bool(std::getline(fs, line)));
  CHECK(line == "# config_hash=deadbeefdeadbeef");
  REQUIRE(bool(std::getline(fs, line)));
  CHECK(line == "t,survivors,survival");
  int rows = 0;
  while (std::getline(fs, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 3);

  std::ifstream fo(op_);
  REQUIRE(bool(std::getline(fo, line)));
  CHECK(line.rfind("# config_hash=", 0) == 0);
  REQUIRE(bool(std::getline(fo, line)));
  CHECK(line == "t,mean_one,ci_one,mean_z,ci_z");
  std::remove(sp.c_str());
  std::remove(op_.c_str());
}

TEST_CASE("input validation rejects bad simulation parameters") {
  const auto m = feller();
  const auto eu = SdeScheme::EulerFullTruncation;
  CHECK_THROWS_AS(simulate_paths(m, point_init({1.0}), 0.0, 1.0, 10, 1, eu),
                  std::invalid_argument);
  CHECK_THROWS_AS(simulate_paths(m, point_init({1.0}), 0.05, 1.0, 10, 1, eu),
                  std::invalid_argument);
  CHECK_THROWS_AS(simulate_paths(m, point_init({1.0}), 1e-3, -1.0, 10, 1, eu),
                  std::invalid_argument);
  CHECK_THROWS_AS(simulate_paths(m, point_init({1.0}), 1e-3, 1.0, 0, 1, eu),
                  std::invalid_argument);
  CHECK_THROWS_AS(simulate_paths(m, point_init({0.0}), 1e-3, 1.0, 10, 1, eu),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      simulate_paths(m, point_init({1.0, 1.0}), 1e-3, 1.0, 10, 1, eu),
      std::invalid_argument);

  SimOptions opt;
  opt.checkpoint_times = {0.1234567};  // not a step boundary
  CHECK_THROWS_AS(
      simulate_paths(m, point_init({1.0}), 1e-3, 1.0, 10, 1, eu, opt),
      std::invalid_argument);
  opt.checkpoint_times = {2.0};  // beyond the horizon
  CHECK_THROWS_AS(
      simulate_paths(m, point_init({1.0}), 1e-3, 1.0, 10, 1, eu, opt),
      std::invalid_argument);

  // a drift that goes non-finite is reported with the particle id
  DiffusionModel bad;
  bad.d = 1;
  bad.a.push_back(CoordDiffusion{[](double s) { return 2.0 * s; },
                                 [](double) { return 2.0; },
                                 [](double) { return 0.0; }});
  bad.b = [](const double* z, double* out) {
    out[0] = (z[0] > 1.5) ? std::numeric_limits<double>::quiet_NaN() : 0.5;
  };
  try {
    simulate_paths(bad, point_init({1.0}), 1e-3, 5.0, 4, 1, eu);
    CHECK(false);
  } catch (const std::runtime_error& ex) {
    CHECK(std::string(ex.what()).find("non-finite state") !=
          std::string::npos);
    CHECK(std::string(ex.what()).find("particle") != std::string::npos);
  }
}
