#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "qsdlab/models.hpp"
#include "qsdlab/transform.hpp"

using namespace qsdlab;

namespace {

const double kInf = std::numeric_limits<double>::infinity();

DiffusionModel feller(double r, double gamma) {
  return zoo_instantiate("feller_linear",
                         json{{"r", {r}}, {"gamma", {gamma}}});
}

TransformedOperator feller_transform(double r, double gamma,
                                     DiffusionModel& slot,
                                     LyapunovSpec& lslot) {
  slot = feller(r, gamma);
  lslot = default_lyapunov(default_envelope(slot), 1);
  return build_transform(slot, lslot);
}

}  // namespace

TEST_CASE("xi closed forms for linear diffusion coefficients") {
  // a(s) = gamma s gives xi(z) = 2 sqrt(z / gamma)
  DiffusionModel m1, m4;
  LyapunovSpec l1, l4;
  auto t1 = feller_transform(-1.0, 1.0, m1, l1);
  auto t4 = feller_transform(-1.0, 4.0, m4, l4);
  CHECK(xi(t1, {1.0})[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(xi(t4, {1.0})[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(xi(t1, {4.0})[0] == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(xi_inverse(t4, {3.0})[0] == doctest::Approx(9.0).epsilon(1e-12));
}

TEST_CASE("xi roundtrip over ten decades") {
  DiffusionModel m;
  LyapunovSpec l;
  auto t = feller_transform(-1.0, 2.0, m, l);
  for (int k = 0; k <= 50; ++k) {
    const double z = std::pow(10.0, -6.0 + 10.0 * k / 50.0);
    const double back = xi_inverse(t, xi(t, {z}))[0];
    CHECK(std::abs(back - z) <= kRoundtripTol * std::max(1.0, z));
  }
}

TEST_CASE("transformed coefficients match their closed forms") {
  DiffusionModel m;
  LyapunovSpec l;
  auto t = feller_transform(-1.0, 2.0, m, l);
  for (double x : {0.5, 1.0, 2.0, 4.0}) {
    // q = a'/(4 sqrt a) at z = xi^{-1}(x) collapses to 1/(2x) for linear a
    CHECK(killing_q(t, {x})[0] == doctest::Approx(1.0 / (2 * x)).epsilon(1e-10));
    // p = (b / sqrt a) o xi^{-1} = r x / 2
    CHECK(drift_p(t, {x})[0] == doctest::Approx(-x / 2).epsilon(1e-10));
    // U = V o xi^{-1} with V = |z| and z = gamma x^2 / 4
    CHECK(potential_U(t, {x}) == doctest::Approx(x * x / 2).epsilon(1e-10));
  }
}

TEST_CASE("log density Q is the log coordinate sum for linear a") {
  auto m = zoo_instantiate("lotka_volterra",
                           json{{"r", {1.0, 1.0}},
                                {"c", {{1.0, 0.5}, {0.5, 1.0}}},
                                {"gamma", {1.0, 1.0}}});
  auto lyap = default_lyapunov(default_envelope(m), 2);
  auto t = build_transform(m, lyap);
  CHECK(log_density_Q(t, {1.0, 1.0}) == doctest::Approx(0.0).epsilon(1e-10));
  const double e = std::exp(1.0);
  CHECK(log_density_Q(t, {e, 1.0}) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(log_density_Q(t, {2.0, 3.0}) ==
        doctest::Approx(std::log(6.0)).epsilon(1e-9));
}

TEST_CASE("weight alpha branches") {
  auto m = zoo_instantiate("lotka_volterra",
                           json{{"r", {1.0, 1.0}},
                                {"c", {{1.0, 0.5}, {0.5, 1.0}}},
                                {"gamma", {1.0, 1.0}}});
  auto lyap = default_lyapunov(default_envelope(m), 2);
  auto t = build_transform(m, lyap);
  t.alpha_config.far_field = false;  // isolate the collar branch
  CHECK(weight_alpha(t, {1.0, 1.0}) == 1.0);
  // collar value at x_1 = delta0/2: 1/x^2 + 1 = 4/delta0^2 + 1
  const double d0 = t.alpha_config.delta0;
  CHECK(weight_alpha(t, {d0 / 2, 5.0}) ==
        doctest::Approx(4.0 / (d0 * d0) + 1.0));
  CHECK_THROWS_AS(weight_alpha(t, {-1.0, 1.0}), std::domain_error);
}

TEST_CASE("weight alpha far field uses the drift Lyapunov decay") {
  DiffusionModel m;
  LyapunovSpec l;
  auto t = feller_transform(-1.0, 2.0, m, l);
  REQUIRE(t.alpha_config.far_field);
  REQUIRE(t.alpha_config.R0 < 6.0);
  // -(b . grad V) at z = xi^{-1}(6) = 18 with V = |z|, b = -z
  CHECK(weight_alpha(t, {6.0}) == doctest::Approx(18.0).epsilon(1e-10));
}

TEST_CASE("zeroth order term: exact linear-model formula") {
  DiffusionModel m;
  LyapunovSpec l;
  auto t = feller_transform(-1.0, 2.0, m, l);
  for (double beta : {0.3, 1.0, 1.7}) {
    for (double x : {0.5, 1.0, 2.0, 4.0}) {
      const double expect =
          0.5 * beta + 0.5 * beta * (1 - beta) * x * x + 3.0 / (8 * x * x) -
          0.25;
      CHECK(zeroth_order_e(t, beta, 1.0, {x}) ==
            doctest::Approx(expect).epsilon(1e-9));
    }
  }
  CHECK_THROWS_AS(zeroth_order_e(t, -1.0, 2.0, {1.0}), std::invalid_argument);
  CHECK_THROWS_AS(zeroth_order_e(t, 1.0, 0.5, {1.0}), std::invalid_argument);
}

TEST_CASE("zeroth order term is affine in 1/N") {
  auto m = zoo_instantiate("lotka_volterra",
                           json{{"r", {1.0, 1.0}},
                                {"c", {{1.0, 0.5}, {0.5, 1.0}}},
                                {"gamma", {1.0, 1.0}}});
  auto lyap = default_lyapunov(default_envelope(m), 2);
  auto t = build_transform(m, lyap);
  const std::vector<double> x{1.3, 0.8};
  for (double beta : {0.4, 1.0, 2.3}) {
    const double e1 = zeroth_order_e(t, beta, 1.0, x);
    const double ei = zeroth_order_e(t, beta, kInf, x);
    const double scale = std::max({1.0, std::abs(e1), std::abs(ei)});
    CHECK(std::abs(zeroth_order_e(t, beta, 2.0, x) - 0.5 * (e1 + ei)) <=
          1e-12 * scale);
    CHECK(std::abs(zeroth_order_e(t, beta, 4.0, x) -
                   (ei + 0.25 * (e1 - ei))) <= 1e-12 * scale);
    CHECK(std::abs(zeroth_order_e(t, beta, 1.5, x) -
                   (ei + (2.0 / 3.0) * (e1 - ei))) <= 1e-12 * scale);
  }
}

TEST_CASE("boundary constant is 3/4 for linear diffusions") {
  DiffusionModel m;
  LyapunovSpec l;
  auto t = feller_transform(-1.0, 2.0, m, l);
  const auto rep = boundary_constant_check(t);
  CHECK(rep.passed);
  CHECK(rep.stats.at("bconst-i0-x1") == doctest::Approx(0.75).epsilon(1e-4));
}

TEST_CASE("certificate search on the logistic benchmark") {
  auto m = zoo_instantiate("lotka_volterra",
                           json{{"r", {1.0}}, {"c", {{1.0}}},
                                {"gamma", {1.0}}});
  auto lyap = default_lyapunov(default_envelope(m), 1);
  auto t = build_transform(m, lyap);
  const auto cert = certify_beta0(t);
  CHECK(t.certified);
  CHECK(t.beta == cert.beta0);
  CHECK(cert.beta0 > 0);
  CHECK(cert.C_star > 0);
  CHECK(cert.min_margin >= -1e-9);
  CHECK(cert.sample_count > 10000);
  // the log must contain at least one certified entry
  bool any = false;
  for (const auto& e : cert.search_log)
    if (e.at("outcome") == "certified") any = true;
  CHECK(any);
}

TEST_CASE("certificate search refuses a driftless model") {
  DiffusionModel m;
  m.d = 1;
  m.zoo_id = "custom";
  m.a = {CoordDiffusion{[](double s) { return s; },
                        [](double) { return 1.0; },
                        [](double) { return 0.0; }}};
  m.b = [](const double*, double* out) { out[0] = 0.0; };
  m.db_diag = [](const double*, double* out) { out[0] = 0.0; };
  LyapunovSpec lyap;
  lyap.m = 0;
  lyap.gamma = 0;
  lyap.V = [](const double* z) { return z[0]; };
  lyap.gradV = [](const double*, double* out) { out[0] = 1.0; };
  lyap.hessdiagV = [](const double*, double* out) { out[0] = 0.0; };
  lyap.tildeV = [](double s) { return s; };
  auto t = build_transform(m, lyap);
  CHECK_FALSE(t.alpha_config.far_field);
  try {
    certify_beta0(t);
    FAIL("expected certify_beta0 to throw");
  } catch (const std::runtime_error& ex) {
    CHECK(std::string(ex.what()).find("no confinement") != std::string::npos);
  }
  CHECK_FALSE(t.certified);
}

TEST_CASE("field samples agree with the per-point operators") {
  auto m = zoo_instantiate("lotka_volterra",
                           json{{"r", {1.0, 1.0}},
                                {"c", {{1.0, 0.5}, {0.5, 1.0}}},
                                {"gamma", {1.0, 2.0}}});
  auto lyap = default_lyapunov(default_envelope(m), 2);
  auto t = build_transform(m, lyap);
  t.beta = 0.7;
  const std::vector<std::vector<double>> zs{
      {1.0, 1.0}, {0.3, 2.2}, {4.0, 0.5}, {2.0, 2.0}};
  for (const auto& z : zs) {
    const auto x = xi(t, z);
    const auto fs = field_sample_z(t, z);
    const auto p = drift_p(t, x);
    const auto q = killing_q(t, x);
    for (int i = 0; i < 2; ++i) {
      CHECK(fs.fpvel[size_t(i)] ==
            doctest::Approx(p[size_t(i)] - q[size_t(i)]).epsilon(1e-8));
      // conv_i = p_i + beta dU/dx_i; differentiate U numerically
      auto xp = x, xm = x;
      const double h = 1e-6 * std::max(1.0, std::abs(x[size_t(i)]));
      xp[size_t(i)] += h;
      xm[size_t(i)] -= h;
      const double dU =
          (potential_U(t, xp) - potential_U(t, xm)) / (2 * h);
      CHECK(fs.conv[size_t(i)] ==
            doctest::Approx(p[size_t(i)] + t.beta * dU).epsilon(1e-5));
    }
    CHECK(fs.e == doctest::Approx(zeroth_order_e(t, t.beta, 1.0, x))
                      .epsilon(1e-9));
  }
}

TEST_CASE("dimension and table-spec handling") {
  DiffusionModel m;
  LyapunovSpec l;
  auto t = feller_transform(-1.0, 2.0, m, l);
  CHECK_THROWS_AS(xi(t, {1.0, 2.0}), std::invalid_argument);

  auto lv = zoo_instantiate("lotka_volterra",
                            json{{"r", {1.0, 1.0}},
                                 {"c", {{1.0, 0.5}, {0.5, 1.0}}},
                                 {"gamma", {1.0, 1.0}}});
  auto lyap = default_lyapunov(default_envelope(lv), 2);
  TableSpec spec;
  spec.nodes = {128, 512};
  auto t2 = build_transform(lv, lyap, spec);
  CHECK(t2.tables[0].g.nodes().size() < t2.tables[1].g.nodes().size());

  const json meta = transform_metadata(t2);
  CHECK(meta.contains("beta"));
  CHECK(meta.at("tables").size() == 2);
}
