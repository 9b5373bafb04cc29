#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "qsdlab/models.hpp"

using namespace qsdlab;

namespace {

json lv2_params(double c_off) {
  return json{{"r", {1.0, 1.0}},
              {"c", {{1.0, c_off}, {c_off, 1.0}}},
              {"gamma", {1.0, 1.0}}};
}

// 1D toy with a(s) = s^2: a'(0) = 0 and the boundary is inaccessible in
// finite xi-distance, so (H1) must reject it.
DiffusionModel quadratic_diffusion_model() {
  DiffusionModel m;
  m.d = 1;
  m.zoo_id = "custom";
  m.a = {CoordDiffusion{[](double s) { return s * s; },
                        [](double s) { return 2 * s; },
                        [](double) { return 2.0; }}};
  m.b = [](const double* z, double* out) { out[0] = -z[0]; };
  m.db_diag = [](const double*, double* out) { out[0] = -1.0; };
  return m;
}

}  // namespace

TEST_CASE("zoo instantiation: feller_linear") {
  auto m = zoo_instantiate("feller_linear",
                           json{{"r", {-1.0}}, {"gamma", {2.0}}});
  CHECK(m.d == 1);
  CHECK(m.a[0].a(3.0) == doctest::Approx(6.0));
  CHECK(m.a[0].da(0.0) == doctest::Approx(2.0));
  CHECK(m.a[0].a(0.0) == 0.0);
  double z = 2.5, b;
  m.b(&z, &b);
  CHECK(b == doctest::Approx(-2.5));
  CHECK(m.has_f());
}

TEST_CASE("zoo instantiation: lotka_volterra drift and jacobian") {
  auto m = zoo_instantiate("lotka_volterra", lv2_params(0.5));
  const double z[2] = {2.0, 1.0};
  double b[2], db[2];
  m.b(z, b);
  // b_i = z_i (r_i - sum_j c_ij z_j)
  CHECK(b[0] == doctest::Approx(2.0 * (1.0 - 2.0 - 0.5)));
  CHECK(b[1] == doctest::Approx(1.0 * (1.0 - 1.0 - 1.0)));
  m.drift_jac_diag(z, db);
  // finite-difference cross-check of the diagonal
  const double h = 1e-6 * 2.0;
  double zp[2] = {2.0 + h, 1.0}, zm[2] = {2.0 - h, 1.0}, bp[2], bm[2];
  m.b(zp, bp);
  m.b(zm, bm);
  CHECK(db[0] == doctest::Approx((bp[0] - bm[0]) / (2 * h)).epsilon(1e-5));
}

TEST_CASE("zoo drift vanishes on every facet") {
  const std::vector<std::pair<std::string, json>> corpus{
      {"feller_linear", json{{"r", {-1.0, 0.5}}, {"gamma", {2.0, 1.0}}}},
      {"lotka_volterra", lv2_params(0.5)},
      {"holling",
       json{{"r", {0.5, 0.5}},
            {"c", {{2.0, 0.1}, {0.1, 2.0}}},
            {"gamma", {1.0, 1.0}},
            {"k", 1}}},
      {"regular_holling",
       json{{"r", {0.5, 0.5}},
            {"c", {{2.0, 0.1}, {0.1, 2.0}}},
            {"gamma", {1.0, 1.0}},
            {"k", 1}}},
      {"beddington_deangelis",
       json{{"r", {0.5, 0.5}},
            {"c", {{2.0, 0.1}, {0.1, 2.0}}},
            {"gamma", {1.0, 1.0}}}},
  };
  for (const auto& [id, params] : corpus) {
    CAPTURE(id);
    auto m = zoo_instantiate(id, params);
    double z[2] = {0.0, 1.7}, b[2];
    m.b(z, b);
    CHECK(b[0] == 0.0);
    z[0] = 1.7;
    z[1] = 0.0;
    m.b(z, b);
    CHECK(b[1] == 0.0);
  }
}

TEST_CASE("zoo rejects bad input") {
  CHECK_THROWS_AS(zoo_instantiate("no_such_family", json::object()),
                  std::invalid_argument);
  CHECK_THROWS_AS(zoo_instantiate("feller_linear",
                                  json{{"r", {1.0}}, {"gamma", {-2.0}}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      zoo_instantiate("lotka_volterra",
                      json{{"r", {1.0, 1.0}},
                           {"c", {{0.0, 0.5}, {0.5, 1.0}}},
                           {"gamma", {1.0, 1.0}}}),
      std::invalid_argument);
}

TEST_CASE("H1 passes for linear diffusions and rejects a = s^2") {
  auto good = zoo_instantiate("feller_linear",
                              json{{"r", {-1.0}}, {"gamma", {2.0}}});
  CHECK(check_H1(good).passed);

  const auto rep = check_H1(quadratic_diffusion_model());
  CHECK_FALSE(rep.passed);
  bool da0_failed = false;
  for (const auto& w : rep.witnesses)
    if (w.condition == "H1-da0-positive-i0" && w.margin < 0) da0_failed = true;
  CHECK(da0_failed);
}

TEST_CASE("H2 passes for zoo drifts and flags immigration") {
  CHECK(check_H2(zoo_instantiate("lotka_volterra", lv2_params(0.5))).passed);

  DiffusionModel imm = quadratic_diffusion_model();
  imm.a = zoo_instantiate("feller_linear",
                          json{{"r", {-1.0}}, {"gamma", {1.0}}})
              .a;  // fine diffusion, bad drift
  imm.b = [](const double* z, double* out) { out[0] = 1.0 - z[0]; };
  imm.db_diag = [](const double*, double* out) { out[0] = -1.0; };
  const auto rep = check_H2(imm);
  CHECK_FALSE(rep.passed);
  bool facet_failed = false;
  for (const auto& w : rep.witnesses)
    if (w.condition == "H2-facet-zero-i0" && w.margin < 0) facet_failed = true;
  CHECK(facet_failed);
}

TEST_CASE("H3 on the linear benchmark recovers the exact constant") {
  auto m = zoo_instantiate("feller_linear",
                           json{{"r", {-1.0}}, {"gamma", {2.0}}});
  auto env = default_envelope(m);
  auto lyap = default_lyapunov(env, m.d);
  const auto rep = check_H3(m, lyap, default_radius_schedule());
  CHECK(rep.passed);
  // with V = z, a = 2z, b = -z: (a V'^2 + b^2/a) / (-b V') = 2.5 exactly
  CHECK(rep.stats.at("H3.4-fitted-C") == doctest::Approx(2.5).epsilon(1e-6));
}

TEST_CASE("H3 requires the tensor minorant") {
  auto m = zoo_instantiate("lotka_volterra", lv2_params(0.5));
  auto env = default_envelope(m);
  auto lyap = default_lyapunov(env, m.d);
  lyap.tildeV = nullptr;
  CHECK_THROWS_AS(check_H3(m, lyap, default_radius_schedule()),
                  std::invalid_argument);
}

TEST_CASE("H3 and H4 pass for competitive lotka_volterra") {
  auto m = zoo_instantiate("lotka_volterra", lv2_params(0.5));
  auto env = default_envelope(m);
  auto lyap = default_lyapunov(env, m.d);
  const auto schedule = default_radius_schedule();
  CHECK(check_H3(m, lyap, schedule).passed);
  const auto h4 = check_H4(m, lyap, schedule);
  CHECK(h4.passed);
  CHECK(h4.stats.at("H4-fitted-C") > 0);
}

TEST_CASE("H4 fails honestly for linear drift") {
  auto m = zoo_instantiate("feller_linear",
                           json{{"r", {-1.0}}, {"gamma", {2.0}}});
  auto env = default_envelope(m);
  auto lyap = default_lyapunov(env, m.d);
  REQUIRE(lyap.gamma == 0.0);
  const auto rep = check_H4(m, lyap, default_radius_schedule());
  CHECK_FALSE(rep.passed);
  REQUIRE(rep.witnesses.size() == 1);
  CHECK(rep.witnesses[0].condition == "H4-gamma-positive");
}

TEST_CASE("assumption A verdicts across the corpus") {
  auto verdict = [](const std::string& id, const json& params) {
    auto m = zoo_instantiate(id, params);
    return check_assumption_A(m, default_envelope(m));
  };

  SUBCASE("competitive LV passes") {
    CHECK(verdict("lotka_volterra", lv2_params(0.5)).passed);
  }
  SUBCASE("strongly cooperative LV fails the delta threshold") {
    const auto rep = verdict("lotka_volterra", lv2_params(-2.0));
    CHECK_FALSE(rep.passed);
    bool coro = false;
    for (const auto& w : rep.witnesses)
      if (w.condition == "corollary-e:LV" && w.margin < 0) coro = true;
    CHECK(coro);
  }
  SUBCASE("weakly cooperative LV stays inside the threshold") {
    CHECK(verdict("lotka_volterra", lv2_params(-0.2)).passed);
  }
  SUBCASE("holling with c_ii <= r_i fails") {
    const auto rep = verdict("holling",
                             json{{"r", {2.0, 2.0}},
                                  {"c", {{1.0, 0.3}, {0.3, 1.0}}},
                                  {"gamma", {1.0, 1.0}},
                                  {"k", 1}});
    CHECK_FALSE(rep.passed);
    bool coro = false;
    for (const auto& w : rep.witnesses)
      if (w.condition == "corollary-holling-cii-gt-ri" && w.margin < 0)
        coro = true;
    CHECK(coro);
  }
  SUBCASE("holling corollary holds but the raw envelope still fails") {
    // Saturating interactions have bounded f but their derivative does not
    // satisfy C4 |z|^{m-1} with m = 0 near the axes; the regularized family
    // exists precisely to avoid this. The named corollary margins must be
    // positive while the overall verdict stays negative.
    const auto rep = verdict("holling",
                             json{{"r", {0.5, 0.5}},
                                  {"c", {{2.0, 0.1}, {0.1, 2.0}}},
                                  {"gamma", {1.0, 1.0}},
                                  {"k", 1}});
    for (const auto& w : rep.witnesses)
      if (w.condition.rfind("corollary-", 0) == 0) CHECK(w.margin > 0);
  }
  SUBCASE("regularized holling passes outright") {
    CHECK(verdict("regular_holling",
                  json{{"r", {0.5, 0.5}},
                       {"c", {{2.0, 0.1}, {0.1, 2.0}}},
                       {"gamma", {1.0, 1.0}},
                       {"k", 1}})
              .passed);
  }
  SUBCASE("crowley_martin hinges on alpha") {
    const json base{{"r1", 0.5}, {"r2", 0.5}, {"c11", 1.0}, {"c22", 1.0},
                    {"beta", 1.0}, {"alpha2", 1.0}, {"alpha3", 1.0},
                    {"gamma", {1.0, 1.0}}, {"d", 2}};
    json pass = base;
    pass["alpha"] = 1.0;
    json fail = base;
    fail["alpha"] = 0.5;
    CHECK(verdict("crowley_martin", pass).passed);
    const auto rep = verdict("crowley_martin", fail);
    CHECK_FALSE(rep.passed);
    bool coro = false;
    for (const auto& w : rep.witnesses)
      if (w.condition == "corollary-CM-alpha" && w.margin < 0) coro = true;
    CHECK(coro);
  }
}

TEST_CASE("envelope adapts to weak cooperation") {
  auto m = zoo_instantiate("lotka_volterra", lv2_params(-0.9));
  const auto env = default_envelope(m);
  CHECK(env.delta == doctest::Approx(0.9));
  // C3/(d-1) must clear delta: the adaptive epsilon shrinks to make room
  CHECK(env.C3 / (m.d - 1) > env.delta);
}

TEST_CASE("envelope rejects nothing it should not: d = 5 instantiation") {
  json p;
  p["r"] = {1.0, 1.0, 1.0, 1.0, 1.0};
  std::vector<std::vector<double>> c(5, std::vector<double>(5, 0.1));
  for (int i = 0; i < 5; ++i) c[size_t(i)][size_t(i)] = 2.0;
  p["c"] = c;
  p["gamma"] = {1.0, 1.0, 1.0, 1.0, 1.0};
  auto m = zoo_instantiate("lotka_volterra", p);
  CHECK(m.d == 5);
  CHECK(check_H1(m).passed);
  CHECK(check_assumption_A(m, default_envelope(m)).passed);
}

TEST_CASE("bdotgradV matches a hand computation") {
  auto m = zoo_instantiate("feller_linear",
                           json{{"r", {-1.0}}, {"gamma", {2.0}}});
  auto lyap = default_lyapunov(default_envelope(m), 1);
  const double z = 3.0;
  // V = |z|, b = -z: b . grad V = -3
  CHECK(bdotgradV(m, lyap, &z) == doctest::Approx(-3.0));
}

TEST_CASE("check report serialization carries witnesses and stats") {
  auto m = zoo_instantiate("feller_linear",
                           json{{"r", {-1.0}}, {"gamma", {2.0}}});
  const auto rep = check_H1(m);
  const json j = rep.to_json();
  CHECK(j.at("check") == "H1");
  CHECK(j.at("passed") == rep.passed);
  CHECK(j.at("witnesses").size() == rep.witnesses.size());
}
