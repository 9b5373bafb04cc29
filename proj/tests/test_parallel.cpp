#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <numeric>
#include <vector>

#include "qsdlab/models.hpp"
#include "qsdlab/montecarlo.hpp"
#include "qsdlab/parallel.hpp"
#include "qsdlab/transform.hpp"

using namespace qsdlab;

namespace {

bool identical(const EnsembleResult& a, const EnsembleResult& b) {
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

EnsembleResult run(const DiffusionModel& m, ExecPolicy pol, int threads,
                   bool fv) {
  InitSpec init;
  init.point = {1.0};
  SimOptions opt;
  opt.policy = pol;
  opt.threads = threads;
  opt.fleming_viot = fv;
  opt.checkpoint_times = {0.0, 0.25, 0.5, 0.75, 1.0};
  return simulate_paths(m, init, 1e-3, 1.0, 400, 515, \
                        SdeScheme::EulerFullTruncation, opt);
}

}  // namespace

TEST_CASE("for_range covers every index once under both policies") {
  const long n = 10007;
  std::vector<int> hits(size_t(n), 0);
  for_range(ExecPolicy::Serial, 1, n, [&](long i) { hits[size_t(i)] += 1; });
  for_range(ExecPolicy::OpenMP, 4, n, [&](long i) { hits[size_t(i)] += 1; });
  CHECK(std::accumulate(hits.begin(), hits.end(), 0L) == 2 * n);
  for (int h : hits) CHECK(h == 2);
}

TEST_CASE("thread resolution honors the environment variable") {
  const char* old = std::getenv("QSDLAB_THREADS");
  const std::string saved = old ? old : "";
  setenv("QSDLAB_THREADS", "7", 1);
  CHECK(resolve_threads(0) == 7);
  CHECK(resolve_threads(3) == 3);  // explicit request wins
  if (old)
    setenv("QSDLAB_THREADS", saved.c_str(), 1);
  else
    unsetenv("QSDLAB_THREADS");
}

TEST_CASE("ensembles are bit-identical across policies and thread counts") {
  const auto m = zoo_instantiate("feller_linear",
                                 json{{"r", {-1.0}}, {"gamma", {2.0}}});
  const EnsembleResult serial = run(m, ExecPolicy::Serial, 1, false);
  const EnsembleResult omp1 = run(m, ExecPolicy::OpenMP, 1, false);
  const EnsembleResult omp5 = run(m, ExecPolicy::OpenMP, 5, false);
  CHECK(identical(serial, omp1));
  CHECK(identical(serial, omp5));
}

TEST_CASE("Fleming-Viot branching is worker-count independent") {
  const auto m = zoo_instantiate("feller_linear",
                                 json{{"r", {-1.0}}, {"gamma", {2.0}}});
  const EnsembleResult serial = run(m, ExecPolicy::Serial, 1, true);
  const EnsembleResult omp5 = run(m, ExecPolicy::OpenMP, 5, true);
  CHECK(identical(serial, omp5));
  // branching actually happened, so the agreement is not vacuous
  long replaced = 0;
  for (double t : serial.absorption_times)
    if (t < 1e18) ++replaced;
  CHECK(replaced > 0);
}

TEST_CASE("certification is bit-identical across policies") {
  const auto m = zoo_instantiate("feller_linear",
                                 json{{"r", {-1.0}}, {"gamma", {2.0}}});
  auto lyap = default_lyapunov(default_envelope(m), 1);
  SamplePlan plan;
  plan.n_box = 2000;
  plan.n_shell = 400;

  auto t1 = build_transform(m, lyap);
  const auto c1 = certify_beta0(t1, plan, ExecPolicy::Serial, 1);
  auto t2 = build_transform(m, lyap);
  const auto c2 = certify_beta0(t2, plan, ExecPolicy::OpenMP, 5);

  CHECK(c1.beta0 == c2.beta0);
  CHECK(c1.M == c2.M);
  CHECK(c1.C_star == c2.C_star);
  CHECK(c1.min_margin == c2.min_margin);
  CHECK(c1.sample_count == c2.sample_count);
  CHECK(t1.beta == t2.beta);
  CHECK(t1.certified);
  CHECK(t2.certified);
}
