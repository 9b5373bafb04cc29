#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "qsdlab/models.hpp"
#include "qsdlab/parallel.hpp"
#include "qsdlab/transform.hpp"

namespace qsdlab {

inline constexpr double kAbsEps = 1e-10;
inline constexpr double kDtMax = 1e-2;
inline constexpr double kDtDefault = 1e-3;

enum class SdeScheme { EulerFullTruncation, TransformedX };

// Initial law: a single point, or an explicit sample set (cycled over
// particles) standing in for an arbitrary sampleable distribution.
struct InitSpec {
  std::vector<double> point;
  std::vector<std::vector<double>> samples;
};

struct Checkpoint {
  double time = 0;
  std::vector<long> ids;       // surviving particles, ascending
  std::vector<double> states;  // d entries per survivor, z coordinates
  double survival = 1;         // fraction; Fleming-Viot: product estimator
};

struct ObsSeries {
  std::vector<double> mean;  // aligned with checkpoints
  std::vector<double> ci;    // 95% half-widths
};

struct EnsembleResult {
  int d = 0;
  long n_particles = 0;
  double dt = 0;
  SdeScheme scheme = SdeScheme::EulerFullTruncation;
  std::uint64_t seed = 0;
  bool fleming_viot = false;
  std::vector<double> absorption_times;  // +inf marks a live particle
  std::vector<Checkpoint> checkpoints;
  std::map<std::string, ObsSeries> observables;
  json metadata;

  const Checkpoint& at_time(double t) const;
};

struct SimOptions {
  std::vector<double> checkpoint_times;  // empty: 51 evenly spaced incl. 0
  bool fleming_viot = false;
  TableSpec tables;  // transformed-X scheme only
  ExecPolicy policy = ExecPolicy::OpenMP;
  int threads = 0;
};

EnsembleResult simulate_paths(const DiffusionModel& model, const InitSpec& init,
                              double dt, double t_final, long n_particles,
                              std::uint64_t seed, SdeScheme scheme,
                              const SimOptions& opt = {});

using Observable = std::function<double(const double* z, int d)>;

struct ConditionedMean {
  double mean = 0;
  double ci = 0;  // 95% half-width
  long survivors = 0;
  bool low_sample_warning = false;
};

ConditionedMean conditioned_expectation(const EnsembleResult& ens,
                                        const Observable& f, double t);

// Evaluates f at every checkpoint and stores the series under name.
void record_observable(EnsembleResult& ens, const std::string& name,
                       const Observable& f);

struct RateFit {
  double rate = 0;
  double t_min = 0, t_max = 0;
  double stderr_ = 0;
  double r_squared = 0;
  std::string note;  // "resolved to noise" when no rate could be fitted
  json to_json() const;
};

RateFit survival_rate_fit(const EnsembleResult& ens,
                          std::pair<double, double> window);

RateFit convergence_rate_fit(const EnsembleResult& ens, const Observable& f,
                             double qsd_target,
                             std::pair<double, double> window);

// Default fitting window: survival has reached 1/2 at the left edge, the
// survivor count is still about 10^3 at the right edge.
std::pair<double, double> default_fit_window(const EnsembleResult& ens);

json coming_down_diagnostic(const DiffusionModel& model, double R, double lam,
                            const std::vector<std::vector<double>>& starts,
                            long n, double dt, std::uint64_t seed,
                            const SimOptions& opt = {});

json absorption_check(const DiffusionModel& model,
                      const std::vector<std::vector<double>>& starts,
                      double horizon, long n, double dt, std::uint64_t seed,
                      const SimOptions& opt = {});

json ensemble_metadata(const EnsembleResult& ens);
void export_survival_csv(const EnsembleResult& ens, const std::string& path,
                         const std::string& config_hash = "");
void export_observables_csv(const EnsembleResult& ens,
                            const std::string& path,
                            const std::string& config_hash = "");

}  // namespace qsdlab
