#pragma once

#include <limits>
#include <string>
#include <vector>

#include "qsdlab/interp.hpp"
#include "qsdlab/models.hpp"
#include "qsdlab/parallel.hpp"

namespace qsdlab {

inline constexpr double kQFloor = 1e-8;        // singular evaluation cutoff
inline constexpr double kRoundtripTol = 1e-10;

// Node layout for the xi tables: nodes and extents per coordinate (scalars
// broadcast). Tables are built in u = sqrt(z), where xi' is smooth.
struct TableSpec {
  std::vector<int> nodes{1400};
  std::vector<double> z_max{1e8};
  double u_min = 1e-8;

  int nodes_for(int i) const {
    return nodes.size() == 1 ? nodes[0] : nodes.at(size_t(i));
  }
  double z_max_for(int i) const {
    return z_max.size() == 1 ? z_max[0] : z_max.at(size_t(i));
  }
};

struct XiTable {
  MonotoneHermite g;  // u -> xi(u^2)
  double u_max = 0, z_max = 0, x_max = 0;
};

struct AlphaConfig {
  double delta0 = 0.1;  // collar half-width in the transformed coordinates
  double R0 = std::numeric_limits<double>::infinity();
  bool far_field = false;  // false: no shell with uniform confinement found
};

struct TransformedOperator {
  const DiffusionModel* model = nullptr;
  const LyapunovSpec* lyap = nullptr;
  std::vector<XiTable> tables;
  double beta = 1.0;       // conjugation parameter; certify_beta0 overwrites it
  bool certified = false;  // set once certify_beta0 succeeds
  AlphaConfig alpha_config;

  int d() const { return model->d; }
};

struct LiouvilleCertificate {
  double beta0 = 0, M = 0, C_star = 0;
  long long sample_count = 0;
  double min_margin = 0;  // min over samples, N in {1, inf}, of (e+M-C*a)/a
  json search_log = json::array();

  json to_json() const;
};

// The xi tables alone; build_transform and the simulation engines share them.
std::vector<XiTable> build_xi_tables(const DiffusionModel& model,
                                     const TableSpec& cache = {});

TransformedOperator build_transform(const DiffusionModel& model,
                                    const LyapunovSpec& lyap,
                                    const TableSpec& cache = {});

std::vector<double> xi(const TransformedOperator& t,
                       const std::vector<double>& z);
std::vector<double> xi_inverse(const TransformedOperator& t,
                               const std::vector<double>& x);

std::vector<double> drift_p(const TransformedOperator& t,
                            const std::vector<double>& x);
std::vector<double> killing_q(const TransformedOperator& t,
                              const std::vector<double>& x);

double potential_U(const TransformedOperator& t, const std::vector<double>& x);
double log_density_Q(const TransformedOperator& t,
                     const std::vector<double>& x);

double weight_alpha(const TransformedOperator& t,
                    const std::vector<double>& x);

// N in [1, inf]; pass std::numeric_limits<double>::infinity() for the limit.
double zeroth_order_e(const TransformedOperator& t, double beta, double N,
                      const std::vector<double>& x);

// Coefficient fields of the conjugated operator at an already-mapped point
// z = xi^{-1}(x): convection p + beta grad U, the Fokker-Planck velocity
// p - q, and e_{beta,1}, all using the operator's current beta. This is the
// grid-assembly fast path; the per-point ops above re-invert the tables.
struct FieldSample {
  std::vector<double> conv, fpvel;
  double e = 0;
};
FieldSample field_sample_z(const TransformedOperator& t,
                           const std::vector<double>& z);

LiouvilleCertificate certify_beta0(TransformedOperator& t,
                                   const SamplePlan& plan = {},
                                   ExecPolicy pol = ExecPolicy::OpenMP,
                                   int threads = 0);

CheckReport boundary_constant_check(const TransformedOperator& t);

json transform_metadata(const TransformedOperator& t);
void export_xi_csv(const TransformedOperator& t, int coord,
                   const std::string& path,
                   const std::string& config_hash = "");

}  // namespace qsdlab
