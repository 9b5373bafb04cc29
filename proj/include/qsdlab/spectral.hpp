#pragma once

#include <complex>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "qsdlab/transform.hpp"

namespace qsdlab {

inline constexpr double kEigenTol = 1e-8;   // relative eigen-residual
inline constexpr double kRichTol = 1e-2;    // refinement convergence
inline constexpr long kNodeBudget = 4000000;

enum class OpFlavor { Forward, Adjoint, FokkerPlanckX };
enum class TimeScheme { ImplicitEuler, CrankNicolson };

struct GridSpec {
  double delta_cut = 1e-3;
  double R_cut = 20.0;
  std::vector<int> nodes{256};  // per coordinate; broadcast when size 1
  double ratio = 1.1;

  int nodes_for(int i) const {
    return nodes.size() == 1 ? nodes[0] : nodes.at(size_t(i));
  }
};

// Tensor grid in X-coordinates. coords holds the full per-coordinate node
// lists including the two Dirichlet nodes (first = delta_cut, last = R_cut);
// unknowns live on the interior nodes only, flattened row-major.
struct Grid {
  int d = 0;
  std::vector<std::vector<double>> coords;
  std::vector<long> n_int;
  long total = 0;

  long stride(int i) const {
    long s = 1;
    for (int j = i + 1; j < d; ++j) s *= n_int[size_t(j)];
    return s;
  }
  double node(int i, long k_int) const {  // k_int in [0, n_int[i])
    return coords[size_t(i)][size_t(k_int + 1)];
  }
};

Grid build_grid(const GridSpec& spec, int d);

// Trapezoid quadrature weights on the interior tensor nodes.
std::vector<double> grid_weights(const Grid& g);

struct DiscretizedOperator {
  Grid grid;
  Eigen::SparseMatrix<double> A;  // the operator itself (not its negation)
  OpFlavor flavor = OpFlavor::Forward;
  const TransformedOperator* t = nullptr;
  json diagnostics;
};

DiscretizedOperator discretize(const TransformedOperator& t, const Grid& grid,
                               OpFlavor flavor,
                               ExecPolicy pol = ExecPolicy::OpenMP,
                               int threads = 0);

struct EigenPair {
  double lambda = 0;
  Eigen::VectorXd v;
  double residual = 0;
  int iterations = 0;
};

EigenPair principal_eigen(const DiscretizedOperator& op,
                          double tol = kEigenTol);

struct SubSpectrum {
  std::vector<std::complex<double>> eigs;  // sorted by real part
  std::vector<double> residuals;           // Arnoldi estimates, same order
  double gap = 0;                          // min Re - lambda1
};

SubSpectrum subdominant_spectrum(const DiscretizedOperator& op, int k,
                                 const EigenPair& principal);

struct QsdAssembly {
  std::vector<double> qsd_x;  // density on the interior X-grid
  std::vector<double> qsd_z;  // density on the pulled-back Z-grid
  std::vector<std::vector<double>> z_coords;  // full pulled-back node lists
  double normalization = 0;   // int v1 e^{-Q/2 - beta0 U} dx (raw mass)
  double mass_x_raw = 0, mass_z_raw = 0;
};

QsdAssembly assemble_qsd(const TransformedOperator& t,
                         const Eigen::VectorXd& v1, const Grid& grid);

// Draws n points from the z-space density by categorical sampling over the
// interior nodes (each node weighted by its quadrature mass).
std::vector<std::vector<double>> sample_qsd_z(const QsdAssembly& q,
                                              const Grid& g, long n,
                                              std::uint64_t seed);

struct SemigroupResult {
  Eigen::VectorXd u;
  long steps = 0;
  TimeScheme scheme = TimeScheme::ImplicitEuler;
  double dt = 0;
};

SemigroupResult semigroup_apply(const DiscretizedOperator& op,
                                const Eigen::VectorXd& f_tilde,
                                double t_final, TimeScheme scheme,
                                double dt = 1e-3);

json refinement_study(const TransformedOperator& t,
                      const std::vector<GridSpec>& ladder,
                      const std::string& quantity);

struct SpectralResult {
  double lambda1 = 0;
  std::vector<std::complex<double>> sub_eigs;
  Eigen::VectorXd v1, v1_star;
  QsdAssembly qsd;
  double gap = 0;
  std::vector<double> residuals;  // forward, adjoint, then sub estimates
  double normalization = 0;
  json diagnostics;

  json to_json() const;
};

SpectralResult compute_spectral_result(const TransformedOperator& t,
                                       const Grid& grid, int k_sub = 4,
                                       double tol = kEigenTol);

void export_grid_csv(const Grid& g, const std::string& path,
                     const std::string& config_hash = "");
void export_grid_function_csv(const Grid& g, const std::vector<double>& vals,
                              const std::string& value_name,
                              const std::string& path,
                              const std::string& config_hash = "");
void export_z_function_csv(const QsdAssembly& q, const Grid& g,
                           const std::string& path,
                           const std::string& config_hash = "");

}  // namespace qsdlab
