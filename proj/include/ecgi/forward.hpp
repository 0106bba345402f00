#ifndef ECGI_FORWARD_HPP
#define ECGI_FORWARD_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ecgi/femcore.hpp"
#include "ecgi/geometry.hpp"

namespace ecgi {

// Dirichlet-reduced stiffness of the torso annulus: epicardial nodes carry the
// data, all other nodes are solved for; homogeneous Neumann on the torso
// boundary is natural.
struct ForwardSystem {
    SurfaceMesh1D surface;            // epicardial curve, fixes the dof ordering
    std::vector<int> heartDofs;       // mesh vertex ids, == surface.vertexIds
    std::vector<int> freeDofs;
    std::vector<int> outerDofs;       // OUTER vertices (trace selector)
    SpMat K;                          // full stiffness
    SpMat Kff;
    SpMat Kfh;  // coupling block (lifting columns)
    std::shared_ptr<Eigen::SimplicialLLT<SpMat>> llt;  // factorization of Kff
    int nTotal = 0;

    // full nodal solution with v|heart = uHeart
    Eigen::VectorXd solve(const Eigen::VectorXd& uHeart) const;
};

ForwardSystem build_forward_system(const Mesh2D& mesh, const Conductivity& sigma);

// Dense map from epicardial nodal values to per-electrode trapezoidal
// averages, applied independently per time column.
struct ForwardMatrix {
    Eigen::MatrixXd A;  // N_Sigma x N_H

    int electrodeCount() const { return static_cast<int>(A.rows()); }
    int heartNodeCount() const { return static_cast<int>(A.cols()); }
};

ForwardMatrix assemble_forward_matrix(const ForwardSystem& system, const Mesh2D& mesh,
                                      const ElectrodeSet& electrodes);

// matrix-free evaluation (solve then average), retained as the slow path
Eigen::VectorXd forward_apply_matrix_free(const ForwardSystem& system, const Mesh2D& mesh,
                                          const ElectrodeSet& electrodes,
                                          const Eigen::VectorXd& uHeart);

struct NoiseMeta {
    enum class Kind : uint32_t { None = 0, GaussianField = 1, GaussianSnr = 2 };
    Kind kind = Kind::None;
    double kappa = 0.0;
    double snrDb = 0.0;
    uint64_t seed = 0;
};

// Per-electrode time series.
struct Observation {
    Eigen::MatrixXd values;  // N_Sigma x (N_T+1)
    TimeGrid grid;
    NoiseMeta noise;
};

// Electrode-averaged data fidelity: value and its gradient with respect to the
// (lumped-space, consistent-time) mass inner product, in which the temporal
// weight cancels and the gradient acts per time column.
struct FidelityResult {
    double value = 0.0;
    SpaceTimeField grad;
};

FidelityResult fidelity_value_grad(const SpaceTimeField& u, const Observation& z,
                                   const ForwardMatrix& A, const SpMat& D,
                                   const Eigen::VectorXd& Mlump);

void save_observation(const Observation& z, const std::string& path);
Observation load_observation(const std::string& path);
void export_observation_csv(const Observation& z, const std::string& path);

} // namespace ecgi

#endif
