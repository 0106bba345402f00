#ifndef ECGI_FEMCORE_HPP
#define ECGI_FEMCORE_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <map>
#include <string>
#include <vector>

#include "ecgi/geometry.hpp"

namespace ecgi {

using SpMat = Eigen::SparseMatrix<double>;

// Uniform time grid with N_T intervals of size delta; nodes t_s = s*delta.
struct TimeGrid {
    int nIntervals = 1;
    double step = 1.0;

    int nodeCount() const { return nIntervals + 1; }
    double node(int s) const { return s * step; }
    double horizon() const { return nIntervals * step; }
};

// Nodal coefficients of a P1(space) x P1(time) field on the epicardial curve:
// rows = surface nodes, columns = time nodes.
struct SpaceTimeField {
    Eigen::MatrixXd values;
    TimeGrid grid;

    SpaceTimeField() = default;
    SpaceTimeField(int nVertices, const TimeGrid& g)
        : values(Eigen::MatrixXd::Zero(nVertices, g.nodeCount())), grid(g) {}

    int vertexCount() const { return static_cast<int>(values.rows()); }
    bool sameShape(const SpaceTimeField& o) const {
        return values.rows() == o.values.rows() && values.cols() == o.values.cols();
    }
};

// Per-segment constant ambient 2-vector, affine in time: one matrix per
// component, rows = surface segments, columns = time nodes.
struct GradientField {
    Eigen::MatrixXd x, y;
    TimeGrid grid;
};

SpMat assemble_temporal_mass(const TimeGrid& grid);

struct SpatialMass {
    SpMat M;
    Eigen::VectorXd Mlump;  // row sums of M
};
SpatialMass assemble_spatial_mass(const SurfaceMesh1D& surface);

Eigen::VectorXd lumped_diagonal(const SpMat& A);

// Conductivity: isotropic per region tag, optionally overridden per element.
struct Conductivity {
    std::map<Region, double> byRegion;
    std::vector<Eigen::Matrix2d> perElement;  // if nonempty, one tensor per triangle

    static Conductivity isotropic(double torso, double lung) {
        Conductivity c;
        c.byRegion[Region::Torso] = torso;
        c.byRegion[Region::Lung] = lung;
        return c;
    }
};

SpMat assemble_stiffness(const Mesh2D& mesh, const Conductivity& sigma);

// Exact surface gradient of P1 functions on the polyline: per segment the
// tangential slope times the unit tangent. Gx, Gy map nodal values to the
// ambient x/y components, one row per segment.
struct SurfaceGradientOps {
    SpMat Gx, Gy;
};
SurfaceGradientOps assemble_surface_gradient(const SurfaceMesh1D& surface);

GradientField surface_gradient(const SurfaceMesh1D& surface, const SpaceTimeField& u);

// L2 projection of per-segment values onto nodal P1 values, applied column by
// column: solves M p~ = b with b_i = sum_{segments j at node i} p_j |J_j| / 2.
Eigen::MatrixXd l2_project_p0_to_p1(const SurfaceMesh1D& surface, const Eigen::MatrixXd& p);

// Direct/iterative SPD mass solver with a fixed relative tolerance of 1e-12.
class SpdSolver {
public:
    explicit SpdSolver(const SpMat& A);
    Eigen::VectorXd solve(const Eigen::VectorXd& b) const;
    Eigen::MatrixXd solve(const Eigen::MatrixXd& B) const;

private:
    SpMat A_;
    Eigen::SimplicialLLT<SpMat> llt_;
    bool direct_ = true;
};

// Discrete temporal cross-correlation matrix D(t_s): rows index the kernel
// nodes (2*halfWidth+1 hats on [-Nw*delta, Nw*delta]), columns the time-grid
// hats, both truncated to their supports; the signal is zero-extended.
Eigen::MatrixXd cross_correlation_matrix(const TimeGrid& grid, int halfWidth, int s);

// Time-action matrix of u -> P^temp K[u] for a nodal kernel of odd length:
// out(:, s) = sum_l u(:, l) * sum_j k_j D(t_s)_{j,l}.
Eigen::MatrixXd temporal_kernel_map(const TimeGrid& grid, const Eigen::VectorXd& kernel);

SpaceTimeField apply_temporal_kernel(const SpaceTimeField& u, const Eigen::VectorXd& kernel);

// Effective kernel of three chained half-width-2 kernels, sampled at the nodes
// of the widened (half-width 6) support.
Eigen::VectorXd compose_kernels(const Eigen::VectorXd& k1, const Eigen::VectorXd& k2,
                                const Eigen::VectorXd& k3, double delta);

// Precomputed operators shared by the regularizer and solvers.
struct SurfaceFem {
    SurfaceMesh1D surface;
    TimeGrid grid;
    SpMat M;
    Eigen::VectorXd Mlump;
    SpMat D;
    Eigen::VectorXd Dlump;
    SurfaceGradientOps gradOps;
    Eigen::SimplicialLLT<SpMat> Mllt;
    Eigen::SimplicialLLT<SpMat> Dllt;

    SurfaceFem(const SurfaceMesh1D& surf, const TimeGrid& g);

    int nodeCount() const { return surface.nodeCount(); }
    // weighted norms over nodal fields (lumped space, lumped/consistent time)
    double lumpedNormSq(const Eigen::MatrixXd& u) const;
    double massNormSq(const Eigen::MatrixXd& u) const;  // Mlump (x) D
};

void save_field(const SpaceTimeField& u, const std::string& path);
SpaceTimeField load_field(const std::string& path);
void export_field_csv(const SpaceTimeField& u, const std::string& path);
SpaceTimeField import_field_csv(const std::string& path, const TimeGrid& grid);

} // namespace ecgi

#endif
