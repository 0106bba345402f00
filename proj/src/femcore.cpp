#include "ecgi/femcore.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ecgi/errors.hpp"

namespace ecgi {

namespace {

double hat(double x) { return std::max(0.0, 1.0 - std::abs(x)); }

// integral over [a, b] of the product of two functions that are linear there,
// given endpoint values
double linear_product_integral(double a, double b, double f0, double f1, double g0, double g1) {
    return (b - a) * (2.0 * f0 * g0 + f0 * g1 + f1 * g0 + 2.0 * f1 * g1) / 6.0;
}

} // namespace

SpMat assemble_temporal_mass(const TimeGrid& grid) {
    if (grid.nIntervals < 1 || grid.step <= 0.0)
        throw ParameterOutOfRange("invalid time grid");
    const int n = grid.nodeCount();
    const double d = grid.step;
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(3 * n);
    for (int i = 0; i < n; ++i) {
        const bool end = (i == 0 || i == n - 1);
        trip.emplace_back(i, i, (end ? 2.0 : 4.0) * d / 6.0);
        if (i + 1 < n) {
            trip.emplace_back(i, i + 1, d / 6.0);
            trip.emplace_back(i + 1, i, d / 6.0);
        }
    }
    SpMat D(n, n);
    D.setFromTriplets(trip.begin(), trip.end());
    return D;
}

Eigen::VectorXd lumped_diagonal(const SpMat& A) {
    Eigen::VectorXd d = Eigen::VectorXd::Zero(A.rows());
    for (int k = 0; k < A.outerSize(); ++k)
        for (SpMat::InnerIterator it(A, k); it; ++it) d[it.row()] += it.value();
    return d;
}

SpatialMass assemble_spatial_mass(const SurfaceMesh1D& surface) {
    const int n = surface.nodeCount();
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(4 * n);
    for (int j = 0; j < surface.segmentCount(); ++j) {
        const int a = j, b = (j + 1) % n;
        const double L = surface.segmentLengths[j];
        trip.emplace_back(a, a, L / 3.0);
        trip.emplace_back(b, b, L / 3.0);
        trip.emplace_back(a, b, L / 6.0);
        trip.emplace_back(b, a, L / 6.0);
    }
    SpatialMass out;
    out.M.resize(n, n);
    out.M.setFromTriplets(trip.begin(), trip.end());
    out.Mlump = lumped_diagonal(out.M);
    return out;
}

SpMat assemble_stiffness(const Mesh2D& mesh, const Conductivity& sigma) {
    const bool perElement = !sigma.perElement.empty();
    if (perElement && sigma.perElement.size() != mesh.triangles.size())
        throw ShapeMismatch("per-element conductivity count does not match triangle count");

    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(9 * mesh.triangles.size());
    for (size_t e = 0; e < mesh.triangles.size(); ++e) {
        const auto& t = mesh.triangles[e];
        Eigen::Matrix2d S;
        if (perElement) {
            S = sigma.perElement[e];
            if ((S - S.transpose()).norm() > 1e-12 * (1.0 + S.norm()))
                throw EllipticityError("element conductivity tensor not symmetric");
            Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(S);
            if (eig.eigenvalues().minCoeff() <= 0.0)
                throw EllipticityError("element conductivity tensor not positive definite");
        } else {
            auto it = sigma.byRegion.find(t.tag);
            if (it == sigma.byRegion.end())
                throw EllipticityError("missing conductivity for region tag");
            if (it->second <= 0.0)
                throw EllipticityError("conductivity must be positive");
            S = it->second * Eigen::Matrix2d::Identity();
        }

        const Vec2& p0 = mesh.vertices[t.v[0]];
        const Vec2& p1 = mesh.vertices[t.v[1]];
        const Vec2& p2 = mesh.vertices[t.v[2]];
        const double area = triangle_signed_area(p0, p1, p2);
        // P1 gradients: grad phi_i = rot90(opposite edge) / (2 area)
        Eigen::Matrix<double, 2, 3> G;
        const Vec2 e0 = p2 - p1, e1 = p0 - p2, e2 = p1 - p0;
        G.col(0) = Vec2(-e0.y(), e0.x()) / (2.0 * area);
        G.col(1) = Vec2(-e1.y(), e1.x()) / (2.0 * area);
        G.col(2) = Vec2(-e2.y(), e2.x()) / (2.0 * area);
        const Eigen::Matrix3d Ke = area * G.transpose() * S * G;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) trip.emplace_back(t.v[i], t.v[j], Ke(i, j));
    }
    SpMat K(mesh.vertexCount(), mesh.vertexCount());
    K.setFromTriplets(trip.begin(), trip.end());
    return K;
}

SurfaceGradientOps assemble_surface_gradient(const SurfaceMesh1D& surface) {
    const int n = surface.nodeCount();
    std::vector<Eigen::Triplet<double>> tx, ty;
    tx.reserve(2 * n);
    ty.reserve(2 * n);
    for (int j = 0; j < surface.segmentCount(); ++j) {
        const int a = j, b = (j + 1) % n;
        const double inv = 1.0 / surface.segmentLengths[j];
        const Vec2& t = surface.tangents[j];
        tx.emplace_back(j, a, -t.x() * inv);
        tx.emplace_back(j, b, t.x() * inv);
        ty.emplace_back(j, a, -t.y() * inv);
        ty.emplace_back(j, b, t.y() * inv);
    }
    SurfaceGradientOps ops;
    ops.Gx.resize(n, n);
    ops.Gy.resize(n, n);
    ops.Gx.setFromTriplets(tx.begin(), tx.end());
    ops.Gy.setFromTriplets(ty.begin(), ty.end());
    return ops;
}

GradientField surface_gradient(const SurfaceMesh1D& surface, const SpaceTimeField& u) {
    if (u.vertexCount() != surface.nodeCount())
        throw ShapeMismatch("field row count does not match surface node count");
    const auto ops = assemble_surface_gradient(surface);
    GradientField g;
    g.grid = u.grid;
    g.x = ops.Gx * u.values;
    g.y = ops.Gy * u.values;
    return g;
}

SpdSolver::SpdSolver(const SpMat& A) : A_(A) {
    direct_ = A.rows() < 50000;
    if (direct_) {
        llt_.compute(A_);
        if (llt_.info() != Eigen::Success) throw SolveFailure("Cholesky factorization failed");
    }
}

Eigen::VectorXd SpdSolver::solve(const Eigen::VectorXd& b) const {
    Eigen::VectorXd x;
    if (direct_) {
        x = llt_.solve(b);
    } else {
        Eigen::ConjugateGradient<SpMat, Eigen::Lower | Eigen::Upper> cg(A_);
        cg.setTolerance(1e-13);
        cg.setMaxIterations(10 * A_.rows());
        x = cg.solve(b);
    }
    const double bn = b.norm();
    if (bn > 0.0 && (A_ * x - b).norm() > 1e-12 * bn)
        throw SolveFailure("SPD solve residual above tolerance");
    return x;
}

Eigen::MatrixXd SpdSolver::solve(const Eigen::MatrixXd& B) const {
    Eigen::MatrixXd X(B.rows(), B.cols());
    for (int c = 0; c < B.cols(); ++c) X.col(c) = solve(Eigen::VectorXd(B.col(c)));
    return X;
}

Eigen::MatrixXd l2_project_p0_to_p1(const SurfaceMesh1D& surface, const Eigen::MatrixXd& p) {
    const int n = surface.nodeCount();
    if (p.rows() != surface.segmentCount())
        throw ShapeMismatch("segment value row count does not match segment count");
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(n, p.cols());
    for (int j = 0; j < surface.segmentCount(); ++j) {
        const int a = j, c = (j + 1) % n;
        const double w = surface.segmentLengths[j] / 2.0;
        b.row(a) += w * p.row(j);
        b.row(c) += w * p.row(j);
    }
    SpdSolver solver(assemble_spatial_mass(surface).M);
    return solver.solve(b);
}

Eigen::MatrixXd cross_correlation_matrix(const TimeGrid& grid, int halfWidth, int s) {
    if (halfWidth < 1) throw ParameterOutOfRange("halfWidth must be >= 1");
    if (s < 0 || s > grid.nIntervals) throw ParameterOutOfRange("time index out of range");
    const int nT = grid.nIntervals;
    const double d = grid.step;
    Eigen::MatrixXd D = Eigen::MatrixXd::Zero(2 * halfWidth + 1, nT + 1);
    // All in units of delta: kernel hat i sits at m = i - Nw, truncated to
    // [-Nw, Nw]; the time-grid hat j, shifted by -s, sits at c = j - s,
    // truncated to [-s, nT - s] (zero extension of the signal).
    for (int i = 0; i <= 2 * halfWidth; ++i) {
        const int m = i - halfWidth;
        const int fLo = std::max(m - 1, -halfWidth), fHi = std::min(m + 1, halfWidth);
        for (int j = 0; j <= nT; ++j) {
            const int c = j - s;
            const int gLo = std::max(c - 1, -s), gHi = std::min(c + 1, nT - s);
            const int lo = std::max(fLo, gLo), hi = std::min(fHi, gHi);
            double acc = 0.0;
            for (int q = lo; q < hi; ++q)
                acc += linear_product_integral(q, q + 1, hat(q - m), hat(q + 1 - m),
                                               hat(q - c), hat(q + 1 - c));
            D(i, j) = d * acc;
        }
    }
    return D;
}

Eigen::MatrixXd temporal_kernel_map(const TimeGrid& grid, const Eigen::VectorXd& kernel) {
    if (kernel.size() % 2 == 0 || kernel.size() < 3)
        throw ParameterOutOfRange("kernel must have odd length >= 3");
    const int halfWidth = (static_cast<int>(kernel.size()) - 1) / 2;
    const int n = grid.nodeCount();
    Eigen::MatrixXd W(n, n);
    for (int s = 0; s < n; ++s)
        W.row(s) = kernel.transpose() * cross_correlation_matrix(grid, halfWidth, s);
    return W;
}

SpaceTimeField apply_temporal_kernel(const SpaceTimeField& u, const Eigen::VectorXd& kernel) {
    SpaceTimeField out;
    out.grid = u.grid;
    out.values = u.values * temporal_kernel_map(u.grid, kernel).transpose();
    return out;
}

namespace {

// values of a piecewise-linear function with nodal values k on the grid
// j*delta, j = -Nw..Nw, zero outside
double pl_eval(const Eigen::VectorXd& k, double delta, double t) {
    const int halfWidth = (static_cast<int>(k.size()) - 1) / 2;
    const double x = t / delta + halfWidth;
    if (x <= 0.0 || x >= static_cast<double>(k.size() - 1)) {
        // exact nodal hit at the support ends
        if (x == 0.0) return k[0];
        if (x == static_cast<double>(k.size() - 1)) return k[k.size() - 1];
        return 0.0;
    }
    const int j = static_cast<int>(std::floor(x));
    const double frac = x - j;
    return (1.0 - frac) * k[j] + frac * k[j + 1];
}

// exact integral of k2(tau) * k1(tau + r) over the overlap of the supports;
// both are piecewise linear on their delta grids
double pl_correlate_at(const Eigen::VectorXd& k1, const Eigen::VectorXd& k2, double delta,
                       double r) {
    const int h1 = (static_cast<int>(k1.size()) - 1) / 2;
    const int h2 = (static_cast<int>(k2.size()) - 1) / 2;
    const double lo = std::max(-h2 * delta, -h1 * delta - r);
    const double hi = std::min(h2 * delta, h1 * delta - r);
    if (lo >= hi) return 0.0;
    // merged breakpoints of k2 (at j*delta) and shifted k1 (at j*delta - r)
    std::vector<double> cuts;
    cuts.push_back(lo);
    cuts.push_back(hi);
    for (int j = -h2; j <= h2; ++j) {
        const double t = j * delta;
        if (t > lo && t < hi) cuts.push_back(t);
    }
    for (int j = -h1; j <= h1; ++j) {
        const double t = j * delta - r;
        if (t > lo && t < hi) cuts.push_back(t);
    }
    std::sort(cuts.begin(), cuts.end());
    double acc = 0.0;
    for (size_t q = 0; q + 1 < cuts.size(); ++q) {
        const double a = cuts[q], b = cuts[q + 1];
        if (b - a <= 0.0) continue;
        // both factors are linear on (a, b): two-point Gauss is exact
        const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
        const double g = half / std::sqrt(3.0);
        acc += half * (pl_eval(k2, delta, mid - g) * pl_eval(k1, delta, mid - g + r) +
                       pl_eval(k2, delta, mid + g) * pl_eval(k1, delta, mid + g + r));
    }
    return acc;
}

} // namespace

Eigen::VectorXd compose_kernels(const Eigen::VectorXd& k1, const Eigen::VectorXd& k2,
                                const Eigen::VectorXd& k3, double delta) {
    if (k1.size() != 5 || k2.size() != 5 || k3.size() != 5)
        throw ParameterOutOfRange("sub-kernels must have half-width 2 (5 nodal values)");
    if (delta <= 0.0) throw ParameterOutOfRange("delta must be positive");
    // k(t) = int k3(s) f(s + t) ds with f(r) = int k2(tau) k1(tau + r) dtau.
    // f is piecewise cubic with breakpoints on the delta grid, so three-point
    // Gauss per interval integrates k3 * f exactly at nodal shifts t.
    const int outHalf = 6;
    Eigen::VectorXd out(2 * outHalf + 1);
    const double g = std::sqrt(3.0 / 5.0);
    const double w0 = 8.0 / 9.0, w1 = 5.0 / 9.0;
    for (int m = -outHalf; m <= outHalf; ++m) {
        const double t = m * delta;
        double acc = 0.0;
        for (int j = -2; j < 2; ++j) {
            const double a = j * delta, b = (j + 1) * delta;
            const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
            const double s0 = mid - half * g, s1 = mid, s2 = mid + half * g;
            acc += half * (w1 * pl_eval(k3, delta, s0) * pl_correlate_at(k1, k2, delta, s0 + t) +
                           w0 * pl_eval(k3, delta, s1) * pl_correlate_at(k1, k2, delta, s1 + t) +
                           w1 * pl_eval(k3, delta, s2) * pl_correlate_at(k1, k2, delta, s2 + t));
        }
        out[m + outHalf] = acc;
    }
    return out;
}

SurfaceFem::SurfaceFem(const SurfaceMesh1D& surf, const TimeGrid& g) : surface(surf), grid(g) {
    auto sm = assemble_spatial_mass(surface);
    M = sm.M;
    Mlump = sm.Mlump;
    D = assemble_temporal_mass(grid);
    Dlump = lumped_diagonal(D);
    gradOps = assemble_surface_gradient(surface);
    Mllt.compute(M);
    Dllt.compute(D);
    if (Mllt.info() != Eigen::Success || Dllt.info() != Eigen::Success)
        throw SolveFailure("mass factorization failed");
}

double SurfaceFem::lumpedNormSq(const Eigen::MatrixXd& u) const {
    return (Mlump.asDiagonal() * u.cwiseProduct(u) * Dlump.asDiagonal()).sum();
}

double SurfaceFem::massNormSq(const Eigen::MatrixXd& u) const {
    const Eigen::MatrixXd uD = u * D;
    return (Mlump.asDiagonal() * u.cwiseProduct(uD)).sum();
}

void save_field(const SpaceTimeField& u, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open field file for writing: " + path);
    f.write("STF1", 4);
    const uint64_t nv = static_cast<uint64_t>(u.values.rows());
    const uint64_t nt = static_cast<uint64_t>(u.values.cols());
    const double dt = u.grid.step;
    f.write(reinterpret_cast<const char*>(&nv), 8);
    f.write(reinterpret_cast<const char*>(&nt), 8);
    f.write(reinterpret_cast<const char*>(&dt), 8);
    for (int i = 0; i < u.values.rows(); ++i)
        for (int j = 0; j < u.values.cols(); ++j) {
            const double v = u.values(i, j);
            f.write(reinterpret_cast<const char*>(&v), 8);
        }
    if (!f) throw IoError("failed writing field file: " + path);
}

SpaceTimeField load_field(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open field file: " + path);
    char magic[4];
    f.read(magic, 4);
    if (std::memcmp(magic, "STF1", 4) != 0) throw IoError("bad field magic in " + path);
    uint64_t nv = 0, nt = 0;
    double dt = 0.0;
    f.read(reinterpret_cast<char*>(&nv), 8);
    f.read(reinterpret_cast<char*>(&nt), 8);
    f.read(reinterpret_cast<char*>(&dt), 8);
    if (!f || nv == 0 || nt < 2) throw IoError("bad field header in " + path);
    SpaceTimeField u;
    u.grid.nIntervals = static_cast<int>(nt) - 1;
    u.grid.step = dt;
    u.values.resize(static_cast<int>(nv), static_cast<int>(nt));
    for (int i = 0; i < u.values.rows(); ++i)
        for (int j = 0; j < u.values.cols(); ++j) {
            double v;
            f.read(reinterpret_cast<char*>(&v), 8);
            u.values(i, j) = v;
        }
    if (!f) throw IoError("truncated field file: " + path);
    return u;
}

void export_field_csv(const SpaceTimeField& u, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open csv for writing: " + path);
    f.precision(17);
    for (int i = 0; i < u.values.rows(); ++i) {
        for (int j = 0; j < u.values.cols(); ++j) {
            if (j) f << ",";
            f << u.values(i, j);
        }
        f << "\n";
    }
    if (!f) throw IoError("failed writing csv: " + path);
}

SpaceTimeField import_field_csv(const std::string& path, const TimeGrid& grid) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open csv: " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw IoError("empty csv: " + path);
    SpaceTimeField u;
    u.grid = grid;
    u.values.resize(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != rows[0].size()) throw IoError("ragged csv: " + path);
        for (size_t j = 0; j < rows[i].size(); ++j)
            u.values(static_cast<int>(i), static_cast<int>(j)) = rows[i][j];
    }
    return u;
}

} // namespace ecgi
