#include <cmath>

#include "ecgi/errors.hpp"
#include "ecgi/regularizer.hpp"
#include "ecgi/solver.hpp"

namespace ecgi {

namespace {

// 1D P1 stiffness on the closed polyline: per segment [[1,-1],[-1,1]] / len
SpMat surface_stiffness(const SurfaceMesh1D& surface) {
    const int n = surface.nodeCount();
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(4 * n);
    for (int j = 0; j < surface.segmentCount(); ++j) {
        const int a = j, b = (j + 1) % n;
        const double w = 1.0 / surface.segmentLengths[j];
        trip.emplace_back(a, a, w);
        trip.emplace_back(b, b, w);
        trip.emplace_back(a, b, -w);
        trip.emplace_back(b, a, -w);
    }
    SpMat K(n, n);
    K.setFromTriplets(trip.begin(), trip.end());
    return K;
}

SpMat temporal_stiffness(const TimeGrid& grid) {
    const int n = grid.nodeCount();
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(4 * n);
    for (int s = 0; s + 1 < n; ++s) {
        const double w = 1.0 / grid.step;
        trip.emplace_back(s, s, w);
        trip.emplace_back(s + 1, s + 1, w);
        trip.emplace_back(s, s + 1, -w);
        trip.emplace_back(s + 1, s, -w);
    }
    SpMat K(n, n);
    K.setFromTriplets(trip.begin(), trip.end());
    return K;
}

using FieldOp = std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)>;

Eigen::MatrixXd cg_field(const FieldOp& apply, const Eigen::MatrixXd& rhs, double tol,
                         int maxIter) {
    const int r = static_cast<int>(rhs.rows()), c = static_cast<int>(rhs.cols());
    auto applyVec = [&](const Eigen::VectorXd& x) {
        const Eigen::MatrixXd X = Eigen::Map<const Eigen::MatrixXd>(x.data(), r, c);
        Eigen::MatrixXd Y = apply(X);
        return Eigen::VectorXd(Eigen::Map<Eigen::VectorXd>(Y.data(), r * c));
    };
    const Eigen::Map<const Eigen::VectorXd> b(rhs.data(), r * c);
    const Eigen::VectorXd x = cg(applyVec, b, tol, maxIter).x;
    return Eigen::Map<const Eigen::MatrixXd>(x.data(), r, c);
}

} // namespace

SpaceTimeField tik_denoise(const SpaceTimeField& z, double lambdaGamma, double lambdaT,
                           const SurfaceFem& fem, const TikOptions& opt) {
    if (lambdaGamma < 0.0 || lambdaT < 0.0)
        throw ParameterOutOfRange("regularization weights must be nonnegative");
    if (z.vertexCount() != fem.nodeCount() || z.values.cols() != fem.grid.nodeCount())
        throw ShapeMismatch("field shape does not match fem context");
    SpaceTimeField out;
    out.grid = z.grid;
    if (lambdaGamma == 0.0 && lambdaT == 0.0) {
        out.values = z.values;
        return out;
    }
    const SpMat Ksp = surface_stiffness(fem.surface);
    const SpMat Kt = temporal_stiffness(fem.grid);
    const double lg2 = lambdaGamma * lambdaGamma, lt2 = lambdaT * lambdaT;
    auto apply = [&](const Eigen::MatrixXd& u) -> Eigen::MatrixXd {
        Eigen::MatrixXd y = fem.Mlump.asDiagonal() * u * fem.Dlump.asDiagonal();
        if (lg2 > 0.0) y += lg2 * (Ksp * u) * fem.Dlump.asDiagonal();
        if (lt2 > 0.0) y += lt2 * fem.Mlump.asDiagonal() * (u * Kt);
        return y;
    };
    const Eigen::MatrixXd rhs = fem.Mlump.asDiagonal() * z.values * fem.Dlump.asDiagonal();
    const int dof = static_cast<int>(rhs.size());
    out.values = cg_field(apply, rhs, opt.tol, opt.maxIterFactor * dof);
    return out;
}

SpaceTimeField tik_inverse(const Observation& z, double lambdaGamma, double lambdaT,
                           const SurfaceFem& fem, const ForwardMatrix& A,
                           const TikOptions& opt) {
    if (lambdaGamma < 0.0 || lambdaT < 0.0)
        throw ParameterOutOfRange("regularization weights must be nonnegative");
    if (z.values.rows() != A.electrodeCount() || z.values.cols() != fem.grid.nodeCount() ||
        A.heartNodeCount() != fem.nodeCount())
        throw ShapeMismatch("observation/forward shapes do not match fem context");
    const int nSigma = A.electrodeCount();
    const SpMat Ksp = surface_stiffness(fem.surface);
    const SpMat Kt = temporal_stiffness(fem.grid);
    const double lg2 = lambdaGamma * lambdaGamma, lt2 = lambdaT * lambdaT;
    const Eigen::MatrixXd D = Eigen::MatrixXd(fem.D);
    auto apply = [&](const Eigen::MatrixXd& u) -> Eigen::MatrixXd {
        Eigen::MatrixXd y = (1.0 / nSigma) * (A.A.transpose() * (A.A * u)) * D;
        if (lg2 > 0.0) y += lg2 * (Ksp * u) * fem.Dlump.asDiagonal();
        if (lt2 > 0.0) y += lt2 * fem.Mlump.asDiagonal() * (u * Kt);
        return y;
    };
    const Eigen::MatrixXd rhs = (1.0 / nSigma) * (A.A.transpose() * z.values) * D;
    const int dof = static_cast<int>(rhs.size());
    SpaceTimeField out;
    out.grid = z.grid;
    out.values = cg_field(apply, rhs, opt.tol, opt.maxIterFactor * dof);
    return out;
}

namespace {

// forward-difference stack with quadrature weights folded in: the dual prox
// stays the unit-ball projection
struct TvOps {
    Eigen::MatrixXd wx;  // weight per (segment, time node) for the spatial slope
    Eigen::MatrixXd wt;  // weight per (node, time node) for the temporal slope, 0 at the last node
    const SurfaceFem* fem;
    double lg, lt;

    TvOps(const SurfaceFem& f, double lambdaGamma, double lambdaT) : fem(&f) {
        const int n = f.nodeCount(), m = f.grid.nodeCount();
        lg = lambdaGamma;
        lt = lambdaT;
        wx.resize(n, m);
        wt.resize(n, m);
        for (int j = 0; j < n; ++j)
            for (int s = 0; s < m; ++s) {
                const double cell = f.surface.segmentLengths[j] * f.Dlump[s];
                wx(j, s) = lg * cell / f.surface.segmentLengths[j];
                wt(j, s) = (s + 1 < m) ? lt * cell / f.grid.step : 0.0;
            }
    }

    void applyK(const Eigen::MatrixXd& u, Eigen::MatrixXd& px, Eigen::MatrixXd& pt) const {
        const int n = static_cast<int>(u.rows()), m = static_cast<int>(u.cols());
        px.resize(n, m);
        pt.resize(n, m);
        for (int j = 0; j < n; ++j) {
            const int j1 = (j + 1) % n;
            for (int s = 0; s < m; ++s) {
                px(j, s) = wx(j, s) * (u(j1, s) - u(j, s));
                pt(j, s) = (s + 1 < m) ? wt(j, s) * (u(j, s + 1) - u(j, s)) : 0.0;
            }
        }
    }

    Eigen::MatrixXd applyKT(const Eigen::MatrixXd& px, const Eigen::MatrixXd& pt) const {
        const int n = static_cast<int>(px.rows()), m = static_cast<int>(px.cols());
        Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, m);
        for (int j = 0; j < n; ++j) {
            const int j1 = (j + 1) % n;
            for (int s = 0; s < m; ++s) {
                const double vx = wx(j, s) * px(j, s);
                out(j1, s) += vx;
                out(j, s) -= vx;
                if (s + 1 < m) {
                    const double vt = wt(j, s) * pt(j, s);
                    out(j, s + 1) += vt;
                    out(j, s) -= vt;
                }
            }
        }
        return out;
    }

    double normEstimate() const {
        // power method on K^T K
        const int n = static_cast<int>(wx.rows()), m = static_cast<int>(wx.cols());
        Eigen::MatrixXd v = Eigen::MatrixXd::Ones(n, m);
        v(0, 0) += 0.5;  // break the constant direction (K annihilates constants)
        double lam = 0.0;
        Eigen::MatrixXd px, pt;
        for (int it = 0; it < 100; ++it) {
            applyK(v, px, pt);
            Eigen::MatrixXd w = applyKT(px, pt);
            const double nw = w.norm();
            if (nw == 0.0) return 0.0;
            lam = nw;  // v kept unit norm
            v = w / nw;
        }
        return std::sqrt(lam);
    }

    double tvEnergy(const Eigen::MatrixXd& u) const {
        Eigen::MatrixXd px, pt;
        applyK(u, px, pt);
        double acc = 0.0;
        for (int j = 0; j < px.rows(); ++j)
            for (int s = 0; s < px.cols(); ++s)
                acc += std::sqrt(px(j, s) * px(j, s) + pt(j, s) * pt(j, s));
        return acc;
    }
};

void project_dual(Eigen::MatrixXd& px, Eigen::MatrixXd& pt) {
    for (int j = 0; j < px.rows(); ++j)
        for (int s = 0; s < px.cols(); ++s) {
            const double n = std::sqrt(px(j, s) * px(j, s) + pt(j, s) * pt(j, s));
            if (n > 1.0) {
                px(j, s) /= n;
                pt(j, s) /= n;
            }
        }
}

} // namespace

TvResult tv_denoise(const SpaceTimeField& z, double lambdaGamma, double lambdaT,
                    const SurfaceFem& fem, const TvOptions& opt) {
    if (lambdaGamma < 0.0 || lambdaT < 0.0)
        throw ParameterOutOfRange("regularization weights must be nonnegative");
    if (z.vertexCount() != fem.nodeCount() || z.values.cols() != fem.grid.nodeCount())
        throw ShapeMismatch("field shape does not match fem context");
    TvResult res;
    res.u.grid = z.grid;
    if (lambdaGamma == 0.0 && lambdaT == 0.0) {
        res.u.values = z.values;
        return res;
    }

    const TvOps ops(fem, lambdaGamma, lambdaT);
    const double Knorm = ops.normEstimate();
    const double tau = 0.99 / std::max(Knorm, 1e-12);
    const double sigma = tau;

    // weighted fidelity 1/2 ||u - z||_W^2, W = Mlump (x) Dlump
    Eigen::MatrixXd Wdiag(z.values.rows(), z.values.cols());
    for (int j = 0; j < Wdiag.rows(); ++j)
        for (int s = 0; s < Wdiag.cols(); ++s) Wdiag(j, s) = fem.Mlump[j] * fem.Dlump[s];

    Eigen::MatrixXd u = z.values, ubar = z.values;
    Eigen::MatrixXd px = Eigen::MatrixXd::Zero(u.rows(), u.cols());
    Eigen::MatrixXd pt = px;

    auto energy = [&](const Eigen::MatrixXd& v) {
        return 0.5 * (Wdiag.cwiseProduct((v - z.values).cwiseAbs2())).sum() + ops.tvEnergy(v);
    };

    double bestEnergy = energy(u);
    Eigen::MatrixXd best = u;
    Eigen::MatrixXd kx, kt;
    res.converged = false;
    for (int it = 0; it < opt.maxIter; ++it) {
        ops.applyK(ubar, kx, kt);
        px += sigma * kx;
        pt += sigma * kt;
        project_dual(px, pt);

        const Eigen::MatrixXd v = u - tau * ops.applyKT(px, pt);
        const Eigen::MatrixXd denom =
            Wdiag + Eigen::MatrixXd::Constant(v.rows(), v.cols(), 1.0 / tau);
        const Eigen::MatrixXd uNext =
            (Wdiag.cwiseProduct(z.values) + v / tau).cwiseQuotient(denom);
        ubar = 2.0 * uNext - u;
        const double rel = (uNext - u).norm() / std::max(u.norm(), 1e-30);
        u = uNext;
        res.iterations = it + 1;
        const double en = energy(u);
        if (en < bestEnergy) {
            bestEnergy = en;
            best = u;
        }
        if (rel <= opt.tol) {
            res.converged = true;
            break;
        }
    }
    res.u.values = res.converged ? u : best;
    return res;
}

TvResult tv_inverse(const Observation& z, double lambdaGamma, double lambdaT,
                    const SurfaceFem& fem, const ForwardMatrix& A, const TvOptions& opt) {
    if (lambdaGamma < 0.0 || lambdaT < 0.0)
        throw ParameterOutOfRange("regularization weights must be nonnegative");
    if (z.values.rows() != A.electrodeCount() || z.values.cols() != fem.grid.nodeCount() ||
        A.heartNodeCount() != fem.nodeCount())
        throw ShapeMismatch("observation/forward shapes do not match fem context");
    const int nSigma = A.electrodeCount();
    const int nV = fem.nodeCount(), nT = fem.grid.nodeCount();

    const TvOps ops(fem, lambdaGamma, lambdaT);

    // operator norm of the stacked map u -> (K_tv u, A u)
    double Knorm;
    {
        Eigen::MatrixXd v = Eigen::MatrixXd::Ones(nV, nT);
        v(0, 0) += 0.5;
        Eigen::MatrixXd px, pt;
        double lam = 1.0;
        for (int it = 0; it < 150; ++it) {
            ops.applyK(v, px, pt);
            Eigen::MatrixXd w = ops.applyKT(px, pt) + A.A.transpose() * (A.A * v);
            const double nw = w.norm();
            if (nw == 0.0) break;
            lam = nw;
            v = w / nw;
        }
        Knorm = std::sqrt(lam);
    }
    const double tau = 0.99 / std::max(Knorm, 1e-12);
    const double sigma = tau;

    // fidelity in the dual block: F2(q) = 1/(2 nSigma) sum_s Dlump_s (q - z)^2
    Eigen::MatrixXd cInv(nSigma, nT);
    for (int i = 0; i < nSigma; ++i)
        for (int s = 0; s < nT; ++s) cInv(i, s) = nSigma / fem.Dlump[s];

    Eigen::MatrixXd u = Eigen::MatrixXd::Zero(nV, nT), ubar = u;
    Eigen::MatrixXd px = Eigen::MatrixXd::Zero(nV, nT), pt = px;
    Eigen::MatrixXd q = Eigen::MatrixXd::Zero(nSigma, nT);

    auto energy = [&](const Eigen::MatrixXd& v) {
        const Eigen::MatrixXd r = A.A * v - z.values;
        double fid = 0.0;
        for (int i = 0; i < nSigma; ++i)
            for (int s = 0; s < nT; ++s) fid += fem.Dlump[s] * r(i, s) * r(i, s);
        return 0.5 * fid / nSigma + ops.tvEnergy(v);
    };

    TvResult res;
    res.u.grid = z.grid;
    double bestEnergy = energy(u);
    Eigen::MatrixXd best = u;
    Eigen::MatrixXd kx, kt;
    res.converged = false;
    for (int it = 0; it < opt.maxIter; ++it) {
        ops.applyK(ubar, kx, kt);
        px += sigma * kx;
        pt += sigma * kt;
        project_dual(px, pt);
        q += sigma * (A.A * ubar);
        // prox of sigma F2*: per entry (y - sigma z) / (1 + sigma c^{-1})
        for (int i = 0; i < nSigma; ++i)
            for (int s = 0; s < nT; ++s)
                q(i, s) = (q(i, s) - sigma * z.values(i, s)) / (1.0 + sigma * cInv(i, s));

        const Eigen::MatrixXd uNext = u - tau * (ops.applyKT(px, pt) + A.A.transpose() * q);
        ubar = 2.0 * uNext - u;
        const double rel = (uNext - u).norm() / std::max(u.norm(), 1e-30);
        u = uNext;
        res.iterations = it + 1;
        const double en = energy(u);
        if (en < bestEnergy) {
            bestEnergy = en;
            best = u;
        }
        if (rel <= opt.tol && it > 0) {
            res.converged = true;
            break;
        }
    }
    res.u.values = res.converged ? u : best;
    return res;
}

} // namespace ecgi
