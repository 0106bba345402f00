#include "ecgi/regularizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ecgi/errors.hpp"

namespace ecgi {

Vec4 project_l1_ball(const Vec4& y) {
    if (y.cwiseAbs().sum() <= 1.0) return y;
    // sort-based thresholding
    Vec4 a = y.cwiseAbs();
    std::array<double, 4> s{a[0], a[1], a[2], a[3]};
    std::sort(s.begin(), s.end(), std::greater<double>());
    double css = 0.0, tau = 0.0;
    for (int k = 0; k < 4; ++k) {
        css += s[k];
        const double cand = (css - 1.0) / (k + 1);
        if (s[k] - cand > 0.0) tau = cand;
    }
    Vec4 out;
    for (int i = 0; i < 4; ++i) {
        const double m = std::max(a[i] - tau, 0.0);
        out[i] = (y[i] >= 0.0) ? m : -m;
    }
    return out;
}

double omega_value(const Vec4& y, double mu, double epsOmega) {
    if (mu <= 0.0) throw ParameterOutOfRange("omega: mu must be positive");
    const Vec4 p = project_l1_ball(y / mu);
    return (y - mu * p).cwiseAbs().maxCoeff() + 0.5 * mu * p.squaredNorm() +
           0.5 * epsOmega * (y / mu).squaredNorm();
}

Vec4 omega_grad(const Vec4& y, double mu, double epsOmega, GradSource src) {
    if (mu <= 0.0) throw ParameterOutOfRange("omega: mu must be positive");
    const Vec4 p = project_l1_ball(y / mu);
    if (src == GradSource::PaperDisplay) return p + (epsOmega / mu) * y;
    return p + (epsOmega / (mu * mu)) * y;
}

double phi_value(const Vec4& y, const ExpertParams& e, double epsOmega, double muScale) {
    const double mu = std::max(muScale * e.mu, 1e-8);
    return mu * omega_value(y, mu, epsOmega) - mu * omega_value(e.Q * y, e.eta * mu, epsOmega);
}

Vec4 phi_grad(const Vec4& y, const ExpertParams& e, double epsOmega, double muScale,
              GradSource src) {
    const double mu = std::max(muScale * e.mu, 1e-8);
    if (src == GradSource::PaperDisplay) {
        // quoted closed form, taken verbatim
        const Vec4 p1 = project_l1_ball(y / mu);
        const Vec4 p2 = project_l1_ball(e.Q * y / (mu * e.eta));
        return mu * (p1 - e.Q.transpose() * p2 +
                     epsOmega * (Mat4::Identity() - e.Q.transpose() * e.Q) * y);
    }
    // derivative of the implemented value
    return mu * omega_grad(y, mu, epsOmega, GradSource::Analytic) -
           mu * e.Q.transpose() * omega_grad(e.Q * y, e.eta * mu, epsOmega, GradSource::Analytic);
}

double phi_grad_lipschitz(const ExpertParams& e, double epsOmega, double muScale,
                          GradSource src) {
    const double mu = std::max(muScale * e.mu, 1e-8);
    const double q2 = e.Q.squaredNorm() > 0.0
                          ? e.Q.jacobiSvd().singularValues().maxCoeff()
                          : 0.0;
    if (src == GradSource::PaperDisplay) {
        const Mat4 S = Mat4::Identity() - e.Q.transpose() * e.Q;
        const double sNorm = S.jacobiSvd().singularValues().maxCoeff();
        return std::max(1.0, q2 * q2 / e.eta) + mu * epsOmega * sNorm;
    }
    // Jacobian = (DP1 + eps/mu I) - (1/eta Q^T DP2 Q + eps q2^2/(eta^2 mu) ...),
    // both brackets symmetric PSD, so the norm is bounded by the larger one
    const double first = 1.0 + epsOmega / mu;
    const double second = q2 * q2 / e.eta + epsOmega * q2 * q2 / (e.eta * e.eta * mu);
    return std::max(first, second);
}

Eigen::VectorXd ExpertParams::effectiveKernel(double delta) const {
    if (!hasSubkernels()) return kernel;
    return compose_kernels(subkernels[0], subkernels[1], subkernels[2], delta);
}

void validate_model(RegularizerModel& model) {
    if (model.expertCount() < 1) throw ParameterOutOfRange("model needs at least one expert");
    // lambda may be zero (regularizer disabled); the rest must be positive
    if (model.lambda < 0.0 || model.epsTheta <= 0.0 || model.epsOmega <= 0.0)
        throw ParameterOutOfRange("lambda must be nonnegative; epsTheta, epsOmega positive");
    model.constrained = true;
    for (auto& e : model.experts) {
        if (e.mu < 1e-8) throw ParameterOutOfRange("expert mu below 1e-8");
        if (e.eta <= 0.0) throw ParameterOutOfRange("expert eta must be positive");
        if (model.convexMode) e.Q.setZero();
        if (e.hasSubkernels()) {
            if (e.subkernels.size() != 3)
                throw ParameterOutOfRange("expected exactly 3 sub-kernels");
            for (const auto& k : e.subkernels)
                if (k.size() != 5) throw ParameterOutOfRange("sub-kernels must have 5 values");
        } else {
            if (e.kernel.size() < 3 || e.kernel.size() % 2 == 0)
                throw ParameterOutOfRange("kernel must have odd length >= 3");
        }
        const double qInf = e.Q.cwiseAbs().rowwise().sum().maxCoeff();
        const double q2 = e.Q.squaredNorm() > 0.0
                              ? e.Q.jacobiSvd().singularValues().maxCoeff()
                              : 0.0;
        if (qInf > 1.0 + 1e-12 || e.eta <= q2 * q2) {
            if (model.constrained)
                std::cerr << "warning: expert violates nonnegativity conditions "
                             "(||Q||_inf <= 1, eta > ||Q||_2^2); model treated as unconstrained\n";
            model.constrained = false;
        }
    }
}

void save_model(const RegularizerModel& model, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open model file for writing: " + path);
    f.precision(17);
    f << "foe-model v1\n";
    f << "lambda " << model.lambda << "\n";
    f << "epsTheta " << model.epsTheta << "\n";
    f << "epsOmega " << model.epsOmega << "\n";
    f << "nExperts " << model.expertCount() << "\n";
    f << "convexMode " << (model.convexMode ? 1 : 0) << "\n";
    for (const auto& e : model.experts) {
        f << "mu " << e.mu << "\n";
        f << "eta " << e.eta << "\n";
        for (int i = 0; i < 4; ++i) {
            for (int j = 0; j < 4; ++j) f << (j ? " " : "") << e.Q(i, j);
            f << "\n";
        }
        if (e.hasSubkernels()) {
            f << "subkernels 3\n";
            for (const auto& k : e.subkernels) {
                for (int i = 0; i < k.size(); ++i) f << (i ? " " : "") << k[i];
                f << "\n";
            }
        } else {
            f << "kernel " << e.kernel.size() << "\n";
            for (int i = 0; i < e.kernel.size(); ++i) f << (i ? " " : "") << e.kernel[i];
            f << "\n";
        }
    }
    if (!f) throw IoError("failed writing model file: " + path);
}

RegularizerModel load_model(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open model file: " + path);
    std::string header;
    std::getline(f, header);
    if (header != "foe-model v1") throw IoError("bad model header in " + path);

    RegularizerModel model;
    auto expectKey = [&](const char* key) {
        std::string word;
        f >> word;
        if (word != key) throw IoError(std::string("expected key '") + key + "' in " + path);
    };
    int nExperts = 0, convex = 0;
    expectKey("lambda");
    f >> model.lambda;
    expectKey("epsTheta");
    f >> model.epsTheta;
    expectKey("epsOmega");
    f >> model.epsOmega;
    expectKey("nExperts");
    f >> nExperts;
    expectKey("convexMode");
    f >> convex;
    model.convexMode = convex != 0;
    if (!f || nExperts < 1) throw IoError("bad model globals in " + path);

    model.experts.resize(nExperts);
    for (auto& e : model.experts) {
        expectKey("mu");
        f >> e.mu;
        expectKey("eta");
        f >> e.eta;
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) f >> e.Q(i, j);
        std::string word;
        f >> word;
        if (word == "subkernels") {
            int n = 0;
            f >> n;
            if (n != 3) throw IoError("expected 3 sub-kernels in " + path);
            e.subkernels.assign(3, Eigen::VectorXd(5));
            for (auto& k : e.subkernels)
                for (int i = 0; i < 5; ++i) f >> k[i];
        } else if (word == "kernel") {
            int n = 0;
            f >> n;
            if (n < 3 || n % 2 == 0) throw IoError("bad kernel length in " + path);
            e.kernel.resize(n);
            for (int i = 0; i < n; ++i) f >> e.kernel[i];
        } else {
            throw IoError("expected 'kernel' or 'subkernels' in " + path);
        }
    }
    if (!f) throw IoError("truncated model file: " + path);
    validate_model(model);
    return model;
}

FoeContext::FoeContext(const RegularizerModel& model, const SurfaceFem& f)
    : fem(&f), epsTheta(model.epsTheta) {
    const int n = f.nodeCount();
    // P^sp grad channel: solve M C = B G with b_i = sum_j p_j |J_j|/2
    SpMat B(n, n);  // node x segment incidence weighted by half segment length
    {
        std::vector<Eigen::Triplet<double>> trip;
        for (int j = 0; j < f.surface.segmentCount(); ++j) {
            const double w = f.surface.segmentLengths[j] / 2.0;
            trip.emplace_back(j, j, w);
            trip.emplace_back((j + 1) % n, j, w);
        }
        B.setFromTriplets(trip.begin(), trip.end());
    }
    Cx = f.Mllt.solve(Eigen::MatrixXd(B * f.gradOps.Gx));
    Cy = f.Mllt.solve(Eigen::MatrixXd(B * f.gradOps.Gy));
    const Eigen::VectorXd mInv = f.Mlump.cwiseInverse();
    CxAdj = mInv.asDiagonal() * Cx.transpose() * f.Mlump.asDiagonal();
    CyAdj = mInv.asDiagonal() * Cy.transpose() * f.Mlump.asDiagonal();

    const Eigen::VectorXd dInv = f.Dlump.cwiseInverse();
    W.reserve(model.expertCount());
    WAdj.reserve(model.expertCount());
    for (const auto& e : model.experts) {
        W.push_back(temporal_kernel_map(f.grid, e.effectiveKernel(f.grid.step)));
        WAdj.push_back(dInv.asDiagonal() * W.back().transpose() * f.Dlump.asDiagonal());
    }
}

FoeResult foe_value_grad(const SpaceTimeField& u, const RegularizerModel& model,
                         const FoeContext& ctx, double kappa, bool wantGrad) {
    const SurfaceFem& fem = *ctx.fem;
    if (u.vertexCount() != fem.nodeCount() || u.values.cols() != fem.grid.nodeCount())
        throw ShapeMismatch("field shape does not match fem context");
    if (static_cast<int>(ctx.W.size()) != model.expertCount())
        throw ShapeMismatch("context expert count does not match model");

    const int nV = u.vertexCount(), nT = static_cast<int>(u.values.cols());
    const Eigen::MatrixXd gx = ctx.Cx * u.values;
    const Eigen::MatrixXd gy = ctx.Cy * u.values;

    FoeResult out;
    out.grad.grid = u.grid;
    if (wantGrad) out.grad.values = Eigen::MatrixXd::Zero(nV, nT);

    Eigen::MatrixXd f0, f1, f2, f3;
    for (int i = 0; i < model.expertCount(); ++i) {
        const auto& e = model.experts[i];
        const Eigen::MatrixXd chK = u.values * ctx.W[i].transpose();
        if (wantGrad) {
            f0.resize(nV, nT);
            f1.resize(nV, nT);
            f2.resize(nV, nT);
            f3.resize(nV, nT);
        }
        double acc = 0.0;
        for (int m = 0; m < nT; ++m) {
            const double dm = fem.Dlump[m];
            for (int j = 0; j < nV; ++j) {
                const Vec4 y(model.epsTheta * u.values(j, m), gx(j, m), gy(j, m), chK(j, m));
                acc += fem.Mlump[j] * dm * phi_value(y, e, model.epsOmega, kappa);
                if (wantGrad) {
                    const Vec4 g =
                        phi_grad(y, e, model.epsOmega, kappa, model.gradSource);
                    f0(j, m) = g[0];
                    f1(j, m) = g[1];
                    f2(j, m) = g[2];
                    f3(j, m) = g[3];
                }
            }
        }
        out.value += model.lambda * acc;
        if (wantGrad) {
            out.grad.values += model.lambda *
                               (model.epsTheta * f0 + ctx.CxAdj * f1 + ctx.CyAdj * f2 +
                                f3 * ctx.WAdj[i].transpose());
        }
    }
    return out;
}

Eigen::MatrixXd foe_normal_apply(const FoeContext& ctx, const Eigen::MatrixXd& v) {
    const int nc = static_cast<int>(ctx.W.size());
    Eigen::MatrixXd out = nc * (ctx.epsTheta * ctx.epsTheta * v +
                                ctx.CxAdj * (ctx.Cx * v) + ctx.CyAdj * (ctx.Cy * v));
    for (int i = 0; i < nc; ++i)
        out += (v * ctx.W[i].transpose()) * ctx.WAdj[i].transpose();
    return out;
}

double model_phi_lipschitz(const RegularizerModel& model, double kappa) {
    double m = 0.0;
    for (const auto& e : model.experts)
        m = std::max(m, phi_grad_lipschitz(e, model.epsOmega, kappa, model.gradSource));
    return m;
}

} // namespace ecgi
