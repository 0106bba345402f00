#ifndef ECGI_REGULARIZER_HPP
#define ECGI_REGULARIZER_HPP

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "ecgi/femcore.hpp"
#include "ecgi/forward.hpp"

namespace ecgi {

using Vec4 = Eigen::Vector4d;
using Mat4 = Eigen::Matrix4d;

// Which phi' formula to evaluate: the analytic derivative of the implemented
// value (default, finite-difference consistent) or the closed form quoted in
// the reference derivation, kept for comparison.
enum class GradSource { Analytic, PaperDisplay };

// Euclidean projection onto the unit l1 ball in R^4.
Vec4 project_l1_ball(const Vec4& y);

// Envelope building block: omega_mu(y) = ||y - mu P||_inf + mu/2 ||P||_2^2
// + epsOmega/2 ||y/mu||_2^2 with P = Proj_l1(y/mu).
double omega_value(const Vec4& y, double mu, double epsOmega);
Vec4 omega_grad(const Vec4& y, double mu, double epsOmega,
                GradSource src = GradSource::Analytic);

struct ExpertParams {
    double mu = 1.0;   // base envelope scale m_i; effective scale is kappa * m_i
    double eta = 2.0;
    Mat4 Q = Mat4::Zero();
    Eigen::VectorXd kernel;                    // direct nodal values (odd length), or
    std::vector<Eigen::VectorXd> subkernels;   // three half-width-2 sub-kernels

    bool hasSubkernels() const { return !subkernels.empty(); }
    // nodal values actually applied on a grid with step delta
    Eigen::VectorXd effectiveKernel(double delta) const;
};

// phi(y) = mu omega_mu(y) - mu omega_{eta mu}(Q y), with mu = muScale * e.mu.
double phi_value(const Vec4& y, const ExpertParams& e, double epsOmega, double muScale = 1.0);
Vec4 phi_grad(const Vec4& y, const ExpertParams& e, double epsOmega, double muScale = 1.0,
              GradSource src = GradSource::Analytic);

// rigorous Lipschitz bound for phi' with the given formula
double phi_grad_lipschitz(const ExpertParams& e, double epsOmega, double muScale,
                          GradSource src);

struct RegularizerModel {
    double lambda = 1.0;     // global weight lambda_theta
    double epsTheta = 0.01;  // zero-order channel scale
    double epsOmega = 1e-3;
    bool convexMode = false;  // forces Q = 0 (difference term disabled)
    std::vector<ExpertParams> experts;
    GradSource gradSource = GradSource::Analytic;
    bool constrained = true;  // nonnegativity conditions hold for every expert

    int expertCount() const { return static_cast<int>(experts.size()); }
};

// Checks invariants; violations of the nonnegativity conditions downgrade the
// model (constrained = false) with a warning on stderr. Throws on hard errors.
void validate_model(RegularizerModel& model);

void save_model(const RegularizerModel& model, const std::string& path);
RegularizerModel load_model(const std::string& path);

// Cached channel operators of one model on one discretization; independent of
// the envelope scaling kappa and of the weights lambda, mu.
struct FoeContext {
    const SurfaceFem* fem = nullptr;
    double epsTheta = 0.0;
    Eigen::MatrixXd Cx, Cy;        // P^sp grad channel, nodal -> nodal
    Eigen::MatrixXd CxAdj, CyAdj;  // lumped-weighted adjoints
    std::vector<Eigen::MatrixXd> W;     // per-expert temporal kernel maps
    std::vector<Eigen::MatrixXd> WAdj;  // lumped-weighted adjoints

    FoeContext(const RegularizerModel& model, const SurfaceFem& fem);
};

struct FoeResult {
    double value = 0.0;
    SpaceTimeField grad;
};

// Lumped-quadrature FoE energy and its gradient with respect to the
// (lumped space) x (lumped time) mass inner product; kappa scales mu_i.
FoeResult foe_value_grad(const SpaceTimeField& u, const RegularizerModel& model,
                         const FoeContext& ctx, double kappa = 1.0, bool wantGrad = true);

// v -> sum_i L~_i* L~_i v with the quadrature-weighted adjoints; the Gauss
// seminorm operator behind the regularizer Lipschitz estimate.
Eigen::MatrixXd foe_normal_apply(const FoeContext& ctx, const Eigen::MatrixXd& v);

// max_i Lip(phi_i') for the model at scaling kappa
double model_phi_lipschitz(const RegularizerModel& model, double kappa);

// --- handcrafted baselines (lumped mass matrices throughout) ---

struct TikOptions {
    double tol = 1e-8;
    int maxIterFactor = 10;  // iteration cap = factor * dof
};

SpaceTimeField tik_denoise(const SpaceTimeField& z, double lambdaGamma, double lambdaT,
                           const SurfaceFem& fem, const TikOptions& opt = {});
SpaceTimeField tik_inverse(const Observation& z, double lambdaGamma, double lambdaT,
                           const SurfaceFem& fem, const ForwardMatrix& A,
                           const TikOptions& opt = {});

struct TvOptions {
    double tol = 1e-6;
    int maxIter = 20000;
};

struct TvResult {
    SpaceTimeField u;
    bool converged = true;
    int iterations = 0;
};

TvResult tv_denoise(const SpaceTimeField& z, double lambdaGamma, double lambdaT,
                    const SurfaceFem& fem, const TvOptions& opt = {});
TvResult tv_inverse(const Observation& z, double lambdaGamma, double lambdaT,
                    const SurfaceFem& fem, const ForwardMatrix& A, const TvOptions& opt = {});

} // namespace ecgi

#endif
