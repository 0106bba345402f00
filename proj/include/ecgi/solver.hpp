#ifndef ECGI_SOLVER_HPP
#define ECGI_SOLVER_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ecgi/femcore.hpp"
#include "ecgi/forward.hpp"
#include "ecgi/regularizer.hpp"

namespace ecgi {

struct SolveReport {
    int iterations = 0;
    int restarts = 0;
    double finalObjective = 0.0;
    std::vector<double> objectiveTrace;  // f at each accepted iterate u^{n+1}
    std::vector<uint8_t> restartFlags;
    std::vector<double> tauTrace;
    double wallTime = 0.0;
    bool converged = false;
};

void save_report(const SolveReport& report, const std::string& path);

// First-order problem over nodal coefficient matrices. valueGrad returns the
// objective and fills the gradient with respect to the declared inner
// product; gradNormSq measures the gradient in that same inner product.
struct EnergyProblem {
    int rows = 0, cols = 0;
    std::function<double(const Eigen::MatrixXd&, Eigen::MatrixXd&)> valueGrad;
    std::function<double(const Eigen::MatrixXd&)> value;
    std::function<double(const Eigen::MatrixXd&)> gradNormSq;
    double lipschitz = 1.0;
};

struct AgdResult {
    Eigen::MatrixXd u;
    SolveReport report;
};

AgdResult agd_restart(const EnergyProblem& problem, const Eigen::MatrixXd& u0, int maxIter,
                      double tol);

struct CgResult {
    Eigen::VectorXd x;
    int iterations = 0;
    double relResidual = 0.0;
};

CgResult cg(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& apply,
            const Eigen::VectorXd& rhs, double tol, int maxIter);

// Largest eigenvalue of a self-adjoint positive operator on R^dim; innerWeight
// (optional, elementwise) defines the inner product in which the operator is
// self-adjoint.
double power_method(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& apply, int dim,
                    int maxIter, uint64_t seed, double tol = 1e-10,
                    const Eigen::VectorXd* innerWeight = nullptr);

struct ProxOptions {
    int maxIter = 5000;
    double tol = 1e-7;
    int powerIter = 200;
    double regLambdaMax = -1.0;  // cached lambda_max of the channel operator; <0: compute
    Eigen::MatrixXd u0;          // optional warm start (empty: Alg. 1 zero start)
};

struct ProxResult {
    SpaceTimeField u;
    SolveReport report;
    double lipschitz = 0.0;
};

// Gaussian denoising: argmin 1/2 ||u - z||^2 + R(u) with the lumped space-time
// norm; mu_i are scaled by kappa.
ProxResult prox_denoise(const SpaceTimeField& z, const RegularizerModel& model, double kappa,
                        const SurfaceFem& fem, const ProxOptions& opt = {});

struct InverseOptions {
    int maxIter = 20000;
    double tol = 1e-7;
    int powerIter = 200;
    double kappa = 1.0;          // mu scaling of the model
    double regLambdaMax = -1.0;  // cached lambda_max of the channel operator; <0: compute
    double fidLipschitz = -1.0;  // cached fidelity Lipschitz constant; <0: compute
};

ProxResult inverse_reconstruct(const Observation& z, const RegularizerModel& model,
                               const ForwardMatrix& A, const SurfaceFem& fem,
                               const InverseOptions& opt = {});

// Lipschitz pieces (exposed for tests and caching across solves)
double fidelity_lipschitz(const ForwardMatrix& A, const SurfaceFem& fem, int powerIter = 200);
// lambda_max of sum_i L~_i* L~_i, optionally composed with the time-axis
// conversion into the consistent-D inner product used by the inverse solve
double foe_operator_lambda_max(const FoeContext& ctx, bool inverseInnerProduct,
                               int powerIter = 200);

// --- derivative-free tuning of a small trainable subset ---

struct TrainSample {
    SpaceTimeField clean;
    SpaceTimeField noisy;
    double kappa = 0.1;
};

struct SpsaOptions {
    double stepSize = 0.08;       // a0
    double perturbation = 0.05;   // c0
    double stepDecay = 0.602;
    double perturbDecay = 0.101;
    double stepOffset = 10.0;
    uint64_t seed = 7;
    bool trainKernels = true;
    ProxOptions prox = makeTrainProx();
    int threads = 1;

    static ProxOptions makeTrainProx() {
        ProxOptions p;
        p.maxIter = 800;
        p.tol = 1e-6;
        p.powerIter = 120;
        return p;
    }
};

struct SpsaResult {
    RegularizerModel model;
    std::vector<double> lossTrace;  // best-so-far loss after each step
    double initialLoss = 0.0;
    double finalLoss = 0.0;
};

// prox-denoising loss (1/M) sum 1/sqrt(kappa_m) || v_m - prox(z_m) ||_{Y_h}
double denoise_loss(const RegularizerModel& model, const std::vector<TrainSample>& data,
                    const SurfaceFem& fem, const ProxOptions& opt, int threads = 1);

SpsaResult spsa_train(const std::vector<TrainSample>& data, const RegularizerModel& model0,
                      int budget, const SurfaceFem& fem, const SpsaOptions& opt = {});

} // namespace ecgi

#endif
