#include "ecgi/solver.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <thread>

#include "ecgi/errors.hpp"
#include "ecgi/rng.hpp"

namespace ecgi {

void save_report(const SolveReport& report, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open report file for writing: " + path);
    f.precision(17);
    f << "iter f restart\n";
    for (size_t i = 0; i < report.objectiveTrace.size(); ++i)
        f << (i + 1) << " " << report.objectiveTrace[i] << " "
          << (i < report.restartFlags.size() ? int(report.restartFlags[i]) : 0) << "\n";
    if (!f) throw IoError("failed writing report file: " + path);
}

CgResult cg(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& apply,
            const Eigen::VectorXd& rhs, double tol, int maxIter) {
    CgResult res;
    const double bNorm = rhs.norm();
    if (bNorm == 0.0) {
        res.x = Eigen::VectorXd::Zero(rhs.size());
        return res;
    }
    Eigen::VectorXd x = Eigen::VectorXd::Zero(rhs.size());
    Eigen::VectorXd r = rhs;
    Eigen::VectorXd p = r;
    double rsold = r.squaredNorm();
    for (int it = 0; it < maxIter; ++it) {
        if (std::sqrt(rsold) <= tol * bNorm) {
            res.x = x;
            res.iterations = it;
            res.relResidual = std::sqrt(rsold) / bNorm;
            return res;
        }
        const Eigen::VectorXd Ap = apply(p);
        const double alpha = rsold / p.dot(Ap);
        x += alpha * p;
        r -= alpha * Ap;
        const double rsnew = r.squaredNorm();
        p = r + (rsnew / rsold) * p;
        rsold = rsnew;
    }
    if (std::sqrt(rsold) <= tol * bNorm) {
        res.x = x;
        res.iterations = maxIter;
        res.relResidual = std::sqrt(rsold) / bNorm;
        return res;
    }
    throw CGDivergence("cg did not reach tolerance within the iteration cap");
}

double power_method(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& apply, int dim,
                    int maxIter, uint64_t seed, double tol,
                    const Eigen::VectorXd* innerWeight) {
    auto dot = [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
        if (innerWeight) return a.cwiseProduct(*innerWeight).dot(b);
        return a.dot(b);
    };
    for (int attempt = 0; attempt < 3; ++attempt) {
        Rng rng(seed + attempt);
        Eigen::VectorXd v(dim);
        for (int i = 0; i < dim; ++i) v[i] = rng.normal();
        v /= v.norm();
        double lambda = 0.0;
        bool dead = false;
        for (int it = 0; it < maxIter; ++it) {
            const Eigen::VectorXd Av = apply(v);
            const double nAv = Av.norm();
            if (nAv == 0.0) {
                dead = true;
                break;
            }
            const double est = dot(v, Av) / dot(v, v);
            v = Av / nAv;
            if (it > 0 && std::abs(est - lambda) <= tol * std::abs(est)) return est;
            lambda = est;
        }
        if (!dead) return lambda;
    }
    throw ZeroIterate("power method start vectors annihilated by the operator");
}

AgdResult agd_restart(const EnergyProblem& problem, const Eigen::MatrixXd& u0, int maxIter,
                      double tol) {
    const auto t0 = std::chrono::steady_clock::now();
    AgdResult res;
    const double invL = 1.0 / problem.lipschitz;

    Eigen::MatrixXd u = u0, v = u0;
    Eigen::MatrixXd g(problem.rows, problem.cols);
    double tau = 1.0;
    double fPrev = std::numeric_limits<double>::infinity();

    for (int n = 0; n < maxIter; ++n) {
        problem.valueGrad(v, g);
        const Eigen::MatrixXd uNext = v - invL * g;
        const double tauNext = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * tau * tau));

        const double fNext = problem.value(uNext);
        if (!std::isfinite(fNext))
            throw NonFiniteObjective("objective became non-finite at iteration " +
                                     std::to_string(n + 1));

        Eigen::MatrixXd vNext = uNext + ((tau - 1.0) / tauNext) * (uNext - u);
        double tauOut = tauNext;
        const bool restart = fNext > fPrev;
        if (restart) {
            vNext = uNext;
            tauOut = 1.0;
            ++res.report.restarts;
        }

        res.report.objectiveTrace.push_back(fNext);
        res.report.restartFlags.push_back(restart ? 1 : 0);
        res.report.tauTrace.push_back(tauOut);
        res.report.iterations = n + 1;

        u = uNext;
        v = vNext;
        tau = tauOut;
        fPrev = fNext;

        // grad at v^n; coincides with the iterate gradient at stationarity
        if (problem.gradNormSq(g) <=
            tol * tol * (1.0 + std::abs(fNext)) * (1.0 + std::abs(fNext))) {
            res.report.converged = true;
            break;
        }
    }
    res.u = u;
    res.report.finalObjective = fPrev;
    res.report.wallTime =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

namespace {

Eigen::VectorXd flatten(const Eigen::MatrixXd& m) {
    return Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
}

Eigen::MatrixXd unflatten(const Eigen::VectorXd& v, int rows, int cols) {
    return Eigen::Map<const Eigen::MatrixXd>(v.data(), rows, cols);
}

Eigen::VectorXd lumped_weights_flat(const SurfaceFem& fem) {
    const int nV = fem.nodeCount(), nT = fem.grid.nodeCount();
    Eigen::MatrixXd w(nV, nT);
    for (int j = 0; j < nV; ++j)
        for (int s = 0; s < nT; ++s) w(j, s) = fem.Mlump[j] * fem.Dlump[s];
    return flatten(w);
}

} // namespace

double foe_operator_lambda_max(const FoeContext& ctx, bool inverseInnerProduct,
                               int powerIter) {
    const SurfaceFem& fem = *ctx.fem;
    const int nV = fem.nodeCount(), nT = fem.grid.nodeCount();
    Eigen::MatrixXd Cdd;  // D^{-1} Dlump, time-axis conversion to the consistent-D inner product
    if (inverseInnerProduct)
        Cdd = fem.Dllt.solve(Eigen::MatrixXd(fem.Dlump.asDiagonal()));
    auto apply = [&](const Eigen::VectorXd& x) {
        Eigen::MatrixXd V = unflatten(x, nV, nT);
        Eigen::MatrixXd out = foe_normal_apply(ctx, V);
        if (inverseInnerProduct) out = out * Cdd.transpose();
        return flatten(out);
    };
    const Eigen::VectorXd w = lumped_weights_flat(fem);
    return power_method(apply, nV * nT, powerIter, 99, 1e-10, &w);
}

double fidelity_lipschitz(const ForwardMatrix& A, const SurfaceFem& fem, int powerIter) {
    const int nV = fem.nodeCount();
    const Eigen::VectorXd mInv = fem.Mlump.cwiseInverse();
    auto apply = [&](const Eigen::VectorXd& x) {
        return Eigen::VectorXd(mInv.asDiagonal() * (A.A.transpose() * (A.A * x)));
    };
    const Eigen::VectorXd w = fem.Mlump;
    return power_method(apply, nV, powerIter, 99, 1e-10, &w) / A.electrodeCount();
}

ProxResult prox_denoise(const SpaceTimeField& z, const RegularizerModel& model, double kappa,
                        const SurfaceFem& fem, const ProxOptions& opt) {
    if (kappa < 0.0) throw ParameterOutOfRange("kappa must be nonnegative");
    if (z.vertexCount() != fem.nodeCount() || z.values.cols() != fem.grid.nodeCount())
        throw ShapeMismatch("field shape does not match fem context");

    ProxResult res;
    res.u.grid = z.grid;
    if (model.lambda == 0.0) {
        res.u.values = z.values;
        res.lipschitz = 1.0;
        res.report.converged = true;
        return res;
    }

    const FoeContext ctx(model, fem);
    const double lamMax = opt.regLambdaMax >= 0.0
                              ? opt.regLambdaMax
                              : foe_operator_lambda_max(ctx, false, opt.powerIter);
    res.lipschitz = 1.0 + 1.05 * model.lambda * model_phi_lipschitz(model, kappa) * lamMax;

    EnergyProblem problem;
    problem.rows = fem.nodeCount();
    problem.cols = fem.grid.nodeCount();
    problem.lipschitz = res.lipschitz;
    problem.valueGrad = [&](const Eigen::MatrixXd& u, Eigen::MatrixXd& g) {
        SpaceTimeField uf;
        uf.grid = z.grid;
        uf.values = u;
        const FoeResult foe = foe_value_grad(uf, model, ctx, kappa, true);
        const Eigen::MatrixXd diff = u - z.values;
        g = diff + foe.grad.values;
        return 0.5 * fem.lumpedNormSq(diff) + foe.value;
    };
    problem.value = [&](const Eigen::MatrixXd& u) {
        SpaceTimeField uf;
        uf.grid = z.grid;
        uf.values = u;
        return 0.5 * fem.lumpedNormSq(u - z.values) +
               foe_value_grad(uf, model, ctx, kappa, false).value;
    };
    problem.gradNormSq = [&](const Eigen::MatrixXd& g) { return fem.lumpedNormSq(g); };

    const Eigen::MatrixXd u0 = (opt.u0.size() == z.values.size())
                                   ? opt.u0
                                   : Eigen::MatrixXd::Zero(problem.rows, problem.cols);
    AgdResult agd = agd_restart(problem, u0, opt.maxIter, opt.tol);
    res.u.values = std::move(agd.u);
    res.report = std::move(agd.report);
    return res;
}

ProxResult inverse_reconstruct(const Observation& z, const RegularizerModel& model,
                               const ForwardMatrix& A, const SurfaceFem& fem,
                               const InverseOptions& opt) {
    if (z.values.rows() != A.electrodeCount() || z.values.cols() != fem.grid.nodeCount() ||
        A.heartNodeCount() != fem.nodeCount())
        throw ShapeMismatch("observation/forward shapes do not match fem context");

    const int nSigma = A.electrodeCount();
    const Eigen::MatrixXd D = Eigen::MatrixXd(fem.D);
    const Eigen::VectorXd mInv = fem.Mlump.cwiseInverse();

    ProxResult res;
    res.u.grid = z.grid;

    const double Lfid =
        opt.fidLipschitz >= 0.0 ? opt.fidLipschitz : fidelity_lipschitz(A, fem, opt.powerIter);

    const bool haveReg = model.lambda > 0.0;
    std::unique_ptr<FoeContext> ctx;
    Eigen::MatrixXd CddT;
    double Lreg = 0.0;
    if (haveReg) {
        ctx = std::make_unique<FoeContext>(model, fem);
        CddT = fem.Dllt.solve(Eigen::MatrixXd(fem.Dlump.asDiagonal())).transpose();
        const double lamMax = opt.regLambdaMax >= 0.0
                                  ? opt.regLambdaMax
                                  : foe_operator_lambda_max(*ctx, true, opt.powerIter);
        Lreg = 1.05 * model.lambda * model_phi_lipschitz(model, opt.kappa) * lamMax;
    }
    res.lipschitz = Lfid + Lreg;

    EnergyProblem problem;
    problem.rows = fem.nodeCount();
    problem.cols = fem.grid.nodeCount();
    problem.lipschitz = res.lipschitz;
    problem.valueGrad = [&](const Eigen::MatrixXd& u, Eigen::MatrixXd& g) {
        const Eigen::MatrixXd r = A.A * u - z.values;
        const Eigen::MatrixXd rD = r * D;
        double value = 0.5 / nSigma * r.cwiseProduct(rD).sum();
        g = (1.0 / nSigma) * (mInv.asDiagonal() * (A.A.transpose() * r));
        if (haveReg) {
            SpaceTimeField uf;
            uf.grid = z.grid;
            uf.values = u;
            const FoeResult foe = foe_value_grad(uf, model, *ctx, opt.kappa, true);
            value += foe.value;
            g += foe.grad.values * CddT;  // lumped-time gradient into the consistent-D pairing
        }
        return value;
    };
    problem.value = [&](const Eigen::MatrixXd& u) {
        const Eigen::MatrixXd r = A.A * u - z.values;
        double value = 0.5 / nSigma * r.cwiseProduct(r * D).sum();
        if (haveReg) {
            SpaceTimeField uf;
            uf.grid = z.grid;
            uf.values = u;
            value += foe_value_grad(uf, model, *ctx, opt.kappa, false).value;
        }
        return value;
    };
    problem.gradNormSq = [&](const Eigen::MatrixXd& g) { return fem.massNormSq(g); };

    const Eigen::MatrixXd u0 = Eigen::MatrixXd::Zero(problem.rows, problem.cols);
    AgdResult agd = agd_restart(problem, u0, opt.maxIter, opt.tol);
    res.u.values = std::move(agd.u);
    res.report = std::move(agd.report);
    return res;
}

double denoise_loss(const RegularizerModel& model, const std::vector<TrainSample>& data,
                    const SurfaceFem& fem, const ProxOptions& opt, int threads) {
    if (data.empty()) throw ParameterOutOfRange("empty training set");
    std::vector<double> terms(data.size(), 0.0);
    auto worker = [&](size_t begin, size_t end) {
        for (size_t m = begin; m < end; ++m) {
            const ProxResult pr = prox_denoise(data[m].noisy, model, data[m].kappa, fem, opt);
            const double err =
                std::sqrt(fem.lumpedNormSq(pr.u.values - data[m].clean.values));
            terms[m] = err / std::sqrt(std::max(data[m].kappa, 1e-12));
        }
    };
    const int nThreads = std::max(1, std::min<int>(threads, static_cast<int>(data.size())));
    if (nThreads == 1) {
        worker(0, data.size());
    } else {
        std::vector<std::thread> pool;
        const size_t chunk = (data.size() + nThreads - 1) / nThreads;
        for (int t = 0; t < nThreads; ++t) {
            const size_t b = t * chunk, e = std::min(data.size(), b + chunk);
            if (b < e) pool.emplace_back(worker, b, e);
        }
        for (auto& th : pool) th.join();
    }
    double acc = 0.0;
    for (double t : terms) acc += t;
    return acc / static_cast<double>(data.size());
}

namespace {

struct SpsaPacking {
    bool trainKernels = true;
    int dim = 0;

    Eigen::VectorXd pack(const RegularizerModel& m) const {
        std::vector<double> v;
        auto safeLog = [](double x) { return std::log(std::max(x, 1e-18)); };
        v.push_back(safeLog(m.lambda));
        v.push_back(safeLog(m.epsTheta));
        for (const auto& e : m.experts) v.push_back(safeLog(e.mu));
        if (trainKernels) {
            for (const auto& e : m.experts) {
                if (e.hasSubkernels()) {
                    for (const auto& k : e.subkernels)
                        for (int i = 0; i < k.size(); ++i) v.push_back(k[i]);
                } else {
                    for (int i = 0; i < e.kernel.size(); ++i) v.push_back(e.kernel[i]);
                }
            }
        }
        return Eigen::Map<Eigen::VectorXd>(v.data(), v.size());
    }

    RegularizerModel unpack(const RegularizerModel& base, const Eigen::VectorXd& theta) const {
        RegularizerModel m = base;
        int at = 0;
        auto clampExp = [](double x) { return std::exp(std::clamp(x, -18.0, 18.0)); };
        m.lambda = clampExp(theta[at++]);
        m.epsTheta = clampExp(theta[at++]);
        for (auto& e : m.experts) e.mu = std::max(clampExp(theta[at++]), 1e-8);
        if (trainKernels) {
            for (auto& e : m.experts) {
                if (e.hasSubkernels()) {
                    for (auto& k : e.subkernels)
                        for (int i = 0; i < k.size(); ++i) k[i] = theta[at++];
                } else {
                    for (int i = 0; i < e.kernel.size(); ++i) e.kernel[i] = theta[at++];
                }
            }
        }
        return m;
    }
};

} // namespace

SpsaResult spsa_train(const std::vector<TrainSample>& data, const RegularizerModel& model0,
                      int budget, const SurfaceFem& fem, const SpsaOptions& opt) {
    SpsaResult res;
    res.model = model0;

    SpsaPacking packing;
    packing.trainKernels = opt.trainKernels;
    Eigen::VectorXd theta = packing.pack(model0);
    packing.dim = static_cast<int>(theta.size());

    auto safeLoss = [&](const RegularizerModel& m) {
        try {
            return denoise_loss(m, data, fem, opt.prox, opt.threads);
        } catch (const Error&) {
            return std::numeric_limits<double>::infinity();
        }
    };

    res.initialLoss = safeLoss(model0);
    double bestLoss = res.initialLoss;
    res.lossTrace.push_back(bestLoss);
    if (budget <= 0) {
        res.finalLoss = bestLoss;
        return res;
    }

    Rng rng(opt.seed);
    for (int k = 0; k < budget; ++k) {
        const double ck = opt.perturbation / std::pow(k + 1.0, opt.perturbDecay);
        const double ak =
            opt.stepSize / std::pow(k + 1.0 + opt.stepOffset, opt.stepDecay);
        Eigen::VectorXd delta(packing.dim);
        for (int i = 0; i < packing.dim; ++i) delta[i] = (rng.uniform() < 0.5) ? -1.0 : 1.0;
        if (ck <= 0.0) {
            res.lossTrace.push_back(bestLoss);
            continue;
        }
        const RegularizerModel mPlus = packing.unpack(model0, theta + ck * delta);
        const RegularizerModel mMinus = packing.unpack(model0, theta - ck * delta);
        const double lp = safeLoss(mPlus);
        const double lm = safeLoss(mMinus);
        if (lp < bestLoss) {
            bestLoss = lp;
            res.model = mPlus;
        }
        if (lm < bestLoss) {
            bestLoss = lm;
            res.model = mMinus;
        }
        if (std::isfinite(lp) && std::isfinite(lm)) {
            const double slope = (lp - lm) / (2.0 * ck);
            theta -= ak * slope * delta;  // Rademacher: delta^{-1} = delta
            const RegularizerModel cur = packing.unpack(model0, theta);
            const double lc = safeLoss(cur);
            if (lc < bestLoss) {
                bestLoss = lc;
                res.model = cur;
            }
        }
        res.lossTrace.push_back(bestLoss);
    }
    res.finalLoss = bestLoss;
    return res;
}

} // namespace ecgi
