#include <doctest.h>

#include <cmath>

#include <fstream>

#include "ecgi/datagen.hpp"
#include "ecgi/errors.hpp"
#include "ecgi/forward.hpp"
#include "ecgi/geometry.hpp"
#include "ecgi/rng.hpp"
#include "ecgi/solver.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace ecgi;

TEST_CASE("cg: identity in one step, dense oracle, zero rhs") {
    auto ident = [](const Eigen::VectorXd& x) { return x; };
    Rng rng(1);
    Eigen::VectorXd b(20);
    for (int i = 0; i < 20; ++i) b[i] = rng.normal();
    const CgResult r = cg(ident, b, 1e-12, 100);
    CHECK(r.iterations <= 1);
    CHECK((r.x - b).norm() <= 1e-12 * b.norm());

    Eigen::MatrixXd G = helpers::random_matrix(50, 50, 2);
    const Eigen::MatrixXd A = G * G.transpose() + 50.0 * Eigen::MatrixXd::Identity(50, 50);
    Eigen::VectorXd rhs(50);
    for (int i = 0; i < 50; ++i) rhs[i] = rng.normal();
    const CgResult sol =
        cg([&](const Eigen::VectorXd& x) { return Eigen::VectorXd(A * x); }, rhs, 1e-10, 500);
    const Eigen::VectorXd dense = A.ldlt().solve(rhs);
    CHECK((sol.x - dense).norm() <= 1e-8 * dense.norm());

    const CgResult zero =
        cg([&](const Eigen::VectorXd& x) { return Eigen::VectorXd(A * x); },
           Eigen::VectorXd::Zero(50), 1e-10, 10);
    CHECK(zero.x.norm() == 0.0);

    CHECK_THROWS_AS(
        cg([&](const Eigen::VectorXd& x) { return Eigen::VectorXd(A * x); }, rhs, 1e-14, 2),
        CGDivergence);
}

TEST_CASE("power method: diagonal, dense oracle, scaling") {
    auto diagOp = [](const Eigen::VectorXd& x) {
        Eigen::VectorXd y = x;
        y[0] *= 2.0;
        return y;
    };
    CHECK(power_method(diagOp, 2, 500, 3) == doctest::Approx(2.0).epsilon(1e-8));

    Eigen::MatrixXd G = helpers::random_matrix(8, 8, 4);
    const Eigen::MatrixXd A = G * G.transpose();
    const double est = power_method(
        [&](const Eigen::VectorXd& x) { return Eigen::VectorXd(A * x); }, 8, 500, 5);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(A);
    CHECK(std::abs(est - eig.eigenvalues().maxCoeff()) <= 0.01 * eig.eigenvalues().maxCoeff());

    const double scaled = power_method(
        [&](const Eigen::VectorXd& x) { return Eigen::VectorXd(3.5 * (A * x)); }, 8, 500, 5);
    CHECK(scaled == doctest::Approx(3.5 * est).epsilon(1e-6));
}

namespace {
EnergyProblem quadratic_problem(const Eigen::VectorXd& eigs) {
    EnergyProblem p;
    p.rows = static_cast<int>(eigs.size());
    p.cols = 1;
    p.lipschitz = eigs.maxCoeff();
    p.valueGrad = [eigs](const Eigen::MatrixXd& u, Eigen::MatrixXd& g) {
        g = eigs.asDiagonal() * u;
        return 0.5 * u.col(0).dot(g.col(0));
    };
    p.value = [eigs](const Eigen::MatrixXd& u) {
        return 0.5 * u.col(0).dot(Eigen::VectorXd(eigs.asDiagonal() * u.col(0)));
    };
    p.gradNormSq = [](const Eigen::MatrixXd& g) { return g.squaredNorm(); };
    return p;
}
} // namespace

TEST_CASE("agd on the identity quadratic lands on the data immediately") {
    const int n = 30;
    Rng rng(6);
    Eigen::VectorXd z(n);
    for (int i = 0; i < n; ++i) z[i] = rng.normal();

    EnergyProblem p;
    p.rows = n;
    p.cols = 1;
    p.lipschitz = 1.0;
    p.valueGrad = [&](const Eigen::MatrixXd& u, Eigen::MatrixXd& g) {
        g = u.col(0) - z;
        return 0.5 * g.squaredNorm();
    };
    p.value = [&](const Eigen::MatrixXd& u) { return 0.5 * (u.col(0) - z).squaredNorm(); };
    p.gradNormSq = [](const Eigen::MatrixXd& g) { return g.squaredNorm(); };

    const AgdResult r = agd_restart(p, Eigen::MatrixXd::Zero(n, 1), 200, 1e-10);
    CHECK((r.u.col(0) - z).norm() <= 1e-8);
    CHECK(r.report.converged);
    CHECK(r.report.iterations <= 200);
}

TEST_CASE("agd momentum recurrence and reset rule hold bitwise") {
    Eigen::VectorXd eigs(6);
    eigs << 1.0, 0.6, 0.3, 0.2, 0.1, 0.04;
    const EnergyProblem p = quadratic_problem(eigs);
    Eigen::MatrixXd u0(6, 1);
    u0 << 1.0, -2.0, 0.5, 3.0, -1.0, 2.0;
    const AgdResult r = agd_restart(p, u0, 120, 0.0);

    double tau = 1.0;
    for (size_t n = 0; n < r.report.tauTrace.size(); ++n) {
        const double tauNext = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * tau * tau));
        if (r.report.restartFlags[n])
            CHECK(r.report.tauTrace[n] == 1.0);
        else
            CHECK(r.report.tauTrace[n] == tauNext);
        tau = r.report.tauTrace[n];
    }
    // accepted steps never increase the objective
    for (size_t n = 1; n < r.report.objectiveTrace.size(); ++n)
        if (!r.report.restartFlags[n])
            CHECK(r.report.objectiveTrace[n] <=
                  r.report.objectiveTrace[n - 1] * (1.0 + 1e-12) + 1e-300);
}

TEST_CASE("agd reaches 1e-6 relative iterate error within 100 iterations on the quadratic") {
    const int n = 40;
    Rng rng(7);
    Eigen::VectorXd eigs(n);
    for (int i = 0; i < n; ++i) eigs[i] = 0.04 + 0.96 * i / (n - 1.0);
    const EnergyProblem p = quadratic_problem(eigs);
    Eigen::MatrixXd u0(n, 1);
    for (int i = 0; i < n; ++i) u0(i, 0) = rng.normal();
    const AgdResult r = agd_restart(p, u0, 100, 0.0);
    CHECK(r.u.norm() <= 1e-6 * u0.norm());
}

TEST_CASE("agd restart trace on a nonconvex double well") {
    EnergyProblem p;
    p.rows = 1;
    p.cols = 1;
    p.lipschitz = 20.0;
    auto f = [](double u) { return (u * u - 1.0) * (u * u - 1.0); };
    p.valueGrad = [&](const Eigen::MatrixXd& u, Eigen::MatrixXd& g) {
        const double x = u(0, 0);
        g.resize(1, 1);
        g(0, 0) = 4.0 * x * (x * x - 1.0);
        return f(x);
    };
    p.value = [&](const Eigen::MatrixXd& u) { return f(u(0, 0)); };
    p.gradNormSq = [](const Eigen::MatrixXd& g) { return g.squaredNorm(); };

    Eigen::MatrixXd u0(1, 1);
    u0(0, 0) = 1.9;
    const AgdResult r = agd_restart(p, u0, 400, 0.0);
    for (size_t n = 1; n < r.report.objectiveTrace.size(); ++n)
        if (!r.report.restartFlags[n])
            CHECK(r.report.objectiveTrace[n] <= r.report.objectiveTrace[n - 1] + 1e-12);
    CHECK(r.report.finalObjective <= f(1.9));
    CHECK(std::abs(std::abs(r.u(0, 0)) - 1.0) <= 1e-3);  // lands in a well
}

namespace {
struct DenoiseFixture {
    SurfaceMesh1D surf = helpers::circle_surface(12, 1.0);
    TimeGrid grid{8, 0.5};
    SurfaceFem fem{surf, grid};
    RegularizerModel model;

    explicit DenoiseFixture(bool convex) {
        model.lambda = 0.6;
        model.epsTheta = 0.4;
        model.epsOmega = 1e-3;
        model.convexMode = convex;
        ExpertParams e;
        e.mu = 0.4;
        e.eta = 1.5;
        e.kernel = (Eigen::VectorXd(5) << 0.0, -1.0, 2.0, -1.0, 0.0).finished();
        if (!convex) {
            e.Q = 0.5 * Mat4::Identity();
            e.eta = 0.8;
        }
        model.experts = {e};
        validate_model(model);
    }

    SpaceTimeField randomField(uint64_t seed, double scale = 1.0) {
        SpaceTimeField z;
        z.grid = grid;
        z.values = scale * helpers::random_matrix(surf.nodeCount(), grid.nodeCount(), seed);
        return z;
    }
};
} // namespace

TEST_CASE("prox with a disabled regularizer returns the input") {
    DenoiseFixture fx(true);
    RegularizerModel off = fx.model;
    off.lambda = 0.0;
    const SpaceTimeField z = fx.randomField(8);
    const ProxResult r = prox_denoise(z, off, 0.1, fx.fem);
    CHECK((r.u.values - z.values).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("agd matches a much longer plain gradient descent on the convex denoise problem") {
    DenoiseFixture fx(true);
    const SpaceTimeField z = fx.randomField(9);
    ProxOptions opt;
    opt.maxIter = 400;
    opt.tol = 0.0;  // fixed budget
    const ProxResult agd = prox_denoise(z, fx.model, 0.3, fx.fem, opt);

    // plain descent, ten times the budget
    const FoeContext ctx(fx.model, fx.fem);
    const double lamMax = foe_operator_lambda_max(ctx, false);
    const double L = 1.0 + 1.05 * fx.model.lambda * model_phi_lipschitz(fx.model, 0.3) * lamMax;
    Eigen::MatrixXd u = Eigen::MatrixXd::Zero(z.values.rows(), z.values.cols());
    double fLast = 0.0;
    for (int it = 0; it < 4000; ++it) {
        SpaceTimeField uf;
        uf.grid = fx.grid;
        uf.values = u;
        const FoeResult foe = foe_value_grad(uf, fx.model, ctx, 0.3, true);
        const Eigen::MatrixXd g = (u - z.values) + foe.grad.values;
        fLast = 0.5 * fx.fem.lumpedNormSq(u - z.values) + foe.value;
        u -= (1.0 / L) * g;
    }
    CHECK(std::abs(agd.report.finalObjective - fLast) <= 1e-6 * std::abs(fLast));
}

TEST_CASE("convex prox is nonexpansive in the lumped mass norm") {
    DenoiseFixture fx(true);
    ProxOptions opt;
    opt.maxIter = 4000;
    opt.tol = 1e-10;
    for (int pair = 0; pair < 20; ++pair) {
        const SpaceTimeField z1 = fx.randomField(100 + pair);
        const SpaceTimeField z2 = fx.randomField(200 + pair);
        const ProxResult r1 = prox_denoise(z1, fx.model, 0.25, fx.fem, opt);
        const ProxResult r2 = prox_denoise(z2, fx.model, 0.25, fx.fem, opt);
        const double lhs = std::sqrt(fx.fem.lumpedNormSq(r1.u.values - r2.u.values));
        const double rhs = std::sqrt(fx.fem.lumpedNormSq(z1.values - z2.values));
        CHECK(lhs <= rhs + 1e-8);
    }
}

TEST_CASE("denoising a clean field with a tiny noise scale barely moves it") {
    DenoiseFixture fx(true);
    SpaceTimeField clean;
    clean.grid = fx.grid;
    clean.values.resize(fx.surf.nodeCount(), fx.grid.nodeCount());
    for (int j = 0; j < fx.surf.nodeCount(); ++j) {
        const double th = std::atan2(fx.surf.points[j].y(), fx.surf.points[j].x());
        for (int s = 0; s < fx.grid.nodeCount(); ++s)
            clean.values(j, s) = std::sin(th) * std::cos(0.4 * fx.grid.node(s));
    }
    RegularizerModel weak = fx.model;
    weak.lambda = 0.02;
    const ProxResult r = prox_denoise(clean, weak, 0.01, fx.fem);
    const double rel = std::sqrt(fx.fem.lumpedNormSq(r.u.values - clean.values)) /
                       std::sqrt(fx.fem.lumpedNormSq(clean.values));
    CHECK(rel <= 0.02);
}

TEST_CASE("prox fixed point: restarting from the output stays put") {
    DenoiseFixture fx(false);
    const SpaceTimeField z = fx.randomField(10);
    ProxOptions opt;
    opt.maxIter = 5000;
    opt.tol = 1e-8;
    const ProxResult first = prox_denoise(z, fx.model, 0.3, fx.fem, opt);
    ProxOptions warm = opt;
    warm.u0 = first.u.values;
    const ProxResult second = prox_denoise(z, fx.model, 0.3, fx.fem, warm);
    const double moved = std::sqrt(fx.fem.lumpedNormSq(second.u.values - first.u.values));
    CHECK(moved <= 10.0 * opt.tol * (1.0 + std::abs(first.report.finalObjective)));
}

TEST_CASE("sampled Lipschitz validity of the denoise gradient bound") {
    DenoiseFixture fx(false);
    const SpaceTimeField z = fx.randomField(11);
    const FoeContext ctx(fx.model, fx.fem);
    const double lamMax = foe_operator_lambda_max(ctx, false);
    const double L = 1.0 + 1.05 * fx.model.lambda * model_phi_lipschitz(fx.model, 0.3) * lamMax;

    auto grad = [&](const Eigen::MatrixXd& u) {
        SpaceTimeField uf;
        uf.grid = fx.grid;
        uf.values = u;
        return Eigen::MatrixXd((u - z.values) +
                               foe_value_grad(uf, fx.model, ctx, 0.3, true).grad.values);
    };
    for (int trial = 0; trial < 100; ++trial) {
        const Eigen::MatrixXd u1 =
            helpers::random_matrix(fx.surf.nodeCount(), fx.grid.nodeCount(), 300 + trial);
        const Eigen::MatrixXd u2 =
            helpers::random_matrix(fx.surf.nodeCount(), fx.grid.nodeCount(), 600 + trial);
        const double num = std::sqrt(fx.fem.lumpedNormSq(grad(u1) - grad(u2)));
        const double den = std::sqrt(fx.fem.lumpedNormSq(u1 - u2));
        CHECK(num <= L * den * (1.0 + 1e-6));
    }
}

namespace {
struct InverseFixture {
    Mesh2D mesh;
    ForwardSystem sys;
    ElectrodeSet electrodes;
    ForwardMatrix fm;
    TimeGrid grid{8, 0.4};
    SurfaceFem fem;
    RegularizerModel model;

    InverseFixture()
        : mesh(build_torso_mesh([] {
              MeshConfig c;
              c.targetH = 0.5;
              c.seed = 12;
              return c;
          }())),
          sys(build_forward_system(mesh, Conductivity::isotropic(0.2, 0.2))),
          electrodes(define_electrodes(mesh, 12, 0.9)),
          fm(assemble_forward_matrix(sys, mesh, electrodes)),
          fem(sys.surface, grid) {
        model.lambda = 1e-4;
        model.epsTheta = 0.4;
        model.epsOmega = 1e-3;
        model.convexMode = true;
        ExpertParams e;
        e.mu = 1.0;
        e.eta = 1.5;
        e.kernel = (Eigen::VectorXd(5) << 0.0, -1.0, 2.0, -1.0, 0.0).finished();
        model.experts = {e};
        validate_model(model);
    }

    SpaceTimeField smoothTruth() {
        SpaceTimeField u;
        u.grid = grid;
        u.values.resize(sys.surface.nodeCount(), grid.nodeCount());
        for (int j = 0; j < sys.surface.nodeCount(); ++j) {
            const double th =
                std::atan2(sys.surface.points[j].y(), sys.surface.points[j].x());
            for (int s = 0; s < grid.nodeCount(); ++s)
                u.values(j, s) =
                    std::sin(th) * std::cos(0.5 * grid.node(s)) + 0.4 * std::cos(th);
        }
        return u;
    }
};
} // namespace

TEST_CASE("noise-free inverse reconstruction beats the zero field") {
    InverseFixture fx;
    const SpaceTimeField truth = fx.smoothTruth();
    Observation z;
    z.grid = fx.grid;
    z.values = fx.fm.A * truth.values;

    InverseOptions opt;
    opt.maxIter = 4000;
    opt.tol = 1e-8;
    const ProxResult r = inverse_reconstruct(z, fx.model, fx.fm, fx.fem, opt);
    const double errRecon = fx.fem.massNormSq(r.u.values - truth.values);
    const double errZero = fx.fem.massNormSq(truth.values);
    CHECK(errRecon < errZero);
}

TEST_CASE("growing the regularization weight shrinks the reconstruction monotonically") {
    InverseFixture fx;
    const SpaceTimeField truth = fx.smoothTruth();
    Observation z;
    z.grid = fx.grid;
    z.values = fx.fm.A * truth.values;

    double prev = std::numeric_limits<double>::infinity();
    for (double lam : {1.0, 10.0, 100.0, 1000.0}) {
        RegularizerModel m = fx.model;
        m.lambda = lam;
        InverseOptions opt;
        opt.maxIter = 3000;
        opt.tol = 1e-8;
        const ProxResult r = inverse_reconstruct(z, m, fx.fm, fx.fem, opt);
        const double norm = std::sqrt(fx.fem.massNormSq(r.u.values));
        CHECK(norm < prev);
        prev = norm;
    }
}

TEST_CASE("single-interval linear-quadratic inverse matches the dense normal equations") {
    InverseFixture fx;
    TimeGrid grid{1, 0.4};
    SurfaceFem fem(fx.sys.surface, grid);
    const int nH = fx.fm.heartNodeCount(), nT = grid.nodeCount();

    RegularizerModel m = fx.model;
    m.lambda = 0.05;
    m.experts[0].mu = 50.0;  // responses stay in the quadratic regime

    SpaceTimeField truth;
    truth.grid = grid;
    truth.values = 0.05 * helpers::random_matrix(nH, nT, 77);
    Observation z;
    z.grid = grid;
    z.values = fx.fm.A * truth.values;

    InverseOptions opt;
    opt.maxIter = 30000;
    opt.tol = 1e-11;
    const ProxResult r = inverse_reconstruct(z, m, fx.fm, fem, opt);

    // dense normal equations assembled from the channel operators
    const int dof = nH * nT;
    const Eigen::MatrixXd D = Eigen::MatrixXd(fem.D);
    const FoeContext ctx(m, fem);
    const double quad = m.lambda * (1.0 + m.epsOmega / m.experts[0].mu);
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(dof, dof);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dof);
    auto idx = [&](int j, int s) { return s * nH + j; };

    // fidelity: (1/nSigma) (D (x) A^T A)
    const Eigen::MatrixXd AtA = fx.fm.A.transpose() * fx.fm.A;
    const Eigen::MatrixXd Atz = fx.fm.A.transpose() * z.values * D;
    for (int s1 = 0; s1 < nT; ++s1)
        for (int s2 = 0; s2 < nT; ++s2)
            for (int j1 = 0; j1 < nH; ++j1)
                for (int j2 = 0; j2 < nH; ++j2)
                    H(idx(j1, s1), idx(j2, s2)) +=
                        D(s1, s2) * AtA(j1, j2) / fx.fm.electrodeCount();
    for (int s = 0; s < nT; ++s)
        for (int j = 0; j < nH; ++j) rhs[idx(j, s)] += Atz(j, s) / fx.fm.electrodeCount();

    // regularizer: quad * sum_channels L^T W L with lumped node weights
    auto addChannel = [&](const Eigen::MatrixXd& spatialOp, const Eigen::MatrixXd& timeOp) {
        // channel value at (j, s): sum_{j', s'} spatialOp(j, j') timeOp(s, s') u(j', s')
        Eigen::MatrixXd L = Eigen::MatrixXd::Zero(dof, dof);
        for (int s1 = 0; s1 < nT; ++s1)
            for (int s2 = 0; s2 < nT; ++s2)
                for (int j1 = 0; j1 < nH; ++j1)
                    for (int j2 = 0; j2 < nH; ++j2)
                        L(idx(j1, s1), idx(j2, s2)) = spatialOp(j1, j2) * timeOp(s1, s2);
        Eigen::VectorXd w(dof);
        for (int s = 0; s < nT; ++s)
            for (int j = 0; j < nH; ++j) w[idx(j, s)] = fem.Mlump[j] * fem.Dlump[s];
        H += quad * L.transpose() * w.asDiagonal() * L;
    };
    const Eigen::MatrixXd eyeH = Eigen::MatrixXd::Identity(nH, nH);
    const Eigen::MatrixXd eyeT = Eigen::MatrixXd::Identity(nT, nT);
    addChannel(m.epsTheta * eyeH, eyeT);
    addChannel(ctx.Cx, eyeT);
    addChannel(ctx.Cy, eyeT);
    addChannel(eyeH, ctx.W[0]);

    const Eigen::VectorXd dense = H.ldlt().solve(rhs);
    const Eigen::MatrixXd denseField = Eigen::Map<const Eigen::MatrixXd>(dense.data(), nH, nT);
    const double rel = std::sqrt(fem.massNormSq(r.u.values - denseField)) /
                       std::sqrt(fem.massNormSq(denseField));
    CHECK(rel <= 1e-6);
}

TEST_CASE("spsa: zero budget, monotone best loss, degenerate perturbation") {
    DenoiseFixture fx(false);
    std::vector<TrainSample> data;
    for (int m = 0; m < 3; ++m) {
        TrainSample s;
        s.clean = fx.randomField(40 + m, 0.5);
        s.kappa = 0.1;
        s.noisy = add_field_noise(s.clean, s.kappa, 77 + m);
        data.push_back(std::move(s));
    }

    SpsaOptions so;
    so.prox.maxIter = 150;
    so.prox.tol = 1e-5;
    so.threads = 2;

    const SpsaResult zero = spsa_train(data, fx.model, 0, fx.fem, so);
    CHECK(zero.finalLoss == zero.initialLoss);
    CHECK(zero.model.lambda == fx.model.lambda);

    const SpsaResult run = spsa_train(data, fx.model, 12, fx.fem, so);
    CHECK(run.finalLoss <= run.initialLoss);
    for (size_t i = 1; i < run.lossTrace.size(); ++i)
        CHECK(run.lossTrace[i] <= run.lossTrace[i - 1] + 1e-15);

    SpsaOptions degenerate = so;
    degenerate.perturbation = 0.0;
    const SpsaResult still = spsa_train(data, fx.model, 5, fx.fem, degenerate);
    CHECK(still.finalLoss == still.initialLoss);
    CHECK(still.model.lambda == fx.model.lambda);
    CHECK(still.model.experts[0].mu == fx.model.experts[0].mu);
}

TEST_CASE("identical seeds and inputs give bitwise identical solve reports") {
    DenoiseFixture fx(false);
    const SpaceTimeField z = fx.randomField(50);
    ProxOptions opt;
    opt.maxIter = 300;
    opt.tol = 1e-9;
    const ProxResult a = prox_denoise(z, fx.model, 0.2, fx.fem, opt);
    const ProxResult b = prox_denoise(z, fx.model, 0.2, fx.fem, opt);
    REQUIRE(a.report.iterations == b.report.iterations);
    CHECK(a.report.restarts == b.report.restarts);
    CHECK(a.report.finalObjective == b.report.finalObjective);
    for (size_t i = 0; i < a.report.objectiveTrace.size(); ++i)
        CHECK(a.report.objectiveTrace[i] == b.report.objectiveTrace[i]);
    CHECK((a.u.values - b.u.values).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("solve report file format") {
    SolveReport rep;
    rep.objectiveTrace = {3.0, 2.0, 2.5, 1.0};
    rep.restartFlags = {0, 0, 1, 0};
    rep.iterations = 4;
    save_report(rep, "test_report.txt");
    std::ifstream f("test_report.txt");
    std::string header;
    std::getline(f, header);
    CHECK(header == "iter f restart");
    int iter;
    double fv;
    int restart;
    f >> iter >> fv >> restart;
    CHECK(iter == 1);
    CHECK(fv == 3.0);
    CHECK(restart == 0);
    std::remove("test_report.txt");
}
