#include "ecgi/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <thread>

#include "ecgi/errors.hpp"
#include "ecgi/rng.hpp"

namespace ecgi {

namespace {
constexpr double kPi = std::numbers::pi;
}

TensorTriple conductivity_tensors(double sigmaIl, double lambdaLT, double alpha, double eps,
                                  const Vec2& fiber) {
    if (sigmaIl <= 0.0 || lambdaLT <= 0.0 || alpha <= 0.0 || eps <= 0.0 || eps >= 1.0)
        throw ParameterOutOfRange("conductivity parameters out of range");
    const double sigmaIt =
        sigmaIl / (lambdaLT * lambdaLT) * ((1.0 + alpha * (1.0 - eps)) / (1.0 + alpha));
    const double sigmaEt = sigmaIt / (alpha * (1.0 - eps));
    const double sigmaEl = sigmaIl / alpha;

    const double fn = fiber.norm();
    Eigen::Matrix2d ll = Eigen::Matrix2d::Zero();
    if (fn > 0.0) {
        const Vec2 l = fiber / fn;
        ll = l * l.transpose();
        // |fiber| < 1 blends the rank-one part toward isotropy (taper core)
        ll *= std::min(fn, 1.0);
    }
    TensorTriple t;
    t.Gi = sigmaIt * Eigen::Matrix2d::Identity() + (sigmaIl - sigmaIt) * ll;
    t.Ge = sigmaEt * Eigen::Matrix2d::Identity() + (sigmaEl - sigmaEt) * ll;
    const Eigen::Matrix2d Gm = t.Gi * (t.Gi + t.Ge).inverse() * t.Ge;
    t.Gm = 0.5 * (Gm + Gm.transpose());
    return t;
}

Mesh2D build_heart_disk_mesh(double radius, const Vec2& center, int boundarySegments) {
    if (radius <= 0.0) throw ParameterOutOfRange("disk radius must be positive");
    if (boundarySegments < 12) throw ParameterOutOfRange("need at least 12 boundary segments");
    // concentric rings with 6k vertices at ring k; boundary ring count 6*nR
    const int nR = std::max(2, (boundarySegments + 3) / 6);

    Mesh2D mesh;
    mesh.heartRadius = radius;
    mesh.outerRadius = radius;
    mesh.heartCenter = center;

    mesh.vertices.push_back(center);
    std::vector<int> ringStart(nR + 1, 0);  // index of first vertex of ring k
    for (int k = 1; k <= nR; ++k) {
        ringStart[k] = static_cast<int>(mesh.vertices.size());
        const int nk = 6 * k;
        const double rk = radius * k / nR;
        for (int j = 0; j < nk; ++j) {
            const double th = 2.0 * kPi * j / nk;
            mesh.vertices.push_back(center + rk * Vec2(std::cos(th), std::sin(th)));
        }
    }

    // center fan
    for (int j = 0; j < 6; ++j)
        mesh.triangles.push_back({{0, ringStart[1] + j, ringStart[1] + (j + 1) % 6}, Region::Torso});

    // annuli: circular two-pointer merge by angle
    for (int k = 1; k < nR; ++k) {
        const int nI = 6 * k, nO = 6 * (k + 1);
        const int bi = ringStart[k], bo = ringStart[k + 1];
        int i = 0, j = 0;
        while (i < nI || j < nO) {
            const double aNextI = 2.0 * kPi * (i + 1) / nI;
            const double aNextO = 2.0 * kPi * (j + 1) / nO;
            const bool advanceOuter = (j < nO) && (i == nI || aNextO <= aNextI);
            if (advanceOuter) {
                mesh.triangles.push_back(
                    {{bo + j % nO, bo + (j + 1) % nO, bi + i % nI}, Region::Torso});
                ++j;
            } else {
                mesh.triangles.push_back(
                    {{bi + i % nI, bo + j % nO, bi + (i + 1) % nI}, Region::Torso});
                ++i;
            }
        }
    }

    for (auto& t : mesh.triangles) {
        if (triangle_signed_area(mesh.vertices[t.v[0]], mesh.vertices[t.v[1]],
                                 mesh.vertices[t.v[2]]) < 0.0)
            std::swap(t.v[1], t.v[2]);
    }

    const int nB = 6 * nR;
    for (int j = 0; j < nB; ++j)
        mesh.boundaryEdges.push_back(
            {ringStart[nR] + j, ringStart[nR] + (j + 1) % nB, BoundaryMarker::Heart});

    validate_mesh(mesh);
    return mesh;
}

namespace {

Eigen::Matrix2d scar_scale(const std::vector<Scar>& scars, const Vec2& centroid,
                           const Eigen::Matrix2d& Gm) {
    double factor = 1.0;
    for (const auto& s : scars)
        if ((centroid - s.center).norm() < s.radius) factor = std::min(factor, s.factor);
    return factor * Gm;
}

} // namespace

HeartModel build_heart_model(const HeartConfig& config) {
    HeartModel model;
    model.heartMesh = build_heart_disk_mesh(config.radius, config.center, config.boundarySegments);
    model.ionic = config.ionic;
    model.membrane = config.membrane;
    model.stimulus = config.stimulus;
    model.scars = config.scars;

    const int nT = model.heartMesh.triangleCount();
    model.fiberField.resize(nT);
    model.Gi.resize(nT);
    model.Ge.resize(nT);
    model.Gm.resize(nT);
    const double rTaper = config.fibers.taperRadius * config.radius;
    for (int e = 0; e < nT; ++e) {
        const auto& t = model.heartMesh.triangles[e];
        const Vec2 c = (model.heartMesh.vertices[t.v[0]] + model.heartMesh.vertices[t.v[1]] +
                        model.heartMesh.vertices[t.v[2]]) /
                       3.0;
        const Vec2 rel = c - config.center;
        const double r = rel.norm();
        Vec2 fiber(0.0, 0.0);
        if (r > 0.0) {
            const Vec2 circumferential(-rel.y() / r, rel.x() / r);
            const double w = (rTaper > 0.0) ? std::min(r / rTaper, 1.0) : 1.0;
            fiber = w * circumferential;  // |fiber| < 1 tapers to isotropy
        }
        model.fiberField[e] = fiber;
        TensorTriple g = conductivity_tensors(config.fibers.sigmaIl, config.fibers.lambdaLT,
                                              config.fibers.alpha, config.fibers.eps, fiber);
        model.Gi[e] = g.Gi;
        model.Ge[e] = g.Ge;
        model.Gm[e] = scar_scale(config.scars, c, g.Gm);
    }
    return model;
}

namespace {

SpMat heart_mass(const Mesh2D& mesh) {
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(9 * mesh.triangles.size());
    for (const auto& t : mesh.triangles) {
        const double area = triangle_signed_area(mesh.vertices[t.v[0]], mesh.vertices[t.v[1]],
                                                 mesh.vertices[t.v[2]]);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                trip.emplace_back(t.v[i], t.v[j], area / (i == j ? 6.0 : 12.0));
    }
    SpMat M(mesh.vertexCount(), mesh.vertexCount());
    M.setFromTriplets(trip.begin(), trip.end());
    return M;
}

SpMat heart_stiffness(const Mesh2D& mesh, const std::vector<Eigen::Matrix2d>& tensors) {
    Conductivity sigma;
    sigma.perElement = tensors;
    return assemble_stiffness(mesh, sigma);
}

} // namespace

SimulationResult simulate_monodomain(const HeartModel& model, double dt, int steps,
                                     uint64_t /*seed: generation is deterministic*/) {
    if (dt <= 0.0 || steps < 1) throw ParameterOutOfRange("invalid time step or step count");
    const Mesh2D& mesh = model.heartMesh;
    const int n = mesh.vertexCount();

    const SpMat M = heart_mass(mesh);
    const SpMat Km = heart_stiffness(mesh, model.Gm);
    const double cm = model.membrane.cm;
    const SpMat lhs = cm * M + (dt / model.membrane.beta) * Km;
    Eigen::SimplicialLLT<SpMat> llt(lhs);
    if (llt.info() != Eigen::Success)
        throw SolveFailure("monodomain system factorization failed");

    Eigen::VectorXd stim = Eigen::VectorXd::Zero(n);
    const double amplitude = model.stimulus.gain * model.stimulus.iMax;
    for (int i = 0; i < n; ++i)
        if ((mesh.vertices[i] - model.stimulus.center).norm() < model.stimulus.radius)
            stim[i] = amplitude;

    const IonicParams& ion = model.ionic;
    auto iIon = [&](double v) {
        return ion.gMax * (v - ion.vRest) * (v - ion.vTh) * (v - ion.vDep);
    };

    SimulationResult res;
    res.dt = dt;
    res.transmembrane.resize(n, steps + 1);
    Eigen::VectorXd v = Eigen::VectorXd::Constant(n, ion.vRest);
    res.transmembrane.col(0) = v;
    Eigen::VectorXd reaction(n);
    for (int s = 0; s < steps; ++s) {
        const double t = s * dt;
        const bool stimOn = t < model.stimulus.duration;
        for (int i = 0; i < n; ++i)
            reaction[i] = cm * v[i] - dt * (iIon(v[i]) - (stimOn ? stim[i] : 0.0));
        v = llt.solve(M * reaction);
        if (!v.allFinite() || v.cwiseAbs().maxCoeff() > 1e3)
            throw BlowUp("transmembrane potential out of range at step " + std::to_string(s + 1));
        res.transmembrane.col(s + 1) = v;
    }
    return res;
}

void extracellular_solve(SimulationResult& result, const HeartModel& model, double eta) {
    const Mesh2D& mesh = model.heartMesh;
    const int n = mesh.vertexCount();
    if (result.transmembrane.rows() != n)
        throw ShapeMismatch("simulation result does not match heart mesh");

    const SpMat Ki = heart_stiffness(mesh, model.Gi);
    const SpMat Ke = heart_stiffness(mesh, model.Ge);
    const SpMat M = heart_mass(mesh);
    const SpMat A = Ki + Ke + eta * M;
    Eigen::SimplicialLLT<SpMat> llt(A);
    if (llt.info() != Eigen::Success)
        throw SolveFailure("pseudo-bidomain factorization failed");

    const Eigen::VectorXd massDiag = lumped_diagonal(M);
    const double totalMass = massDiag.sum();

    const int steps = static_cast<int>(result.transmembrane.cols()) - 1;
    const int nSnap = steps / result.sampleEvery + 1;
    result.extracellular.resize(n, nSnap);
    for (int k = 0; k < nSnap; ++k) {
        Eigen::VectorXd rhs = -(Ki * result.transmembrane.col(k * result.sampleEvery));
        // 1^T K_i = 0, so the rhs has no constant component in exact
        // arithmetic; strip the numerical remainder to keep the near-null
        // direction quiet
        rhs.array() -= rhs.mean();
        Eigen::VectorXd ve = llt.solve(rhs);
        ve.array() -= massDiag.dot(ve) / totalMass;  // gauge fix
        const double rhsNorm = rhs.norm();
        if (rhsNorm > 0.0 && (A * ve - rhs).norm() > 1e-8 * rhsNorm)
            throw SolveFailure("pseudo-bidomain solve residual above tolerance");
        result.extracellular.col(k) = ve;
    }
}

SampleParams draw_sample_params(uint64_t seed, const DatagenConfig& config) {
    Rng rng(seed);
    SampleParams p;
    p.dt = rng.uniform(config.dtLo, config.dtHi);
    p.nSample = static_cast<int>(rng.uniform_int(config.nSampleLo, config.nSampleHi));
    p.lambdaLT = rng.uniform(config.lambdaLo, config.lambdaHi);
    p.eps = rng.uniform(config.epsLo, config.epsHi);

    const Vec2 center = config.heart.center;
    const double radius = config.heart.radius;
    p.stimulus = config.heart.stimulus;
    const double theta = rng.uniform(0.0, 2.0 * kPi);
    p.stimulus.center = center + radius * Vec2(std::cos(theta), std::sin(theta));
    p.stimulus.radius = config.stimulusRadius * radius;

    if (rng.uniform() < config.scarProb) {
        auto drawScar = [&]() {
            Scar s;
            const double r = radius * 0.8 * std::sqrt(rng.uniform());
            const double a = rng.uniform(0.0, 2.0 * kPi);
            s.center = center + r * Vec2(std::cos(a), std::sin(a));
            s.radius = config.scarRadius * radius;
            s.factor = rng.uniform(config.scarFactorLo, config.scarFactorHi);
            return s;
        };
        p.scars.push_back(drawScar());
        if (rng.uniform() < config.secondScarProb) p.scars.push_back(drawScar());
    }
    return p;
}

Sample make_sample(uint64_t seed, const SurfaceMesh1D& coarse, const TimeGrid& grid,
                   const DatagenConfig& config) {
    const SampleParams params = draw_sample_params(seed, config);
    HeartConfig hc = config.heart;
    const double dt = params.dt;
    const int nSample = params.nSample;
    hc.fibers.lambdaLT = params.lambdaLT;
    hc.fibers.eps = params.eps;
    hc.stimulus = params.stimulus;
    hc.scars = params.scars;

    const HeartModel model = build_heart_model(hc);

    // cover the grid horizon with whole snapshot strides
    int steps = static_cast<int>(std::ceil(grid.horizon() / dt));
    steps = ((steps + nSample - 1) / nSample) * nSample;
    SimulationResult sim = simulate_monodomain(model, dt, steps, seed);
    sim.sampleEvery = nSample;
    extracellular_solve(sim, model);

    // nearest fine node per coarse node, computed once
    const int nc = coarse.nodeCount();
    std::vector<int> nearest(nc, 0);
    for (int i = 0; i < nc; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (int j = 0; j < model.heartMesh.vertexCount(); ++j) {
            const double d = (coarse.points[i] - model.heartMesh.vertices[j]).squaredNorm();
            if (d < best) {
                best = d;
                nearest[i] = j;
            }
        }
    }

    // linear resample of the snapshots onto the time grid
    Sample out;
    out.truth.grid = grid;
    out.truth.values.resize(nc, grid.nodeCount());
    const double snapDt = nSample * dt;
    const int nSnap = sim.snapshotCount();
    for (int s = 0; s < grid.nodeCount(); ++s) {
        const double t = grid.node(s);
        int k = static_cast<int>(std::floor(t / snapDt));
        k = std::clamp(k, 0, nSnap - 2);
        const double w = std::clamp((t - k * snapDt) / snapDt, 0.0, 1.0);
        for (int i = 0; i < nc; ++i) {
            const double a = sim.extracellular(nearest[i], k);
            const double b = sim.extracellular(nearest[i], k + 1);
            out.truth.values(i, s) = (1.0 - w) * a + w * b;
        }
    }

    const double lo = out.truth.values.minCoeff();
    const double hi = out.truth.values.maxCoeff();
    if (hi - lo > 1e-12)
        out.truth.values = (out.truth.values.array() - lo) / (hi - lo);
    else
        out.truth.values.setZero();

    out.meta.seed = seed;
    out.meta.dt = dt;
    out.meta.nSample = nSample;
    out.meta.lambdaLT = hc.fibers.lambdaLT;
    out.meta.eps = hc.fibers.eps;
    out.meta.stimulus = hc.stimulus;
    out.meta.scars = hc.scars;
    out.meta.scaleMin = lo;
    out.meta.scaleMax = hi;
    return out;
}

SpaceTimeField add_field_noise(const SpaceTimeField& u, double kappa, uint64_t seed) {
    if (kappa < 0.0) throw ParameterOutOfRange("kappa must be nonnegative");
    SpaceTimeField out = u;
    if (kappa == 0.0) return out;
    Rng rng(seed);
    for (int j = 0; j < out.values.cols(); ++j)
        for (int i = 0; i < out.values.rows(); ++i) out.values(i, j) += kappa * rng.normal();
    return out;
}

Observation add_observation_noise(const Observation& z, double snrDb, uint64_t seed) {
    if (!std::isfinite(snrDb)) throw ParameterOutOfRange("snrDb must be finite");
    Observation out = z;
    out.noise.kind = NoiseMeta::Kind::GaussianSnr;
    out.noise.snrDb = snrDb;
    out.noise.seed = seed;
    Rng rng(seed);
    const double factor = std::pow(10.0, -snrDb / 20.0);
    for (int i = 0; i < out.values.rows(); ++i) {
        const double rms = std::sqrt(z.values.row(i).squaredNorm() / z.values.cols());
        const double std = rms * factor;
        for (int j = 0; j < out.values.cols(); ++j) out.values(i, j) += std * rng.normal();
    }
    return out;
}

void save_sample_meta(const SampleMeta& meta, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open meta file for writing: " + path);
    f.precision(17);
    f << "seed " << meta.seed << "\n";
    f << "dt " << meta.dt << "\n";
    f << "nSample " << meta.nSample << "\n";
    f << "lambdaLT " << meta.lambdaLT << "\n";
    f << "eps " << meta.eps << "\n";
    f << "stimulus " << meta.stimulus.center.x() << " " << meta.stimulus.center.y() << " "
      << meta.stimulus.radius << " " << meta.stimulus.iMax << " " << meta.stimulus.gain << " "
      << meta.stimulus.duration << "\n";
    f << "scale " << meta.scaleMin << " " << meta.scaleMax << "\n";
    f << "scars " << meta.scars.size() << "\n";
    for (const auto& s : meta.scars)
        f << s.center.x() << " " << s.center.y() << " " << s.radius << " " << s.factor << "\n";
}

SampleMeta load_sample_meta(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open meta file: " + path);
    SampleMeta meta;
    std::string key;
    f >> key >> meta.seed;
    f >> key >> meta.dt;
    f >> key >> meta.nSample;
    f >> key >> meta.lambdaLT;
    f >> key >> meta.eps;
    f >> key >> meta.stimulus.center.x() >> meta.stimulus.center.y() >> meta.stimulus.radius >>
        meta.stimulus.iMax >> meta.stimulus.gain >> meta.stimulus.duration;
    f >> key >> meta.scaleMin >> meta.scaleMax;
    size_t nScars = 0;
    f >> key >> nScars;
    meta.scars.resize(nScars);
    for (auto& s : meta.scars) f >> s.center.x() >> s.center.y() >> s.radius >> s.factor;
    if (!f) throw IoError("truncated meta file: " + path);
    return meta;
}

DatasetSplit dataset_split(int nSamples) {
    DatasetSplit split;
    const int nTrain = static_cast<int>(0.8 * nSamples);
    const int nVal = static_cast<int>(0.1 * nSamples);
    for (int i = 0; i < nSamples; ++i) {
        if (i < nTrain)
            split.train.push_back(i);
        else if (i < nTrain + nVal)
            split.val.push_back(i);
        else
            split.test.push_back(i);
    }
    return split;
}

DatasetSplit load_split(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open split file: " + path);
    DatasetSplit split;
    std::string line;
    while (std::getline(f, line)) {
        std::stringstream ss(line);
        std::string name;
        ss >> name;
        std::vector<int>* dst = nullptr;
        if (name == "train")
            dst = &split.train;
        else if (name == "val")
            dst = &split.val;
        else if (name == "test")
            dst = &split.test;
        else
            continue;
        int v;
        while (ss >> v) dst->push_back(v);
    }
    return split;
}

void generate_dataset(const std::string& outDir, int nSamples, const SurfaceMesh1D& coarse,
                      const TimeGrid& grid, const DatagenConfig& config, int threads) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(outDir) / "samples");

    std::vector<int> ids(nSamples);
    for (int i = 0; i < nSamples; ++i) ids[i] = i;
    auto worker = [&](size_t begin, size_t end) {
        for (size_t k = begin; k < end; ++k) {
            const int id = ids[k];
            const Sample s = make_sample(static_cast<uint64_t>(id), coarse, grid, config);
            char name[32];
            std::snprintf(name, sizeof(name), "%04d", id);
            save_field(s.truth, (fs::path(outDir) / "samples" / (std::string(name) + ".stf")).string());
            save_sample_meta(s.meta,
                             (fs::path(outDir) / "samples" / (std::string(name) + ".meta")).string());
        }
    };
    const int nThreads = std::max(1, std::min(threads, nSamples));
    if (nThreads == 1) {
        worker(0, ids.size());
    } else {
        std::vector<std::thread> pool;
        const size_t chunk = (ids.size() + nThreads - 1) / nThreads;
        for (int t = 0; t < nThreads; ++t) {
            const size_t b = t * chunk, e = std::min(ids.size(), b + chunk);
            if (b < e) pool.emplace_back(worker, b, e);
        }
        for (auto& th : pool) th.join();
    }

    const DatasetSplit split = dataset_split(nSamples);
    std::ofstream f((fs::path(outDir) / "split.txt").string());
    if (!f) throw IoError("cannot write split file");
    auto writeList = [&](const char* name, const std::vector<int>& v) {
        f << name;
        for (int i : v) f << " " << i;
        f << "\n";
    };
    writeList("train", split.train);
    writeList("val", split.val);
    writeList("test", split.test);
}

} // namespace ecgi
