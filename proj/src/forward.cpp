#include "ecgi/forward.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "ecgi/errors.hpp"
#include "ecgi/rng.hpp"

namespace ecgi {

Eigen::VectorXd ForwardSystem::solve(const Eigen::VectorXd& uHeart) const {
    if (uHeart.size() != static_cast<Eigen::Index>(heartDofs.size()))
        throw ShapeMismatch("epicardial data size does not match heart node count");
    const Eigen::VectorXd rhs = -(Kfh * uHeart);
    const Eigen::VectorXd w = llt->solve(rhs);
    Eigen::VectorXd v = Eigen::VectorXd::Zero(nTotal);
    for (size_t i = 0; i < freeDofs.size(); ++i) v[freeDofs[i]] = w[i];
    for (size_t i = 0; i < heartDofs.size(); ++i) v[heartDofs[i]] = uHeart[i];
    return v;
}

ForwardSystem build_forward_system(const Mesh2D& mesh, const Conductivity& sigma) {
    ForwardSystem sys;
    sys.surface = extract_epicardial_curve(mesh);
    sys.heartDofs = sys.surface.vertexIds;
    sys.nTotal = mesh.vertexCount();
    sys.K = assemble_stiffness(mesh, sigma);

    std::vector<int> where(sys.nTotal, -1);  // >=0: free index, -2: heart
    for (int h : sys.heartDofs) where[h] = -2;
    for (int v = 0; v < sys.nTotal; ++v)
        if (where[v] == -1) {
            where[v] = static_cast<int>(sys.freeDofs.size());
            sys.freeDofs.push_back(v);
        }

    for (const auto& e : mesh.boundaryEdges) {
        if (e.marker != BoundaryMarker::Outer) continue;
        sys.outerDofs.push_back(e.a);
    }

    const int nf = static_cast<int>(sys.freeDofs.size());
    const int nh = static_cast<int>(sys.heartDofs.size());
    std::vector<int> heartIndex(sys.nTotal, -1);
    for (int i = 0; i < nh; ++i) heartIndex[sys.heartDofs[i]] = i;

    std::vector<Eigen::Triplet<double>> tff, tfh;
    for (int k = 0; k < sys.K.outerSize(); ++k) {
        for (SpMat::InnerIterator it(sys.K, k); it; ++it) {
            const int r = static_cast<int>(it.row()), c = static_cast<int>(it.col());
            if (where[r] >= 0 && where[c] >= 0)
                tff.emplace_back(where[r], where[c], it.value());
            else if (where[r] >= 0 && where[c] == -2)
                tfh.emplace_back(where[r], heartIndex[c], it.value());
        }
    }
    sys.Kff.resize(nf, nf);
    sys.Kff.setFromTriplets(tff.begin(), tff.end());
    sys.Kfh.resize(nf, nh);
    sys.Kfh.setFromTriplets(tfh.begin(), tfh.end());

    sys.llt = std::make_shared<Eigen::SimplicialLLT<SpMat>>();
    sys.llt->compute(sys.Kff);
    if (sys.llt->info() != Eigen::Success)
        throw SingularSystem("Dirichlet-reduced stiffness is not SPD");

    // probe solve residual
    Rng rng(12345);
    Eigen::VectorXd b(nf);
    for (int i = 0; i < nf; ++i) b[i] = rng.normal();
    const Eigen::VectorXd x = sys.llt->solve(b);
    if ((sys.Kff * x - b).norm() > 1e-10 * b.norm())
        throw SingularSystem("probe solve residual above 1e-10");

    return sys;
}

namespace {

// trapezoidal average of the nodal trace over one electrode patch
double patch_average(const Mesh2D& mesh, const ElectrodeSet& electrodes, int patch,
                     const Eigen::VectorXd& v) {
    double integral = 0.0, length = 0.0;
    for (int e : electrodes.patches[patch]) {
        const auto& be = mesh.boundaryEdges[e];
        const double len = (mesh.vertices[be.b] - mesh.vertices[be.a]).norm();
        integral += 0.5 * len * (v[be.a] + v[be.b]);
        length += len;
    }
    return integral / length;
}

} // namespace

Eigen::VectorXd forward_apply_matrix_free(const ForwardSystem& system, const Mesh2D& mesh,
                                          const ElectrodeSet& electrodes,
                                          const Eigen::VectorXd& uHeart) {
    const Eigen::VectorXd v = system.solve(uHeart);
    Eigen::VectorXd out(electrodes.patchCount());
    for (int c = 0; c < electrodes.patchCount(); ++c)
        out[c] = patch_average(mesh, electrodes, c, v);
    return out;
}

ForwardMatrix assemble_forward_matrix(const ForwardSystem& system, const Mesh2D& mesh,
                                      const ElectrodeSet& electrodes) {
    const int nh = static_cast<int>(system.heartDofs.size());
    ForwardMatrix fm;
    fm.A.resize(electrodes.patchCount(), nh);
    Eigen::VectorXd unit = Eigen::VectorXd::Zero(nh);
    for (int j = 0; j < nh; ++j) {
        unit[j] = 1.0;
        fm.A.col(j) = forward_apply_matrix_free(system, mesh, electrodes, unit);
        unit[j] = 0.0;
    }
    return fm;
}

FidelityResult fidelity_value_grad(const SpaceTimeField& u, const Observation& z,
                                   const ForwardMatrix& A, const SpMat& D,
                                   const Eigen::VectorXd& Mlump) {
    if (u.vertexCount() != A.heartNodeCount())
        throw ShapeMismatch("field rows do not match forward matrix columns");
    if (z.values.rows() != A.electrodeCount() || z.values.cols() != u.values.cols())
        throw ShapeMismatch("observation shape does not match forward matrix / field");
    const int nSigma = A.electrodeCount();

    const Eigen::MatrixXd r = A.A * u.values - z.values;
    const Eigen::MatrixXd rD = r * D;
    FidelityResult out;
    out.value = 0.5 / nSigma * r.cwiseProduct(rD).sum();
    out.grad.grid = u.grid;
    out.grad.values = (1.0 / nSigma) * Mlump.cwiseInverse().asDiagonal() * (A.A.transpose() * r);
    return out;
}

void save_observation(const Observation& z, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open observation file for writing: " + path);
    f.write("OBS1", 4);
    const uint64_t ns = static_cast<uint64_t>(z.values.rows());
    const uint64_t nt = static_cast<uint64_t>(z.values.cols());
    const double dt = z.grid.step;
    const uint32_t kind = static_cast<uint32_t>(z.noise.kind);
    f.write(reinterpret_cast<const char*>(&ns), 8);
    f.write(reinterpret_cast<const char*>(&nt), 8);
    f.write(reinterpret_cast<const char*>(&dt), 8);
    f.write(reinterpret_cast<const char*>(&kind), 4);
    f.write(reinterpret_cast<const char*>(&z.noise.kappa), 8);
    f.write(reinterpret_cast<const char*>(&z.noise.snrDb), 8);
    f.write(reinterpret_cast<const char*>(&z.noise.seed), 8);
    for (int i = 0; i < z.values.rows(); ++i)
        for (int j = 0; j < z.values.cols(); ++j) {
            const double v = z.values(i, j);
            f.write(reinterpret_cast<const char*>(&v), 8);
        }
    if (!f) throw IoError("failed writing observation file: " + path);
}

Observation load_observation(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open observation file: " + path);
    char magic[4];
    f.read(magic, 4);
    if (std::memcmp(magic, "OBS1", 4) != 0) throw IoError("bad observation magic in " + path);
    uint64_t ns = 0, nt = 0;
    double dt = 0.0;
    uint32_t kind = 0;
    Observation z;
    f.read(reinterpret_cast<char*>(&ns), 8);
    f.read(reinterpret_cast<char*>(&nt), 8);
    f.read(reinterpret_cast<char*>(&dt), 8);
    f.read(reinterpret_cast<char*>(&kind), 4);
    f.read(reinterpret_cast<char*>(&z.noise.kappa), 8);
    f.read(reinterpret_cast<char*>(&z.noise.snrDb), 8);
    f.read(reinterpret_cast<char*>(&z.noise.seed), 8);
    if (!f || ns == 0 || nt < 2) throw IoError("bad observation header in " + path);
    z.noise.kind = static_cast<NoiseMeta::Kind>(kind);
    z.grid.nIntervals = static_cast<int>(nt) - 1;
    z.grid.step = dt;
    z.values.resize(static_cast<int>(ns), static_cast<int>(nt));
    for (int i = 0; i < z.values.rows(); ++i)
        for (int j = 0; j < z.values.cols(); ++j) {
            double v;
            f.read(reinterpret_cast<char*>(&v), 8);
            z.values(i, j) = v;
        }
    if (!f) throw IoError("truncated observation file: " + path);
    return z;
}

void export_observation_csv(const Observation& z, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open csv for writing: " + path);
    f.precision(17);
    for (int i = 0; i < z.values.rows(); ++i) {
        for (int j = 0; j < z.values.cols(); ++j) {
            if (j) f << ",";
            f << z.values(i, j);
        }
        f << "\n";
    }
}

} // namespace ecgi
