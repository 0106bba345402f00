#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "ecgi/errors.hpp"
#include "ecgi/harness.hpp"
#include "ecgi/solver.hpp"

namespace fs = std::filesystem;
using namespace ecgi;

namespace {

struct GlobalArgs {
    std::string configPath;
    std::string outDir = "out";
    uint64_t seed = 0;
    int threads = 1;
    bool seedSet = false;
    bool threadsSet = false;
};

BenchmarkConfig load_bench_config(const GlobalArgs& g) {
    Config cfg = g.configPath.empty() ? Config() : Config::fromFile(g.configPath);
    BenchmarkConfig b = BenchmarkConfig::fromConfig(cfg);
    if (g.seedSet) b.seed = g.seed;
    if (g.threadsSet) b.threads = g.threads;
    if (!g.outDir.empty()) b.outDir = g.outDir;
    return b;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << text;
}

int run_mesh(const GlobalArgs& g) {
    const BenchmarkConfig b = load_bench_config(g);
    fs::create_directories(b.outDir);
    const Mesh2D mesh = build_torso_mesh(b.mesh);
    const ElectrodeSet electrodes = define_electrodes(mesh, b.nElectrodes, b.coverage);
    save_mesh(mesh, &electrodes, (fs::path(b.outDir) / "mesh.txt").string());
    const SurfaceMesh1D curve = extract_epicardial_curve(mesh);
    std::cout << "mesh: " << mesh.vertexCount() << " vertices, " << mesh.triangleCount()
              << " triangles, " << curve.nodeCount() << " epicardial nodes, "
              << electrodes.patchCount() << " electrodes\n";
    std::cout << "wrote " << (fs::path(b.outDir) / "mesh.txt").string() << "\n";
    return 0;
}

int run_datagen(const GlobalArgs& g) {
    const BenchmarkConfig b = load_bench_config(g);
    const BenchSetup setup = BenchSetup::build(b);
    fs::create_directories(b.dataDir);
    generate_dataset(b.dataDir, b.nSamples, setup.surface, setup.grid, b.datagen, b.threads);
    std::cout << "generated " << b.nSamples << " samples into " << b.dataDir << "\n";
    return 0;
}

int run_denoise(const GlobalArgs& g) {
    const BenchmarkConfig b = load_bench_config(g);
    const BenchSetup setup = BenchSetup::build(b);
    const LoadedDataset data = load_dataset(b.dataDir);
    const ResultTable table = run_denoise_bench(b, setup, data);
    fs::create_directories(b.outDir);
    save_table_csv(table, (fs::path(b.outDir) / "denoise.csv").string());
    save_table_text(table, (fs::path(b.outDir) / "denoise.txt").string());
    std::cout << format_table(table);
    return 0;
}

int run_inverse(const GlobalArgs& g) {
    const BenchmarkConfig b = load_bench_config(g);
    const BenchSetup setup = BenchSetup::build(b);
    const LoadedDataset data = load_dataset(b.dataDir);
    const ResultTable table = run_inverse_bench(b, setup, data);
    fs::create_directories(b.outDir);
    save_table_csv(table, (fs::path(b.outDir) / "inverse.csv").string());
    save_table_text(table, (fs::path(b.outDir) / "inverse.txt").string());
    std::cout << format_table(table);
    return 0;
}

int run_eval(const GlobalArgs& g, const std::string& uPath, const std::string& refPath) {
    const BenchmarkConfig b = load_bench_config(g);
    const BenchSetup setup = BenchSetup::build(b);
    const SpaceTimeField u = load_field(uPath);
    const SpaceTimeField ref = load_field(refPath);
    std::cout.precision(12);
    std::cout << "l2_error " << l2_error(u, ref, *setup.fem) << "\n";
    return 0;
}

int run_refine_study(const GlobalArgs& g) {
    const BenchmarkConfig b = load_bench_config(g);
    const RefinementReport rep =
        refinement_study(b.mesh, 3, std::max(8, b.nTimeIntervals / 4), b.horizon);
    std::stringstream out;
    out.precision(10);
    out << "level energy tik_energy tik_gap_to_limit\n";
    for (size_t l = 0; l < rep.energies.size(); ++l)
        out << l << " " << rep.energies[l] << " " << rep.tikEnergies[l] << " "
            << rep.tikGapsToLimit[l] << "\n";
    out << "gaps:";
    for (double gap : rep.gaps) out << " " << gap;
    out << "\norders:";
    for (double o : rep.orders) out << " " << o;
    out << "\n";
    std::cout << out.str();
    fs::create_directories(b.outDir);
    write_text((fs::path(b.outDir) / "refine_study.txt").string(), out.str());
    return 0;
}

int run_train(const GlobalArgs& g, const std::string& modelOut, int budget, double kappa) {
    const BenchmarkConfig b = load_bench_config(g);
    const BenchSetup setup = BenchSetup::build(b);
    const LoadedDataset data = load_dataset(b.dataDir);

    RegularizerModel model0 = b.nonconvexModelPath.empty()
                                  ? make_default_model(false, setup.grid.step)
                                  : load_model(b.nonconvexModelPath);

    std::vector<TrainSample> train;
    const int nTrain = std::min<int>(static_cast<int>(data.split.train.size()),
                                     std::max(1, b.maxValSamples));
    for (int k = 0; k < nTrain; ++k) {
        const int id = data.split.train[k];
        TrainSample s;
        s.clean = data.fields[id];
        s.kappa = kappa;
        s.noisy = add_field_noise(s.clean, kappa, b.seed + 31 * id + 7);
        train.push_back(std::move(s));
    }

    SpsaOptions so;
    so.seed = b.seed + 101;
    so.threads = b.threads;
    const SpsaResult res = spsa_train(train, model0, budget, *setup.fem, so);
    save_model(res.model, modelOut);
    std::cout << "initial loss " << res.initialLoss << ", final loss " << res.finalLoss
              << ", wrote " << modelOut << "\n";
    return 0;
}

int run_plot(const GlobalArgs& g, const std::string& fieldPath, const std::string& prefix) {
    (void)g;
    const SpaceTimeField u = load_field(fieldPath);
    plot_spacetime(u, prefix);
    std::cout << "wrote " << prefix << ".ppm and " << prefix << ".csv\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"epicardial potential reconstruction toolkit"};
    app.require_subcommand(1);

    GlobalArgs g;
    app.add_option("--config", g.configPath, "key = value configuration file");
    app.add_option("--out", g.outDir, "output directory");
    auto* seedOpt = app.add_option("--seed", g.seed, "global seed");
    auto* thrOpt = app.add_option("--threads", g.threads, "worker threads");

    app.add_subcommand("mesh", "build the torso mesh and electrode layout")->fallthrough();
    app.add_subcommand("datagen", "generate the synthetic dataset")->fallthrough();
    app.add_subcommand("denoise", "run the denoising benchmark")->fallthrough();
    app.add_subcommand("inverse", "run the inverse-problem benchmark")->fallthrough();

    auto* evalCmd = app.add_subcommand("eval", "L2 error between two field files");
    evalCmd->fallthrough();
    std::string evalU, evalRef;
    evalCmd->add_option("--u", evalU, "reconstruction .stf")->required();
    evalCmd->add_option("--ref", evalRef, "reference .stf")->required();

    app.add_subcommand("refine-study", "energy refinement study")->fallthrough();

    auto* trainCmd = app.add_subcommand("train", "tune the nonconvex model by SPSA");
    trainCmd->fallthrough();
    std::string modelOut = "trained_model.txt";
    int budget = 60;
    double trainKappa = 0.1;
    trainCmd->add_option("--model-out", modelOut, "output model file");
    trainCmd->add_option("--budget", budget, "SPSA steps");
    trainCmd->add_option("--kappa", trainKappa, "training noise level");

    auto* plotCmd = app.add_subcommand("plot", "render a field to .ppm + .csv");
    plotCmd->fallthrough();
    std::string plotField, plotPrefix = "field";
    plotCmd->add_option("--u", plotField, "field .stf")->required();
    plotCmd->add_option("--prefix", plotPrefix, "output path prefix");

    try {
        app.parse(argc, argv);
        g.seedSet = seedOpt->count() > 0;
        g.threadsSet = thrOpt->count() > 0;

        if (app.got_subcommand("mesh")) return run_mesh(g);
        if (app.got_subcommand("datagen")) return run_datagen(g);
        if (app.got_subcommand("denoise")) return run_denoise(g);
        if (app.got_subcommand("inverse")) return run_inverse(g);
        if (app.got_subcommand("eval")) return run_eval(g, evalU, evalRef);
        if (app.got_subcommand("refine-study")) return run_refine_study(g);
        if (app.got_subcommand("train")) return run_train(g, modelOut, budget, trainKappa);
        if (app.got_subcommand("plot")) return run_plot(g, plotField, plotPrefix);
        return 2;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const MissingArtifacts& e) {
        std::cerr << "missing artifacts: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    }
}
