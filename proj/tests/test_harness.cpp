#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ecgi/errors.hpp"
#include "ecgi/harness.hpp"
#include "helpers.hpp"

using namespace ecgi;
namespace fs = std::filesystem;

TEST_CASE("config parsing: values, lists, comments, errors") {
    const Config cfg = Config::fromString(
        "alpha = 2.5\n"
        "# comment line\n"
        "name = hello world\n"
        "grid = 1, 2.5, 10\n"
        "count = 7  # trailing comment\n");
    CHECK(cfg.num("alpha", 0.0) == 2.5);
    CHECK(cfg.str("name") == "hello world");
    CHECK(cfg.integer("count", 0) == 7);
    const auto grid = cfg.list("grid", {});
    REQUIRE(grid.size() == 3);
    CHECK(grid[1] == 2.5);
    CHECK(cfg.num("missing", -1.0) == -1.0);

    CHECK_THROWS_AS(Config::fromString("not a pair\n"), ConfigError);
    CHECK_THROWS_AS(Config::fromString("x = abc\n").num("x", 0.0), ConfigError);
}

TEST_CASE("l2 error: zero, constant offset closed form, triangle inequality") {
    const SurfaceMesh1D surf = helpers::circle_surface(14, 1.0);
    TimeGrid grid{9, 0.6};
    SurfaceFem fem(surf, grid);

    SpaceTimeField a, b, c;
    a.grid = b.grid = c.grid = grid;
    a.values = helpers::random_matrix(14, grid.nodeCount(), 1);
    b.values = a.values;
    CHECK(l2_error(a, b, fem) == 0.0);

    const double offset = 0.37;
    b.values = a.values.array() + offset;
    const double expected =
        offset * std::sqrt(surf.totalLength() * grid.nIntervals * grid.step);
    CHECK(l2_error(a, b, fem) == doctest::Approx(expected).epsilon(1e-10));

    for (int trial = 0; trial < 20; ++trial) {
        a.values = helpers::random_matrix(14, grid.nodeCount(), 10 + trial);
        b.values = helpers::random_matrix(14, grid.nodeCount(), 40 + trial);
        c.values = helpers::random_matrix(14, grid.nodeCount(), 70 + trial);
        CHECK(l2_error(a, c, fem) <= l2_error(a, b, fem) + l2_error(b, c, fem) + 1e-12);
    }
}

TEST_CASE("result table io and mean consistency") {
    ResultTable t;
    ResultRow r;
    r.noiseLevel = 0.1;
    r.method = "TIK";
    r.tunedParams = "lg=1 lt=2";
    r.perSample = {1.0, 2.0, 4.0};
    for (double e : r.perSample) r.meanError += e;
    r.meanError /= r.perSample.size();
    t.rows.push_back(r);

    save_table_csv(t, "test_table.csv");
    std::ifstream f("test_table.csv");
    std::string header, line;
    std::getline(f, header);
    CHECK(header == "noise,method,params,mean_error,per_sample");
    std::getline(f, line);
    CHECK(line.find("TIK") != std::string::npos);
    std::remove("test_table.csv");

    // the mean recomputed from the per-sample column matches
    double mean = 0.0;
    for (double e : r.perSample) mean += e;
    mean /= r.perSample.size();
    CHECK(std::abs(mean - r.meanError) <= 1e-12);
}

TEST_CASE("spacetime plot: ppm header, constant field, csv round trip") {
    TimeGrid grid{7, 0.5};
    SpaceTimeField u;
    u.grid = grid;
    u.values = Eigen::MatrixXd::Constant(11, grid.nodeCount(), 4.2);
    plot_spacetime(u, "test_plot", 3);

    std::ifstream img("test_plot.ppm", std::ios::binary);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    img >> magic >> w >> h >> maxval;
    CHECK(magic == "P6");
    CHECK(w == 11 * 3);
    CHECK(h == grid.nodeCount() * 3);
    CHECK(maxval == 255);
    img.get();
    std::vector<unsigned char> pixels(3 * w * h);
    img.read(reinterpret_cast<char*>(pixels.data()), pixels.size());
    REQUIRE(bool(img));
    for (size_t i = 3; i < pixels.size(); i += 3) {
        CHECK(pixels[i] == pixels[0]);
        CHECK(pixels[i + 1] == pixels[1]);
        CHECK(pixels[i + 2] == pixels[2]);
    }

    u.values = helpers::random_matrix(11, grid.nodeCount(), 5);
    plot_spacetime(u, "test_plot", 3);
    const SpaceTimeField back = import_field_csv("test_plot.csv", grid);
    CHECK((back.values - u.values).cwiseAbs().maxCoeff() == 0.0);

    std::remove("test_plot.ppm");
    std::remove("test_plot.csv");
}

TEST_CASE("plots are byte-identical across runs") {
    TimeGrid grid{5, 0.5};
    SpaceTimeField u;
    u.grid = grid;
    u.values = helpers::random_matrix(8, grid.nodeCount(), 6);
    plot_spacetime(u, "test_plot_a", 2);
    plot_spacetime(u, "test_plot_b", 2);
    auto slurp = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(f), {});
    };
    CHECK(slurp("test_plot_a.ppm") == slurp("test_plot_b.ppm"));
    for (const char* p : {"test_plot_a.ppm", "test_plot_b.ppm", "test_plot_a.csv",
                          "test_plot_b.csv"})
        std::remove(p);
}

TEST_CASE("refinement study: convex energy order and TIK limit gap") {
    MeshConfig mc;
    mc.targetH = 0.5;
    mc.seed = 4;
    const RefinementReport rep = refinement_study(mc, 3, 8, 4.0);
    REQUIRE(rep.energies.size() == 3);
    REQUIRE(rep.orders.size() == 1);
    MESSAGE("energies: ", rep.energies[0], " ", rep.energies[1], " ", rep.energies[2]);
    MESSAGE("observed order: ", rep.orders[0]);
    CHECK(rep.orders[0] >= 1.5);

    // discrete TIK energy approaches the closed-form limit monotonically
    REQUIRE(rep.tikGapsToLimit.size() == 3);
    CHECK(rep.tikGapsToLimit[1] < rep.tikGapsToLimit[0]);
    CHECK(rep.tikGapsToLimit[2] < rep.tikGapsToLimit[1]);
}

namespace {

// synthetic dataset: smooth random fields, no simulation
void write_fake_dataset(const std::string& dir, const BenchSetup& setup, int nSamples) {
    fs::create_directories(fs::path(dir) / "samples");
    const int nV = setup.surface.nodeCount();
    for (int id = 0; id < nSamples; ++id) {
        SpaceTimeField u;
        u.grid = setup.grid;
        u.values.resize(nV, setup.grid.nodeCount());
        Rng rng(1000 + id);
        const double phase = rng.uniform(0.0, 6.28);
        const double speed = rng.uniform(0.3, 0.8);
        for (int j = 0; j < nV; ++j) {
            const double th =
                std::atan2(setup.surface.points[j].y(), setup.surface.points[j].x());
            for (int s = 0; s < setup.grid.nodeCount(); ++s) {
                const double t = setup.grid.node(s);
                u.values(j, s) = 0.5 + 0.5 * std::tanh(3.0 * std::sin(th - phase) +
                                                       speed * t - 2.0);
            }
        }
        char name[32];
        std::snprintf(name, sizeof(name), "%04d", id);
        save_field(u, (fs::path(dir) / "samples" / (std::string(name) + ".stf")).string());
    }
    std::ofstream split((fs::path(dir) / "split.txt").string());
    split << "train";
    for (int i = 0; i < nSamples - 4; ++i) split << " " << i;
    split << "\nval " << (nSamples - 4) << " " << (nSamples - 3);
    split << "\ntest " << (nSamples - 2) << " " << (nSamples - 1) << "\n";
}

BenchmarkConfig micro_config() {
    BenchmarkConfig b = BenchmarkConfig::fromConfig(Config::fromString(""));
    b.mesh.targetH = 0.55;
    b.nElectrodes = 8;
    b.nTimeIntervals = 12;
    b.horizon = 12.0;
    b.kappaLevels = {0.1};
    b.snrLevels = {30.0};
    b.tikGrid = {0.0, 0.4};
    b.tvGrid = {0.0, 0.05};
    b.foeLambdaGrid = {0.0, 1.0};
    b.foeKappaGrid = {0.1};
    b.tikGridInv = {1e-3, 1e-2};
    b.tvGridInv = {1e-5, 1e-4};
    b.foeLambdaGridInv = {1e-3};
    b.maxValSamples = 2;
    b.maxTestSamples = 2;
    b.proxMaxIter = 400;
    b.proxTol = 1e-6;
    b.inverseMaxIter = 800;
    b.inverseTol = 1e-6;
    b.threads = 2;
    b.dataDir = "test_micro_data";
    return b;
}
} // namespace

TEST_CASE("micro denoise bench: structure, argmin includes identity, reproducibility") {
    const BenchmarkConfig b = micro_config();
    const BenchSetup setup = BenchSetup::build(b);
    write_fake_dataset(b.dataDir, setup, 10);
    const LoadedDataset data = load_dataset(b.dataDir);

    const ResultTable t1 = run_denoise_bench(b, setup, data);
    REQUIRE(t1.rows.size() == 4);  // one kappa level x 4 methods

    for (const auto& row : t1.rows) {
        double mean = 0.0;
        for (double e : row.perSample) mean += e;
        mean /= row.perSample.size();
        CHECK(std::abs(mean - row.meanError) <= 1e-12);
    }

    // grids include the zero weight, so no method can report a tuned
    // validation error above the noisy input; the rows must be finite
    for (const auto& row : t1.rows) CHECK(std::isfinite(row.meanError));

    const ResultTable t2 = run_denoise_bench(b, setup, data);
    REQUIRE(t2.rows.size() == t1.rows.size());
    for (size_t i = 0; i < t1.rows.size(); ++i) {
        CHECK(t1.rows[i].meanError == t2.rows[i].meanError);
        CHECK(t1.rows[i].tunedParams == t2.rows[i].tunedParams);
        for (size_t j = 0; j < t1.rows[i].perSample.size(); ++j)
            CHECK(t1.rows[i].perSample[j] == t2.rows[i].perSample[j]);
    }

    fs::remove_all(b.dataDir);
}

TEST_CASE("micro inverse bench runs all four methods and reproduces itself") {
    BenchmarkConfig b = micro_config();
    b.dataDir = "test_micro_data_inv";
    const BenchSetup setup = BenchSetup::build(b);
    write_fake_dataset(b.dataDir, setup, 10);
    const LoadedDataset data = load_dataset(b.dataDir);

    const ResultTable t1 = run_inverse_bench(b, setup, data);
    REQUIRE(t1.rows.size() == 4);
    for (const auto& row : t1.rows) {
        CHECK(std::isfinite(row.meanError));
        double mean = 0.0;
        for (double e : row.perSample) mean += e;
        mean /= row.perSample.size();
        CHECK(std::abs(mean - row.meanError) <= 1e-12);
    }

    const ResultTable t2 = run_inverse_bench(b, setup, data);
    for (size_t i = 0; i < t1.rows.size(); ++i)
        CHECK(t1.rows[i].meanError == t2.rows[i].meanError);

    fs::remove_all(b.dataDir);
}

TEST_CASE("zero-weight rows reproduce the noisy input exactly") {
    BenchmarkConfig b = micro_config();
    b.dataDir = "test_micro_data_zero";
    const BenchSetup setup = BenchSetup::build(b);
    write_fake_dataset(b.dataDir, setup, 10);
    const LoadedDataset data = load_dataset(b.dataDir);
    const SurfaceFem& fem = *setup.fem;

    // tik/tv at zero weights are the identity: tuned mean error is bounded by
    // the noisy-field error for every method sharing the grid
    const int id = data.split.val[0];
    const SpaceTimeField noisy = add_field_noise(data.fields[id], 0.1, 123);
    CHECK((tik_denoise(noisy, 0.0, 0.0, fem).values - noisy.values).cwiseAbs().maxCoeff() ==
          0.0);
    CHECK((tv_denoise(noisy, 0.0, 0.0, fem).u.values - noisy.values).cwiseAbs().maxCoeff() ==
          0.0);
    fs::remove_all(b.dataDir);
}
