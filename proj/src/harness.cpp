#include "ecgi/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <atomic>
#include <thread>

#include "ecgi/errors.hpp"
#include "ecgi/rng.hpp"

namespace ecgi {

namespace {
constexpr double kPi = std::numbers::pi;

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}
} // namespace

Config Config::fromString(const std::string& text) {
    Config cfg;
    std::stringstream ss(text);
    std::string line;
    int lineNo = 0;
    while (std::getline(ss, line)) {
        ++lineNo;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineNo) + " is not 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("empty key at config line " + std::to_string(lineNo));
        cfg.kv_[key] = value;
    }
    return cfg;
}

Config Config::fromFile(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return fromString(ss.str());
}

std::string Config::str(const std::string& key, const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
}

double Config::num(const std::string& key, double fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
        return std::stod(it->second);
    } catch (...) {
        throw ConfigError("config key '" + key + "' is not a number: " + it->second);
    }
}

int Config::integer(const std::string& key, int fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
        return std::stoi(it->second);
    } catch (...) {
        throw ConfigError("config key '" + key + "' is not an integer: " + it->second);
    }
}

std::vector<double> Config::list(const std::string& key,
                                 const std::vector<double>& fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    std::vector<double> out;
    std::stringstream ss(it->second);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        cell = trim(cell);
        if (cell.empty()) continue;
        try {
            out.push_back(std::stod(cell));
        } catch (...) {
            throw ConfigError("config key '" + key + "' has a non-numeric entry: " + cell);
        }
    }
    if (out.empty()) throw ConfigError("config key '" + key + "' is an empty list");
    return out;
}

BenchmarkConfig BenchmarkConfig::fromConfig(const Config& cfg) {
    BenchmarkConfig b;
    b.mesh.outerRadius = cfg.num("outer_radius", 3.0);
    b.mesh.heartRadius = cfg.num("heart_radius", 1.0);
    b.mesh.heartCenter = Vec2(cfg.num("heart_cx", 0.0), cfg.num("heart_cy", 0.0));
    b.mesh.targetH = cfg.num("target_h", 2.0 * kPi * b.mesh.outerRadius / 64.0);
    b.mesh.seed = static_cast<uint64_t>(cfg.num("mesh_seed", 1.0));
    b.mesh.jitter = cfg.num("mesh_jitter", 0.15);
    const auto lungs = cfg.list("lungs", {});
    for (size_t i = 0; i + 3 <= lungs.size(); i += 3)
        b.mesh.lungDisks.push_back({Vec2(lungs[i], lungs[i + 1]), lungs[i + 2]});
    b.nElectrodes = cfg.integer("n_electrodes", 32);
    b.coverage = cfg.num("coverage", 0.9);
    b.nTimeIntervals = cfg.integer("n_time_intervals", 60);
    b.horizon = cfg.num("horizon_ms", 100.0);
    b.dataDir = cfg.str("data_dir", "data");
    b.outDir = cfg.str("out_dir", "out");
    b.nSamples = cfg.integer("n_samples", 200);
    b.maxValSamples = cfg.integer("max_val_samples", 8);
    b.maxTestSamples = cfg.integer("max_test_samples", 20);
    b.kappaLevels = cfg.list("kappa_levels", {0.05, 0.1, 0.2});
    b.snrLevels = cfg.list("snr_levels", {30.0, 40.0, 50.0});
    b.tikGrid = cfg.list("tik_grid", {0.0, 0.15, 0.3, 0.6, 1.2, 2.4, 4.8, 9.6});
    b.tvGrid = cfg.list("tv_grid", {0.0, 0.011, 0.022, 0.044, 0.088, 0.177, 0.354, 0.707});
    b.foeLambdaGrid = cfg.list("foe_lambda_grid", {0.7, 1.75, 3.5, 7.0, 14.0, 28.0, 56.0, 112.0});
    b.foeKappaGrid = cfg.list("foe_kappa_grid", {0.02, 0.05, 0.1, 0.2, 0.4});
    b.tikGridInv =
        cfg.list("tik_grid_inv", {3e-4, 1e-3, 3e-3, 8.4e-3, 2.4e-2, 7e-2, 2e-1, 6e-1});
    b.tvGridInv =
        cfg.list("tv_grid_inv", {5e-7, 2e-6, 6e-6, 2e-5, 6e-5, 2e-4, 6e-4, 2e-3});
    b.foeLambdaGridInv =
        cfg.list("foe_lambda_grid_inv", {9e-4, 5e-3, 1.8e-2, 3.5e-2, 8e-2, 2e-1, 8e-1});
    b.convexModelPath = cfg.str("convex_model", "");
    b.nonconvexModelPath = cfg.str("nonconvex_model", "");
    b.proxMaxIter = cfg.integer("prox_max_iter", 3000);
    b.proxTol = cfg.num("prox_tol", 1e-6);
    b.inverseMaxIter = cfg.integer("inverse_max_iter", 6000);
    b.inverseTol = cfg.num("inverse_tol", 1e-6);
    b.threads = cfg.integer("threads", 1);
    b.seed = static_cast<uint64_t>(cfg.num("seed", 0.0));
    b.datagen.heart.radius = b.mesh.heartRadius;
    b.datagen.heart.center = b.mesh.heartCenter;
    b.datagen.heart.boundarySegments = cfg.integer("fine_boundary_segments", 258);
    b.datagen.heart.stimulus.gain = cfg.num("stimulus_gain", 32.0);
    return b;
}

double l2_error(const SpaceTimeField& u, const SpaceTimeField& ref, const SurfaceFem& fem) {
    if (!u.sameShape(ref)) throw ShapeMismatch("fields differ in shape");
    return std::sqrt(fem.massNormSq(u.values - ref.values));
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
    const int nThreads = std::max(1, std::min(threads, n));
    if (nThreads <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (int t = 0; t < nThreads; ++t)
        pool.emplace_back([&]() {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    for (auto& th : pool) th.join();
}

BenchSetup BenchSetup::build(const BenchmarkConfig& config) {
    BenchSetup s;
    s.mesh = build_torso_mesh(config.mesh);
    s.electrodes = define_electrodes(s.mesh, config.nElectrodes, config.coverage);
    s.surface = extract_epicardial_curve(s.mesh);
    s.grid.nIntervals = config.nTimeIntervals;
    s.grid.step = config.horizon / config.nTimeIntervals;
    s.fem = std::make_unique<SurfaceFem>(s.surface, s.grid);
    const Conductivity sigma = Conductivity::isotropic(0.2, 0.05);
    s.system = std::make_unique<ForwardSystem>(build_forward_system(s.mesh, sigma));
    s.forward = assemble_forward_matrix(*s.system, s.mesh, s.electrodes);
    return s;
}

RegularizerModel make_default_model(bool convex, double delta) {
    RegularizerModel m;
    m.lambda = 7.0;
    m.epsTheta = 0.2;
    m.epsOmega = 1e-3;
    m.convexMode = convex;
    const double s = 1.0 / std::max(delta, 1e-9);

    ExpertParams e1;  // temporal curvature detector
    e1.mu = 1.0;
    e1.eta = 1.5;
    e1.kernel = s * (Eigen::VectorXd(5) << 0.0, -1.0, 2.0, -1.0, 0.0).finished();

    ExpertParams e2;  // temporal slope detector
    e2.mu = 1.0;
    e2.eta = 1.5;
    e2.kernel = s * (Eigen::VectorXd(5) << 0.0, -0.5, 0.0, 0.5, 0.0).finished();

    if (!convex) {
        const Mat4 q = 0.5 * Mat4::Identity();
        e1.Q = q;
        e1.eta = 0.8;
        e2.Q = q;
        e2.eta = 0.8;
    }
    m.experts = {e1, e2};
    validate_model(m);
    return m;
}

LoadedDataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    LoadedDataset data;
    const std::string splitPath = (fs::path(dir) / "split.txt").string();
    if (!fs::exists(splitPath)) throw MissingArtifacts("no split.txt in dataset dir " + dir);
    data.split = load_split(splitPath);
    int maxId = -1;
    for (const auto* v : {&data.split.train, &data.split.val, &data.split.test})
        for (int id : *v) maxId = std::max(maxId, id);
    data.fields.resize(maxId + 1);
    for (const auto* v : {&data.split.train, &data.split.val, &data.split.test})
        for (int id : *v) {
            char name[32];
            std::snprintf(name, sizeof(name), "%04d", id);
            const std::string p = (fs::path(dir) / "samples" / (std::string(name) + ".stf")).string();
            if (!fs::exists(p)) throw MissingArtifacts("missing sample file " + p);
            data.fields[id] = load_field(p);
        }
    return data;
}

void save_table_csv(const ResultTable& table, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open table file for writing: " + path);
    f.precision(17);
    f << "noise,method,params,mean_error,per_sample\n";
    for (const auto& r : table.rows) {
        f << r.noiseLevel << "," << r.method << "," << r.tunedParams << "," << r.meanError << ",";
        for (size_t i = 0; i < r.perSample.size(); ++i) f << (i ? ";" : "") << r.perSample[i];
        f << "\n";
    }
}

std::string format_table(const ResultTable& table) {
    std::stringstream ss;
    ss << std::left << std::setw(10) << "noise" << std::setw(8) << "method" << std::setw(34)
       << "params" << std::setw(14) << "mean_error" << "\n";
    for (const auto& r : table.rows) {
        ss << std::left << std::setw(10) << r.noiseLevel << std::setw(8) << r.method
           << std::setw(34) << r.tunedParams << std::setw(14) << std::setprecision(6)
           << r.meanError << "\n";
    }
    return ss.str();
}

void save_table_text(const ResultTable& table, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open table file for writing: " + path);
    f << format_table(table);
}

namespace {

uint64_t mix_seed(uint64_t base, uint64_t level, uint64_t sample) {
    uint64_t x = base + 0x9E3779B97F4A7C15ULL * (level + 1) + 0xBF58476D1CE4E5B9ULL * (sample + 1);
    x ^= x >> 30;
    x *= 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
}

struct TunedRun {
    std::string params;
    double meanVal = std::numeric_limits<double>::infinity();
};

// mean validation error over candidate grid points, first strict minimum wins
template <typename Candidates, typename RunOne>
std::pair<typename Candidates::value_type, double> tune_grid(
    const Candidates& candidates, int nVal, int threads, const RunOne& runOne) {
    typename Candidates::value_type best{};
    double bestErr = std::numeric_limits<double>::infinity();
    bool first = true;
    for (const auto& cand : candidates) {
        std::vector<double> errs(nVal, 0.0);
        parallel_for(nVal, threads, [&](int i) { errs[i] = runOne(cand, i); });
        double mean = 0.0;
        for (double e : errs) mean += e;
        mean /= std::max(1, nVal);
        if (first || mean < bestErr) {
            best = cand;
            bestErr = mean;
            first = false;
        }
    }
    return {best, bestErr};
}

std::vector<int> head(const std::vector<int>& v, int n) {
    std::vector<int> out(v.begin(), v.begin() + std::min<size_t>(v.size(), n));
    return out;
}

} // namespace

ResultTable run_denoise_bench(const BenchmarkConfig& config, const BenchSetup& setup,
                              const LoadedDataset& data,
                              const RegularizerModel* trainedNonconvex) {
    const SurfaceFem& fem = *setup.fem;
    const std::vector<int> valIds = head(data.split.val, config.maxValSamples);
    const std::vector<int> testIds = head(data.split.test, config.maxTestSamples);
    if (valIds.empty() || testIds.empty())
        throw MissingArtifacts("dataset has empty validation or test split");

    RegularizerModel convexModel = config.convexModelPath.empty()
                                       ? make_default_model(true, setup.grid.step)
                                       : load_model(config.convexModelPath);
    RegularizerModel nonconvexModel =
        trainedNonconvex ? *trainedNonconvex
                         : (config.nonconvexModelPath.empty()
                                ? make_default_model(false, setup.grid.step)
                                : load_model(config.nonconvexModelPath));

    // operator norms are kappa/lambda independent: one estimate per model
    const FoeContext ctxC(convexModel, fem);
    const FoeContext ctxN(nonconvexModel, fem);
    const double lamMaxC = foe_operator_lambda_max(ctxC, false);
    const double lamMaxN = foe_operator_lambda_max(ctxN, false);

    ResultTable table;
    for (size_t level = 0; level < config.kappaLevels.size(); ++level) {
        const double kappa = config.kappaLevels[level];

        auto noisyField = [&](int id) {
            return add_field_noise(data.fields[id], kappa, mix_seed(config.seed, level, id));
        };
        std::vector<SpaceTimeField> valNoisy, testNoisy;
        for (int id : valIds) valNoisy.push_back(noisyField(id));
        for (int id : testIds) testNoisy.push_back(noisyField(id));

        auto evaluate = [&](const std::string& method, const std::string& params,
                            const std::function<SpaceTimeField(const SpaceTimeField&)>& recon) {
            ResultRow row;
            row.noiseLevel = kappa;
            row.method = method;
            row.tunedParams = params;
            row.perSample.resize(testIds.size());
            parallel_for(static_cast<int>(testIds.size()), config.threads, [&](int i) {
                row.perSample[i] =
                    l2_error(recon(testNoisy[i]), data.fields[testIds[i]], fem);
            });
            for (double e : row.perSample) row.meanError += e;
            row.meanError /= row.perSample.size();
            table.rows.push_back(row);
        };

        {  // TIK over (lambda_gamma, lambda_t)
            std::vector<std::pair<double, double>> cands;
            for (double lg : config.tikGrid)
                for (double lt : config.tikGrid) cands.emplace_back(lg, lt);
            auto [best, err] = tune_grid(cands, static_cast<int>(valIds.size()), config.threads,
                                         [&](const std::pair<double, double>& c, int i) {
                                             const SpaceTimeField u = tik_denoise(
                                                 valNoisy[i], c.first, c.second, fem);
                                             return l2_error(u, data.fields[valIds[i]], fem);
                                         });
            std::stringstream ps;
            ps << "lg=" << best.first << " lt=" << best.second;
            evaluate("TIK", ps.str(), [&, best](const SpaceTimeField& z) {
                return tik_denoise(z, best.first, best.second, fem);
            });
        }
        {  // TV over (lambda_gamma, lambda_t)
            std::vector<std::pair<double, double>> cands;
            for (double lg : config.tvGrid)
                for (double lt : config.tvGrid) cands.emplace_back(lg, lt);
            auto [best, err] = tune_grid(cands, static_cast<int>(valIds.size()), config.threads,
                                         [&](const std::pair<double, double>& c, int i) {
                                             const TvResult r = tv_denoise(
                                                 valNoisy[i], c.first, c.second, fem);
                                             return l2_error(r.u, data.fields[valIds[i]], fem);
                                         });
            std::stringstream ps;
            ps << "lg=" << best.first << " lt=" << best.second;
            evaluate("TV", ps.str(), [&, best](const SpaceTimeField& z) {
                return tv_denoise(z, best.first, best.second, fem).u;
            });
        }
        for (int variant = 0; variant < 2; ++variant) {  // CMFoE, MFoE
            const bool convex = variant == 0;
            const RegularizerModel& base = convex ? convexModel : nonconvexModel;
            const double lamMax = convex ? lamMaxC : lamMaxN;
            std::vector<std::pair<double, double>> cands;  // (lambda, kappa_model)
            for (double lam : config.foeLambdaGrid)
                for (double km : config.foeKappaGrid) cands.emplace_back(lam, km);
            auto solveWith = [&](const std::pair<double, double>& c, const SpaceTimeField& z) {
                RegularizerModel m = base;
                m.lambda = c.first;
                ProxOptions po;
                po.maxIter = config.proxMaxIter;
                po.tol = config.proxTol;
                po.regLambdaMax = lamMax;
                return prox_denoise(z, m, c.second, fem, po).u;
            };
            auto [best, err] = tune_grid(cands, static_cast<int>(valIds.size()), config.threads,
                                         [&](const std::pair<double, double>& c, int i) {
                                             return l2_error(solveWith(c, valNoisy[i]),
                                                             data.fields[valIds[i]], fem);
                                         });
            std::stringstream ps;
            ps << "lambda=" << best.first << " kappa=" << best.second;
            evaluate(convex ? "CMFoE" : "MFoE", ps.str(),
                     [&, best](const SpaceTimeField& z) { return solveWith(best, z); });
        }
    }
    return table;
}

ResultTable run_inverse_bench(const BenchmarkConfig& config, const BenchSetup& setup,
                              const LoadedDataset& data,
                              const RegularizerModel* trainedNonconvex) {
    const SurfaceFem& fem = *setup.fem;
    const std::vector<int> valIds = head(data.split.val, config.maxValSamples);
    const std::vector<int> testIds = head(data.split.test, config.maxTestSamples);
    if (valIds.empty() || testIds.empty())
        throw MissingArtifacts("dataset has empty validation or test split");

    RegularizerModel convexModel = config.convexModelPath.empty()
                                       ? make_default_model(true, setup.grid.step)
                                       : load_model(config.convexModelPath);
    RegularizerModel nonconvexModel =
        trainedNonconvex ? *trainedNonconvex
                         : (config.nonconvexModelPath.empty()
                                ? make_default_model(false, setup.grid.step)
                                : load_model(config.nonconvexModelPath));

    const FoeContext ctxC(convexModel, fem);
    const FoeContext ctxN(nonconvexModel, fem);
    const double lamMaxC = foe_operator_lambda_max(ctxC, true);
    const double lamMaxN = foe_operator_lambda_max(ctxN, true);
    const double fidLip = fidelity_lipschitz(setup.forward, fem);

    auto makeObservation = [&](int id, double snr, uint64_t seed) {
        Observation z;
        z.grid = setup.grid;
        z.values = setup.forward.A * data.fields[id].values;
        return add_observation_noise(z, snr, seed);
    };

    ResultTable table;
    for (size_t level = 0; level < config.snrLevels.size(); ++level) {
        const double snr = config.snrLevels[level];

        std::vector<Observation> valObs, testObs;
        for (int id : valIds) valObs.push_back(makeObservation(id, snr, mix_seed(config.seed + 77, level, id)));
        for (int id : testIds)
            testObs.push_back(makeObservation(id, snr, mix_seed(config.seed + 77, level, id)));

        auto evaluate = [&](const std::string& method, const std::string& params,
                            const std::function<SpaceTimeField(const Observation&)>& recon) {
            ResultRow row;
            row.noiseLevel = snr;
            row.method = method;
            row.tunedParams = params;
            row.perSample.resize(testIds.size());
            parallel_for(static_cast<int>(testIds.size()), config.threads, [&](int i) {
                row.perSample[i] = l2_error(recon(testObs[i]), data.fields[testIds[i]], fem);
            });
            for (double e : row.perSample) row.meanError += e;
            row.meanError /= row.perSample.size();
            table.rows.push_back(row);
        };

        {  // TIK: one shared weight for space and time
            auto [best, err] = tune_grid(config.tikGridInv, static_cast<int>(valIds.size()),
                                         config.threads, [&](double c, int i) {
                                             const SpaceTimeField u = tik_inverse(
                                                 valObs[i], c, c, fem, setup.forward);
                                             return l2_error(u, data.fields[valIds[i]], fem);
                                         });
            std::stringstream ps;
            ps << "lg=lt=" << best;
            evaluate("TIK", ps.str(), [&, best](const Observation& z) {
                return tik_inverse(z, best, best, fem, setup.forward);
            });
        }
        {  // TV: temporal weight tied to the spatial one
            std::vector<std::pair<double, double>> cands;
            for (double lg : config.tvGridInv) cands.emplace_back(lg, lg / 4.76);
            auto [best, err] = tune_grid(cands, static_cast<int>(valIds.size()), config.threads,
                                         [&](const std::pair<double, double>& c, int i) {
                                             const TvResult r = tv_inverse(
                                                 valObs[i], c.first, c.second, fem, setup.forward);
                                             return l2_error(r.u, data.fields[valIds[i]], fem);
                                         });
            std::stringstream ps;
            ps << "lg=" << best.first << " lt=" << best.second;
            evaluate("TV", ps.str(), [&, best](const Observation& z) {
                return tv_inverse(z, best.first, best.second, fem, setup.forward).u;
            });
        }
        for (int variant = 0; variant < 2; ++variant) {
            const bool convex = variant == 0;
            const RegularizerModel& base = convex ? convexModel : nonconvexModel;
            const double lamMax = convex ? lamMaxC : lamMaxN;
            std::vector<std::pair<double, double>> cands;
            for (double lam : config.foeLambdaGridInv)
                for (double km : config.foeKappaGrid) cands.emplace_back(lam, km);
            auto solveWith = [&](const std::pair<double, double>& c, const Observation& z) {
                RegularizerModel m = base;
                m.lambda = c.first;
                InverseOptions io;
                io.maxIter = config.inverseMaxIter;
                io.tol = config.inverseTol;
                io.kappa = c.second;
                io.regLambdaMax = lamMax;
                io.fidLipschitz = fidLip;
                return inverse_reconstruct(z, m, setup.forward, fem, io).u;
            };
            auto [best, err] = tune_grid(cands, static_cast<int>(valIds.size()), config.threads,
                                         [&](const std::pair<double, double>& c, int i) {
                                             return l2_error(solveWith(c, valObs[i]),
                                                             data.fields[valIds[i]], fem);
                                         });
            std::stringstream ps;
            ps << "lambda=" << best.first << " kappa=" << best.second;
            evaluate(convex ? "CMFoE" : "MFoE", ps.str(),
                     [&, best](const Observation& z) { return solveWith(best, z); });
        }
    }
    return table;
}

namespace {

// smooth reference field evaluated at surface nodes and grid times
Eigen::MatrixXd smooth_field(const SurfaceMesh1D& surface, const TimeGrid& grid,
                             const Vec2& center, double horizon) {
    Eigen::MatrixXd u(surface.nodeCount(), grid.nodeCount());
    for (int i = 0; i < surface.nodeCount(); ++i) {
        const Vec2 rel = surface.points[i] - center;
        const double th = std::atan2(rel.y(), rel.x());
        const double f = 0.8 * std::sin(th) + 0.3 * std::cos(2.0 * th);
        for (int s = 0; s < grid.nodeCount(); ++s) {
            const double t = grid.node(s);
            const double g =
                0.6 * std::cos(kPi * t / horizon) + 0.4 * std::sin(2.0 * kPi * t / horizon);
            u(i, s) = f * g;
        }
    }
    return u;
}

// continuous kernel sampled on the level's delta grid with fixed physical width
Eigen::VectorXd study_kernel(double delta, int halfWidth, double width) {
    Eigen::VectorXd k(2 * halfWidth + 1);
    for (int j = -halfWidth; j <= halfWidth; ++j) {
        const double t = j * delta;
        k[j + halfWidth] = -t / width * std::exp(-(t * t) / (width * width));
    }
    return k;
}

double tik_energy_discrete(const Eigen::MatrixXd& u, const SurfaceFem& fem, double lg,
                           double lt) {
    double acc = 0.0;
    const int n = fem.nodeCount(), m = fem.grid.nodeCount();
    for (int j = 0; j < n; ++j) {
        const int j1 = (j + 1) % n;
        for (int s = 0; s < m; ++s) {
            const double sx = (u(j1, s) - u(j, s)) / fem.surface.segmentLengths[j];
            acc += 0.5 * lg * lg * sx * sx * fem.surface.segmentLengths[j] * fem.Dlump[s];
            if (s + 1 < m) {
                const double st = (u(j, s + 1) - u(j, s)) / fem.grid.step;
                acc += 0.5 * lt * lt * st * st * fem.Mlump[j] * fem.grid.step;
            }
        }
    }
    return acc;
}

// continuous TIK energy of the smooth field on the exact circle, by dense
// trapezoid (periodic in angle) and Gauss-type quadrature in time
double tik_energy_continuous(double radius, double horizon, double lg, double lt) {
    const int nTh = 4096, nT = 4096;
    double acc = 0.0;
    for (int i = 0; i < nTh; ++i) {
        const double th = 2.0 * kPi * i / nTh;
        const double f = 0.8 * std::sin(th) + 0.3 * std::cos(2.0 * th);
        const double fp = 0.8 * std::cos(th) - 0.6 * std::sin(2.0 * th);
        for (int s = 0; s < nT; ++s) {
            const double t = horizon * (s + 0.5) / nT;
            const double g =
                0.6 * std::cos(kPi * t / horizon) + 0.4 * std::sin(2.0 * kPi * t / horizon);
            const double gp = -0.6 * kPi / horizon * std::sin(kPi * t / horizon) +
                              0.8 * kPi / horizon * std::cos(2.0 * kPi * t / horizon);
            const double dS = radius * (2.0 * kPi / nTh);
            const double dT = horizon / nT;
            const double gradS = fp * g / radius;
            const double gradT = f * gp;
            acc += 0.5 * (lg * lg * gradS * gradS + lt * lt * gradT * gradT) * dS * dT;
        }
    }
    return acc;
}

} // namespace

RefinementReport refinement_study(const MeshConfig& baseMesh, int levels, int baseIntervals,
                                  double horizon) {
    if (levels < 3) throw ParameterOutOfRange("refinement study needs at least 3 levels");
    RefinementReport rep;
    const double lg = 0.7, lt = 0.4;
    rep.tikAnalytic = tik_energy_continuous(baseMesh.heartRadius, horizon, lg, lt);

    Mesh2D mesh = build_torso_mesh(baseMesh);
    const int baseHalfWidth = 2;
    const double kernelWidth = 2.0 * (horizon / baseIntervals);  // fixed physical scale

    for (int level = 0; level < levels; ++level) {
        const SurfaceMesh1D surface = extract_epicardial_curve(mesh);
        TimeGrid grid;
        grid.nIntervals = baseIntervals << level;
        grid.step = horizon / grid.nIntervals;
        SurfaceFem fem(surface, grid);

        RegularizerModel model;
        model.lambda = 1.0;
        model.epsTheta = 0.3;
        model.epsOmega = 1e-3;
        model.convexMode = true;
        ExpertParams e;
        e.mu = 0.5;
        e.eta = 1.5;
        e.kernel = study_kernel(grid.step, baseHalfWidth << level, kernelWidth);
        model.experts = {e};
        validate_model(model);

        SpaceTimeField u;
        u.grid = grid;
        u.values = smooth_field(surface, grid, baseMesh.heartCenter, horizon);

        const FoeContext ctx(model, fem);
        rep.energies.push_back(foe_value_grad(u, model, ctx, 1.0, false).value);
        rep.tikEnergies.push_back(tik_energy_discrete(u.values, fem, lg, lt));
        rep.tikGapsToLimit.push_back(std::abs(rep.tikEnergies.back() - rep.tikAnalytic));

        if (level + 1 < levels) mesh = refine_uniform(mesh);
    }
    for (size_t l = 0; l + 1 < rep.energies.size(); ++l)
        rep.gaps.push_back(std::abs(rep.energies[l] - rep.energies[l + 1]));
    for (size_t l = 0; l + 1 < rep.gaps.size(); ++l)
        rep.orders.push_back(std::log2(rep.gaps[l] / rep.gaps[l + 1]));
    return rep;
}

namespace {

// compact viridis-like palette, linearly interpolated
const int kPaletteSize = 9;
const unsigned char kPalette[kPaletteSize][3] = {
    {68, 1, 84},   {71, 44, 122},  {59, 81, 139},  {44, 113, 142}, {33, 144, 141},
    {39, 173, 129}, {92, 200, 99},  {170, 220, 50}, {253, 231, 37},
};

void color_of(double x, unsigned char* rgb) {
    x = std::clamp(x, 0.0, 1.0) * (kPaletteSize - 1);
    const int i = std::min(static_cast<int>(x), kPaletteSize - 2);
    const double w = x - i;
    for (int c = 0; c < 3; ++c)
        rgb[c] = static_cast<unsigned char>(std::lround((1.0 - w) * kPalette[i][c] +
                                                        w * kPalette[i + 1][c]));
}

} // namespace

void plot_spacetime(const SpaceTimeField& u, const std::string& pathPrefix, int upscale) {
    if (u.values.size() == 0) throw ShapeMismatch("empty field");
    const int nV = static_cast<int>(u.values.rows());
    const int nT = static_cast<int>(u.values.cols());
    const double lo = u.values.minCoeff(), hi = u.values.maxCoeff();
    const double span = (hi - lo > 0.0) ? hi - lo : 1.0;

    const int width = nV * upscale, height = nT * upscale;
    std::ofstream f(pathPrefix + ".ppm", std::ios::binary);
    if (!f) throw IoError("cannot open image for writing: " + pathPrefix + ".ppm");
    f << "P6\n" << width << " " << height << "\n255\n";
    std::vector<unsigned char> row(3 * width);
    for (int py = 0; py < height; ++py) {
        const int s = nT - 1 - py / upscale;  // time increases upward
        for (int px = 0; px < width; ++px) {
            const int j = px / upscale;
            color_of((u.values(j, s) - lo) / span, &row[3 * px]);
        }
        f.write(reinterpret_cast<const char*>(row.data()), row.size());
    }
    if (!f) throw IoError("failed writing image: " + pathPrefix + ".ppm");
    export_field_csv(u, pathPrefix + ".csv");
}

} // namespace ecgi
