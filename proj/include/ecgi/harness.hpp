#ifndef ECGI_HARNESS_HPP
#define ECGI_HARNESS_HPP

#include <map>
#include <string>
#include <vector>

#include "ecgi/datagen.hpp"
#include "ecgi/femcore.hpp"
#include "ecgi/forward.hpp"
#include "ecgi/geometry.hpp"
#include "ecgi/regularizer.hpp"
#include "ecgi/solver.hpp"

namespace ecgi {

// line-oriented `key = value` configuration
class Config {
public:
    Config() = default;
    static Config fromFile(const std::string& path);
    static Config fromString(const std::string& text);

    bool has(const std::string& key) const { return kv_.count(key) > 0; }
    std::string str(const std::string& key, const std::string& fallback = "") const;
    double num(const std::string& key, double fallback) const;
    int integer(const std::string& key, int fallback) const;
    std::vector<double> list(const std::string& key, const std::vector<double>& fallback) const;

private:
    std::map<std::string, std::string> kv_;
};

struct BenchmarkConfig {
    MeshConfig mesh;
    int nElectrodes = 32;
    double coverage = 0.9;
    int nTimeIntervals = 60;
    double horizon = 100.0;  // ms
    std::string dataDir = "data";
    std::string outDir = "out";
    int nSamples = 200;
    int maxValSamples = 8;   // validation subset used for tuning
    int maxTestSamples = 20;
    std::vector<double> kappaLevels{0.05, 0.1, 0.2};
    std::vector<double> snrLevels{30.0, 40.0, 50.0};
    std::vector<double> tikGrid;      // lambda_gamma = lambda_t grid scale (denoise)
    std::vector<double> tvGrid;
    std::vector<double> foeLambdaGrid;
    std::vector<double> foeKappaGrid;
    std::vector<double> tikGridInv;
    std::vector<double> tvGridInv;
    std::vector<double> foeLambdaGridInv;
    std::string convexModelPath;     // empty: built-in default
    std::string nonconvexModelPath;  // empty: built-in default
    int proxMaxIter = 3000;
    double proxTol = 1e-6;
    int inverseMaxIter = 6000;
    double inverseTol = 1e-6;
    int threads = 1;
    uint64_t seed = 0;
    DatagenConfig datagen;

    static BenchmarkConfig fromConfig(const Config& cfg);
};

struct ResultRow {
    double noiseLevel = 0.0;
    std::string method;
    std::string tunedParams;
    double meanError = 0.0;
    std::vector<double> perSample;
};

struct ResultTable {
    std::vector<ResultRow> rows;
};

void save_table_csv(const ResultTable& table, const std::string& path);
void save_table_text(const ResultTable& table, const std::string& path);
std::string format_table(const ResultTable& table);

// mass-weighted space-time L2 distance: sqrt((u-ref)^T (Mlump x D) (u-ref))
double l2_error(const SpaceTimeField& u, const SpaceTimeField& ref, const SurfaceFem& fem);

// Assembled discretization + forward operator for one benchmark configuration.
struct BenchSetup {
    Mesh2D mesh;
    ElectrodeSet electrodes;
    SurfaceMesh1D surface;
    TimeGrid grid;
    std::unique_ptr<SurfaceFem> fem;
    std::unique_ptr<ForwardSystem> system;
    ForwardMatrix forward;

    static BenchSetup build(const BenchmarkConfig& config);
};

RegularizerModel make_default_model(bool convex, double delta);

struct LoadedDataset {
    std::vector<SpaceTimeField> fields;  // by sample id
    DatasetSplit split;
};
LoadedDataset load_dataset(const std::string& dir);

ResultTable run_denoise_bench(const BenchmarkConfig& config, const BenchSetup& setup,
                              const LoadedDataset& data,
                              const RegularizerModel* trainedNonconvex = nullptr);
ResultTable run_inverse_bench(const BenchmarkConfig& config, const BenchSetup& setup,
                              const LoadedDataset& data,
                              const RegularizerModel* trainedNonconvex = nullptr);

struct RefinementReport {
    std::vector<double> energies;       // per level
    std::vector<double> gaps;           // |E_l - E_{l+1}|
    std::vector<double> orders;         // log2(gap_l / gap_{l+1})
    std::vector<double> tikEnergies;    // discrete TIK energy per level
    double tikAnalytic = 0.0;           // closed-form limit on the circle
    std::vector<double> tikGapsToLimit; // |discrete - analytic|
};

RefinementReport refinement_study(const MeshConfig& baseMesh, int levels, int baseIntervals,
                                  double horizon);

// portable pixmap (P6) with a fixed palette plus a bit-exact CSV mirror
void plot_spacetime(const SpaceTimeField& u, const std::string& pathPrefix, int upscale = 6);

void parallel_for(int n, int threads, const std::function<void(int)>& fn);

} // namespace ecgi

#endif
