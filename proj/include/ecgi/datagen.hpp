#ifndef ECGI_DATAGEN_HPP
#define ECGI_DATAGEN_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "ecgi/femcore.hpp"
#include "ecgi/forward.hpp"
#include "ecgi/geometry.hpp"

namespace ecgi {

struct IonicParams {
    double vRest = -85.0;  // mV
    double vDep = 30.0;
    double vTh = -55.0;
    double gMax = 1.4e-3;
};

struct MembraneParams {
    double cm = 1.0;     // uF/cm^2
    double beta = 100.0; // cm^-1
};

struct StimulusParams {
    double iMax = 1.2;       // uA/cm^2 (tabulated value)
    double gain = 32.0;      // effective nodal amplitude = gain * iMax; see README
    double duration = 100.0; // ms
    Vec2 center{1.0, 0.0};
    double radius = 0.25;
};

struct Scar {
    Vec2 center{0.0, 0.0};
    double radius = 0.25;
    double factor = 0.1;  // multiplies G_m inside the scar
};

struct FiberParams {
    double sigmaIl = 3.0;  // S/m, fixed
    double lambdaLT = 2.5;
    double alpha = 1.0;
    double eps = 0.75;
    double taperRadius = 0.1;  // fraction of the disk radius with isotropic blending
};

struct TensorTriple {
    Eigen::Matrix2d Gi, Ge, Gm;
};

// Anisotropic conductivities from the fiber direction and the scalar rules
// sigma_it = sigma_il/lambda^2 (1+alpha(1-eps))/(1+alpha), sigma_et =
// sigma_it/(alpha(1-eps)), sigma_el = sigma_il/alpha.
TensorTriple conductivity_tensors(double sigmaIl, double lambdaLT, double alpha, double eps,
                                  const Vec2& fiber);

struct HeartModel {
    Mesh2D heartMesh;  // disk triangulation, boundary marked HEART
    std::vector<Vec2> fiberField;                 // per element (zero inside taper core)
    std::vector<Eigen::Matrix2d> Gi, Ge, Gm;      // per element
    IonicParams ionic;
    MembraneParams membrane;
    StimulusParams stimulus;
    std::vector<Scar> scars;
};

Mesh2D build_heart_disk_mesh(double radius, const Vec2& center, int boundarySegments);

struct HeartConfig {
    double radius = 1.0;
    Vec2 center{0.0, 0.0};
    int boundarySegments = 258;  // fine epicardial resolution
    FiberParams fibers;
    IonicParams ionic;
    MembraneParams membrane;
    StimulusParams stimulus;
    std::vector<Scar> scars;
};

HeartModel build_heart_model(const HeartConfig& config);

struct SimulationResult {
    Eigen::MatrixXd transmembrane;  // nodes x (steps+1), every step
    Eigen::MatrixXd extracellular;  // nodes x (floor(steps/nSample)+1)
    double dt = 0.1;
    int sampleEvery = 10;

    int snapshotCount() const { return static_cast<int>(extracellular.cols()); }
    double snapshotTime(int k) const { return k * sampleEvery * dt; }
};

// Semi-implicit monodomain integration (diffusion implicit, reaction and
// stimulus explicit); throws BlowUp when |v| exceeds 1e3 mV.
SimulationResult simulate_monodomain(const HeartModel& model, double dt, int steps,
                                     uint64_t seed = 0);

// Pseudo-bidomain extracellular recovery (K_i + K_e + eta M) v_e = -K_i v per
// snapshot, gauge-fixed to zero mass-weighted mean; fills result.extracellular.
void extracellular_solve(SimulationResult& result, const HeartModel& model, double eta = 1e-9);

struct SampleMeta {
    uint64_t seed = 0;
    double dt = 0.1;
    int nSample = 10;
    double lambdaLT = 2.5;
    double eps = 0.75;
    StimulusParams stimulus;
    std::vector<Scar> scars;
    double scaleMin = 0.0, scaleMax = 1.0;  // affine normalization applied
};

struct DatagenConfig {
    HeartConfig heart;
    double dtLo = 0.07, dtHi = 0.12;
    int nSampleLo = 7, nSampleHi = 13;
    double lambdaLo = 2.16, lambdaHi = 2.84;
    double epsLo = 0.58, epsHi = 0.93;
    double scarProb = 1.0 / 3.0;
    double secondScarProb = 0.5;  // conditional on the first
    double scarFactorLo = 0.05, scarFactorHi = 0.25;
    double scarRadius = 0.25;     // fraction of disk radius
    double stimulusRadius = 0.25; // fraction of disk radius
};

struct Sample {
    SpaceTimeField truth;  // on the coarse epicardial curve, scaled to [0, 1]
    SampleMeta meta;
};

// the random draws of one sample (separable so their statistics are testable
// without running the simulation)
struct SampleParams {
    double dt = 0.1;
    int nSample = 10;
    double lambdaLT = 2.5;
    double eps = 0.75;
    StimulusParams stimulus;
    std::vector<Scar> scars;
};

SampleParams draw_sample_params(uint64_t seed, const DatagenConfig& config);

Sample make_sample(uint64_t seed, const SurfaceMesh1D& coarse, const TimeGrid& grid,
                   const DatagenConfig& config);

SpaceTimeField add_field_noise(const SpaceTimeField& u, double kappa, uint64_t seed);
Observation add_observation_noise(const Observation& z, double snrDb, uint64_t seed);

void save_sample_meta(const SampleMeta& meta, const std::string& path);
SampleMeta load_sample_meta(const std::string& path);

// samples/NNNN.stf + samples/NNNN.meta + split.txt (80/10/10 by seed ranges)
void generate_dataset(const std::string& outDir, int nSamples, const SurfaceMesh1D& coarse,
                      const TimeGrid& grid, const DatagenConfig& config, int threads = 1);

struct DatasetSplit {
    std::vector<int> train, val, test;
};
DatasetSplit dataset_split(int nSamples);
DatasetSplit load_split(const std::string& path);

} // namespace ecgi

#endif
