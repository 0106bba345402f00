#ifndef ECGI_TEST_HELPERS_HPP
#define ECGI_TEST_HELPERS_HPP

#include <cmath>
#include <numbers>

#include "ecgi/femcore.hpp"
#include "ecgi/geometry.hpp"
#include "ecgi/regularizer.hpp"
#include "ecgi/rng.hpp"

namespace helpers {

// synthetic closed polyline on a circle, independent of the mesh generator
inline ecgi::SurfaceMesh1D circle_surface(int n, double radius) {
    ecgi::SurfaceMesh1D s;
    const double twoPi = 2.0 * std::numbers::pi;
    s.vertexIds.resize(n);
    s.points.resize(n);
    for (int k = 0; k < n; ++k) {
        s.vertexIds[k] = k;
        const double th = twoPi * k / n;
        s.points[k] = ecgi::Vec2(radius * std::cos(th), radius * std::sin(th));
    }
    s.segmentLengths.resize(n);
    s.tangents.resize(n);
    s.normals.resize(n);
    for (int k = 0; k < n; ++k) {
        const ecgi::Vec2 d = s.points[(k + 1) % n] - s.points[k];
        s.segmentLengths[k] = d.norm();
        s.tangents[k] = d / d.norm();
        s.normals[k] = ecgi::Vec2(s.tangents[k].y(), -s.tangents[k].x());
    }
    return s;
}

inline Eigen::MatrixXd random_matrix(int rows, int cols, uint64_t seed) {
    ecgi::Rng rng(seed);
    Eigen::MatrixXd m(rows, cols);
    for (int j = 0; j < cols; ++j)
        for (int i = 0; i < rows; ++i) m(i, j) = rng.normal();
    return m;
}

inline Eigen::Vector4d random_vec4(ecgi::Rng& rng, double scale = 1.0) {
    Eigen::Vector4d y;
    for (int i = 0; i < 4; ++i) y[i] = scale * rng.normal();
    return y;
}

// random expert satisfying ||Q||_inf <= 1 and eta > ||Q||_2^2; eta is drawn
// above max(||Q||_2^2, ||Q||_2), where the nonnegativity of phi actually holds
// for the envelope variant with the quadratic stabilizer (at ||Q||_2 = 1 the
// two thresholds coincide)
inline ecgi::ExpertParams random_constrained_expert(ecgi::Rng& rng) {
    ecgi::ExpertParams e;
    ecgi::Mat4 Q;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) Q(i, j) = rng.normal();
    const double rowSum = Q.cwiseAbs().rowwise().sum().maxCoeff();
    Q /= rowSum * rng.uniform(1.0, 2.0);
    e.Q = Q;
    const double q2 = Q.jacobiSvd().singularValues().maxCoeff();
    e.eta = std::max(q2 * q2, q2) * rng.uniform(1.02, 1.6);
    e.mu = rng.uniform(0.2, 2.0);
    e.kernel = (Eigen::VectorXd(5) << 0.0, -1.0, 2.0, -1.0, 0.0).finished();
    return e;
}

} // namespace helpers

#endif
