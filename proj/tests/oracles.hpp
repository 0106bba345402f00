#ifndef ECGI_TEST_ORACLES_HPP
#define ECGI_TEST_ORACLES_HPP

// Independent reference computations used by the test suites. Everything here
// deliberately avoids the library's assembly/evaluation paths.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <vector>

namespace oracles {

// n-point Gauss-Legendre on [a, b]
inline double gauss(const std::function<double(double)>& f, double a, double b, int n) {
    static const double x5[] = {-0.9061798459386640, -0.5384693101056831, 0.0,
                                0.5384693101056831, 0.9061798459386640};
    static const double w5[] = {0.2369268850561891, 0.4786286704993665, 0.5688888888888889,
                                0.4786286704993665, 0.2369268850561891};
    (void)n;
    const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
    double acc = 0.0;
    for (int i = 0; i < 5; ++i) acc += w5[i] * f(mid + half * x5[i]);
    return half * acc;
}

// composite Gauss over [a, b] with m panels
inline double gauss_composite(const std::function<double(double)>& f, double a, double b, int m) {
    double acc = 0.0;
    for (int k = 0; k < m; ++k)
        acc += gauss(f, a + (b - a) * k / m, a + (b - a) * (k + 1) / m, 5);
    return acc;
}

// time-grid hat rho_j on [0, T], zero outside
inline double hat_on_grid(int j, double t, double delta, int nIntervals) {
    if (t < 0.0 || t > nIntervals * delta) return 0.0;
    return std::max(0.0, 1.0 - std::abs(t - j * delta) / delta);
}

// kernel hat at node m (units of delta), truncated to [-Nw*delta, Nw*delta]
inline double kernel_hat(int m, double tau, double delta, int halfWidth) {
    if (tau < -halfWidth * delta || tau > halfWidth * delta) return 0.0;
    return std::max(0.0, 1.0 - std::abs(tau - m * delta) / delta);
}

// int rho_i rho_j over [0, T] by composite Gauss per interval
inline double temporal_mass_entry(int i, int j, double delta, int nIntervals) {
    double acc = 0.0;
    for (int k = 0; k < nIntervals; ++k) {
        acc += gauss(
            [&](double t) {
                return hat_on_grid(i, t, delta, nIntervals) * hat_on_grid(j, t, delta, nIntervals);
            },
            k * delta, (k + 1) * delta, 5);
    }
    return acc;
}

// int over the kernel support of rho^K_{i-Nw}(tau) rho_j(t_s + tau), the
// signal hat zero-extended outside [0, T]
inline double cross_corr_entry(int i, int j, int s, double delta, int nIntervals, int halfWidth) {
    double acc = 0.0;
    for (int k = -halfWidth; k < halfWidth; ++k) {
        acc += gauss(
            [&](double tau) {
                return kernel_hat(i - halfWidth, tau, delta, halfWidth) *
                       hat_on_grid(j, s * delta + tau, delta, nIntervals);
            },
            k * delta, (k + 1) * delta, 5);
    }
    return acc;
}

// central finite difference of a scalar functional along direction v
inline double central_fd(const std::function<double(const Eigen::MatrixXd&)>& f,
                         const Eigen::MatrixXd& u, const Eigen::MatrixXd& v, double h) {
    return (f(u + h * v) - f(u - h * v)) / (2.0 * h);
}

inline double central_fd_vec(const std::function<double(const Eigen::VectorXd&)>& f,
                             const Eigen::VectorXd& u, const Eigen::VectorXd& v, double h) {
    return (f(u + h * v) - f(u - h * v)) / (2.0 * h);
}

// projection onto the unit l1 ball by bisection on the threshold; independent
// of the sort-based implementation
inline Eigen::Vector4d project_l1_bisect(const Eigen::Vector4d& y) {
    const Eigen::Vector4d a = y.cwiseAbs();
    if (a.sum() <= 1.0) return y;
    double lo = 0.0, hi = a.maxCoeff();
    for (int it = 0; it < 200; ++it) {
        const double tau = 0.5 * (lo + hi);
        const double s = (a.array() - tau).max(0.0).sum();
        if (s > 1.0)
            lo = tau;
        else
            hi = tau;
    }
    const double tau = 0.5 * (lo + hi);
    Eigen::Vector4d out;
    for (int i = 0; i < 4; ++i) {
        const double m = std::max(a[i] - tau, 0.0);
        out[i] = (y[i] >= 0.0) ? m : -m;
    }
    return out;
}

} // namespace oracles

#endif
