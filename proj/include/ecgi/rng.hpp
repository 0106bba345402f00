#ifndef ECGI_RNG_HPP
#define ECGI_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>

namespace ecgi {

// Deterministic random source. Uniform and normal draws are implemented
// directly on top of the mt19937_64 bit stream so that sequences are
// bit-identical across standard libraries and platforms.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t bits() { return gen_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    // integer in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(gen_() % span);
    }

    // standard normal via Box-Muller, one cached value
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

private:
    std::mt19937_64 gen_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

} // namespace ecgi

#endif
