#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace acdm {

/// Deterministic random stream. Wraps mt19937_64 but generates normals via
/// Box-Muller on raw uniforms, since std::normal_distribution output is
/// implementation-defined and would break bit-reproducibility across stdlibs.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    /// Uniform in [0, 1).
    double uniform() {
        return (gen_() >> 11) * (1.0 / 9007199254740992.0);  // 53-bit mantissa
    }

    /// Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(uniform() * static_cast<double>(hi - lo + 1));
    }

    /// Standard normal sample.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double mag = std::sqrt(-2.0 * std::log(u1));
        spare_ = mag * std::sin(2.0 * M_PI * u2);
        have_spare_ = true;
        return mag * std::cos(2.0 * M_PI * u2);
    }

    template <class Real>
    void fill_normal(Real* dst, size_t n, Real scale = Real(1)) {
        for (size_t i = 0; i < n; ++i) dst[i] = static_cast<Real>(normal()) * scale;
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace acdm
