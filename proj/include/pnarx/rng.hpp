#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace pnarx {

//! Seeded random generator with fixed output streams.
//!
//! Wraps std::mt19937_64 but implements the uniform/normal transforms
//! locally, so identical seeds give identical samples on every platform
//! and standard library (std::normal_distribution makes no such promise).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    //! uniform in [0, 1)
    double uniform() {
        // 53 random mantissa bits
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    //! uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    //! standard normal via Marsaglia polar method
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        have_spare_ = true;
        return u * f;
    }

    std::uint64_t raw() { return engine_(); }

    //! derive an independent stream for a subtask (splitmix64 of seed ^ tag)
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t tag) {
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace pnarx
