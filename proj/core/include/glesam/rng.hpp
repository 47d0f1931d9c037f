#pragma once
#include <cmath>
#include <cstdint>
#include <numbers>

namespace glesam {

// Deterministic PRNG (splitmix64 core). Every random draw in the project goes
// through this class so results are reproducible bit-for-bit across runs and
// toolchains — the C++ standard library distributions are not portable.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0,1), 53-bit resolution.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be positive.
    int uniform_int(int n) { return int(next_u64() % uint64_t(n)); }

    // Standard normal via Box-Muller; the second value of each pair is cached,
    // so the draw sequence is still a pure function of the call sequence.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1;
        do { u1 = uniform(); } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    // Poisson draw. Knuth's product method for small rates; for large rates a
    // rounded normal approximation keeps the draw cheap and avoids exp()
    // underflow (exp(-745) is the double limit; image rates can exceed 1e3).
    int poisson(double lambda) {
        if (lambda <= 0.0) return 0;
        if (lambda > 30.0) {
            double v = std::round(normal(lambda, std::sqrt(lambda)));
            return v < 0.0 ? 0 : int(v);
        }
        double l = std::exp(-lambda), p = 1.0;
        int k = 0;
        do {
            ++k;
            p *= uniform();
        } while (p > l);
        return k - 1;
    }

    // Independent stream keyed off the current state and a label. Forking does
    // not advance the parent, so adding a forked consumer never perturbs
    // existing draw sequences.
    Rng fork(uint64_t label) const {
        Rng r(state_ ^ (0xD1B54A32D192ED03ull * (label + 1)));
        r.next_u64();
        return r;
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace glesam
