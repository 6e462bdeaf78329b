#ifndef MRFUSE_RNG_HPP
#define MRFUSE_RNG_HPP

#include <cmath>
#include <cstdint>

#include "mrfuse/common.hpp"

namespace mrfuse {

// Deterministic generator with an explicitly pinned algorithm (splitmix64 +
// Box-Muller) so that runs reproduce bit-exactly regardless of the standard
// library's distribution implementations. State is three words, which keeps
// checkpointing trivial.
class Rng {
public:
    struct State {
        uint64_t x = 0;
        double cached_normal = 0.0;
        uint8_t has_cached_normal = 0;
    };

    explicit Rng(uint64_t seed) { state_.x = seed; }

    // Independent stream derived from (seed, a, b, c). Used for per-sample
    // augmentation streams keyed on (seed, epoch, sample index).
    static Rng stream(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
        uint64_t x = mix(seed);
        x = mix(x ^ mix(a + 0x9e3779b97f4a7c15ULL));
        x = mix(x ^ mix(b + 0xbf58476d1ce4e5b9ULL));
        x = mix(x ^ mix(c + 0x94d049bb133111ebULL));
        return Rng(x);
    }

    uint64_t next_u64() {
        uint64_t z = (state_.x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive bounds.
    int uniform_int(int lo, int hi) {
        require(lo <= hi, "uniform_int: empty range");
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    double normal() {
        if (state_.has_cached_normal) {
            state_.has_cached_normal = 0;
            return state_.cached_normal;
        }
        // u1 in (0,1]: avoids log(0).
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        state_.cached_normal = r * std::sin(theta);
        state_.has_cached_normal = 1;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    State state() const { return state_; }
    void set_state(const State& s) { state_ = s; }

private:
    static uint64_t mix(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    State state_;
};

} // namespace mrfuse

#endif
