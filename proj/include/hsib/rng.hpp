#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace hsib {

// Deterministic 64-bit PRNG (SplitMix64). The state advances by a fixed
// odd constant per draw, so a (seed, counter) pair fully identifies the
// stream position on every platform. Same seed => same sequence.
class RngState {
public:
    explicit RngState(uint64_t seed = 0) : seed_(seed), state_(seed) {}

    uint64_t seed() const { return seed_; }
    uint64_t draws() const { return draws_; }

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        ++draws_;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

    // standard normal via Box-Muller, one spare cached
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // independent child stream (for parallel experiments)
    RngState fork(uint64_t tag) {
        RngState child(next_u64() ^ (tag * 0xD1B54A32D192ED03ull));
        return child;
    }

private:
    uint64_t seed_ = 0;
    uint64_t state_ = 0;
    uint64_t draws_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace hsib
