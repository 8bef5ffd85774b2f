#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

namespace anomaly_ddpm {

// SplitMix64 step. Fully specified so streams reproduce across platforms and
// standard-library versions (std::normal_distribution is not portable).
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t hash_combine64(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    return splitmix64(s);
}

// Deterministic RNG stream. Streams are derived by hashing a seed with a key
// path, so independent tasks (per image, per timestep, per epoch) can draw
// noise without sharing mutable state across threads.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed ^ 0xd1b54a32d192ed03ULL) {
        // decorrelate small consecutive seeds
        (void)splitmix64(state_);
    }

    static Rng keyed(uint64_t seed, std::initializer_list<uint64_t> path) {
        uint64_t h = seed;
        for (uint64_t k : path) h = hash_combine64(h, k);
        return Rng(h);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        // modulo bias is < 2^-40 for any span used here
        return lo + static_cast<int64_t>(next_u64() % span);
    }

    // standard normal via Box-Muller with cached spare
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    void fill_normal(float* dst, int64_t n) {
        for (int64_t i = 0; i < n; ++i) dst[i] = static_cast<float>(normal());
    }

    void fill_uniform(float* dst, int64_t n, float lo = 0.0f, float hi = 1.0f) {
        for (int64_t i = 0; i < n; ++i) dst[i] = static_cast<float>(uniform(lo, hi));
    }

    // Fisher-Yates
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
            int64_t j = uniform_int(0, i);
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
        }
    }

  private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace anomaly_ddpm
