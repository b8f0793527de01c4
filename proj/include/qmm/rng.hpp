#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>

namespace qmm {

// splitmix64 finalizer, used to derive independent substream seeds.
inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t substream_seed(uint64_t seed, uint64_t stream) {
    return mix64(seed ^ mix64(stream + 0x632be59bd9b4e019ull));
}

// mt19937_64 is bit-exact by the standard; the value transforms are written
// out here so sequences do not depend on libstdc++ distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    uint64_t below(uint64_t n) {
        return static_cast<uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // inclusive range
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(below(static_cast<uint64_t>(hi - lo) + 1));
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        constexpr double two_pi = 6.283185307179586476925286766559;
        double u1 = 1.0 - uniform(); // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    // Fisher-Yates
    template <typename It>
    void shuffle(It first, It last) {
        auto n = static_cast<uint64_t>(last - first);
        for (uint64_t i = n; i > 1; --i) {
            uint64_t j = below(i);
            std::swap(first[i - 1], first[j]);
        }
    }

private:
    std::mt19937_64 eng_;
};

} // namespace qmm
