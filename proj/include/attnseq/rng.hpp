#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace attnseq {

// Deterministic RNG with fully specified output transforms. std::mt19937_64 is
// bit-exact across platforms, but the <random> distributions are not, so the
// uniform/normal transforms are spelled out here. All randomness in the library
// (init, data, dropout) flows through this type.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0,1) with 53 bits of mantissa.
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; one value per call, the pair's second half is discarded to
    // keep the stream position independent of call parity.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double two_pi = 6.283185307179586476925286766559;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Rejection sampling over the top multiple of n.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = eng_();
        while (v >= limit) v = eng_();
        return v % n;
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::swap(items[i - 1], items[static_cast<std::size_t>(below(i))]);
        }
    }

private:
    std::mt19937_64 eng_;
};

// FNV-1a over the name, mixed with a base seed. Named sub-streams (data, init,
// dropout, ...) stay independently reproducible under one top-level seed.
inline std::uint64_t sub_seed(std::uint64_t base, std::string_view name) {
    std::uint64_t h = 1469598103934665603ULL;
    for (char c : name) {
        h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
        h *= 1099511628211ULL;
    }
    return h ^ (base * 0x9e3779b97f4a7c15ULL + 0x517cc1b727220a95ULL);
}

}  // namespace attnseq
