#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace dmatch {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Deterministic RNG. mt19937_64 output is pinned by the standard, and all
// derived draws (uniform, normal, shuffle) are implemented here rather than
// through std distributions, whose sequences are implementation-defined.
class RandomEngine {
public:
    explicit RandomEngine(std::uint64_t seed, std::uint64_t stream = 0)
        : gen_(splitmix64(splitmix64(seed) ^ splitmix64(~stream))) {}

    std::uint64_t bits() { return gen_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // (0, 1]
    double uniform_pos() { return static_cast<double>((gen_() >> 11) + 1) * 0x1.0p-53; }

    double normal(double mean = 0.0, double stddev = 1.0) {
        // Box-Muller, cosine branch only; keeps state = engine state alone.
        const double u1 = uniform_pos();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Unbiased integer in [0, n), n >= 1.
    std::uint64_t uniform_int(std::uint64_t n) {
        std::uint64_t x, r;
        do {
            x = gen_();
            r = x % n;
        } while (x - r > std::uint64_t(-1) - n + 1);
        return r;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[uniform_int(i)]);
        }
    }

    // k distinct indices from [0, n) when k <= n, otherwise k draws with
    // replacement (small-pool fallback used by the KDE bank sampler).
    std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k) {
        std::vector<std::size_t> out;
        out.reserve(k);
        if (k <= n) {
            std::vector<std::size_t> idx(n);
            for (std::size_t i = 0; i < n; ++i) idx[i] = i;
            for (std::size_t i = 0; i < k; ++i) {
                std::swap(idx[i], idx[i + uniform_int(n - i)]);
                out.push_back(idx[i]);
            }
        } else {
            for (std::size_t i = 0; i < k; ++i) out.push_back(uniform_int(n));
        }
        return out;
    }

    std::string state() const {
        std::ostringstream os;
        os << gen_;
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> gen_;
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace dmatch
