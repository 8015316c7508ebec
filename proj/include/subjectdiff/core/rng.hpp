#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <sstream>
#include <string>

namespace sdg {

// splitmix64, used for seed derivation and key hashing.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    return splitmix64(a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

// FNV-1a over raw bytes. Used for content hashes of weights and files.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; i++) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Deterministic RNG with portable distributions. mt19937_64 has a
// standard-specified sequence; the distribution transforms below avoid the
// implementation-defined std::*_distribution classes so streams replay
// identically everywhere.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t u64() { return eng_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int uniform_int(int n) { return static_cast<int>(eng_() % static_cast<uint64_t>(n)); }

    // Box-Muller without caching so call order is replayable.
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    template <typename T>
    void fill_normal(std::span<T> out, T mean = T(0), T stddev = T(1)) {
        for (auto& x : out) x = mean + stddev * static_cast<T>(normal());
    }

    template <typename T>
    void fill_uniform(std::span<T> out, T lo, T hi) {
        for (auto& x : out) x = static_cast<T>(uniform(double(lo), double(hi)));
    }

    // Fisher-Yates
    template <typename V>
    void shuffle(V& v) {
        for (size_t i = v.size(); i > 1; i--) {
            size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::string state() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
    }

private:
    std::mt19937_64 eng_;
};

// Derives an independent stream from a root seed and a key path, e.g.
// derive_rng(seed, {kStreamRender, identity_id, render_idx}).
inline Rng derive_rng(uint64_t root, std::initializer_list<uint64_t> path) {
    uint64_t h = splitmix64(root);
    for (uint64_t k : path) h = hash_combine(h, k);
    return Rng(h);
}

}  // namespace sdg
