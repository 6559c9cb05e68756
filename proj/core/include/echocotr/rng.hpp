#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace echocotr {

namespace detail {

// FNV-1a over the name bytes, mixed into the seed. Stable across platforms.
inline uint64_t hash_name(uint64_t seed, std::string_view name) {
    uint64_t h = 14695981039346656037ull ^ seed;
    for (char c : name) {
        h ^= static_cast<uint8_t>(c);
        h *= 1099511628211ull;
    }
    return h;
}

// splitmix64 finalizer, decorrelates nearby seeds.
inline uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace detail

/// One named stream of randomness. Every source of randomness in a run is a
/// sub-stream derived from the single run seed, so runs are reproducible and
/// parallel consumers can each own an independent stream.
class RngStream {
public:
    explicit RngStream(uint64_t seed) : engine_(detail::mix(seed)), seed_(seed) {}

    RngStream(uint64_t seed, std::string_view name)
        : RngStream(detail::mix(detail::hash_name(seed, name))) {}

    /// Derive an independent child stream, e.g. per (epoch, item).
    RngStream substream(std::string_view name) const {
        return RngStream(seed_, name);
    }
    RngStream substream(uint64_t index) const {
        return RngStream(detail::mix(seed_ ^ detail::mix(index + 1)));
    }

    uint64_t next_u64() { return engine_(); }

    double uniform() {
        return std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
    }
    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }
    /// Inclusive integer range.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return std::uniform_int_distribution<int64_t>(lo, hi)(engine_);
    }
    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    /// Normal(0, sigma) clipped by rejection to [-2 sigma, 2 sigma].
    double trunc_normal(double sigma) {
        for (;;) {
            double v = normal(0.0, sigma);
            if (v >= -2.0 * sigma && v <= 2.0 * sigma) return v;
        }
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    uint64_t seed_;
};

}  // namespace echocotr
