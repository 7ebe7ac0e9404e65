#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace matseq {

// xoshiro256** with splitmix64 seeding. Self-contained so that streams are
// bit-reproducible across standard libraries and serializable as four words.
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& word : state_) {
            x += 0x9e3779b97f4a7c15ULL;
            std::uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            word = z ^ (z >> 31);
        }
        has_spare_normal_ = false;
        spare_normal_ = 0.0;
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n) {
        // Rejection sampling on the top bits; bias-free and portable.
        const std::uint64_t threshold = (0 - n) % n;
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_normal_) {
            has_spare_normal_ = false;
            return spare_normal_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_normal_ = r * std::sin(theta);
        has_spare_normal_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Normal truncated to [-2, 2] standard deviations, then scaled.
    double truncated_normal(double stddev) {
        for (;;) {
            const double z = normal();
            if (z >= -2.0 && z <= 2.0) return z * stddev;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        // Fisher-Yates with our own bounded draw so the permutation does not
        // depend on the standard library's distribution internals.
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    std::array<std::uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<std::uint64_t, 4>& s) {
        state_ = s;
        has_spare_normal_ = false;
    }

    // Derives an independent stream; used for per-sample generation workers.
    Rng fork(std::uint64_t salt) {
        Rng child;
        child.state_ = state_;
        child.state_[0] ^= 0x9e3779b97f4a7c15ULL * (salt + 1);
        child.state_[2] += 0xbf58476d1ce4e5b9ULL ^ salt;
        child.next_u64();
        child.next_u64();
        return child;
    }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<std::uint64_t, 4> state_{};
    bool has_spare_normal_ = false;
    double spare_normal_ = 0.0;
};

// FNV-1a, used for content fingerprints and vocabulary hashes.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64(s.data(), s.size(), h);
}

}  // namespace matseq
