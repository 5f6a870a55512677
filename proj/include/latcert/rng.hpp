#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace latcert {

// splitmix64, used to derive independent stream seeds from a user seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// A named random stream. Streams derived from the same seed but different
// names are independent, so e.g. policy sampling can be swapped without
// perturbing dynamics noise.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::string_view name)
        : gen_(splitmix64(seed ^ fnv1a(name))) {}

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(gen_); }
    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(gen_);
    }
    double normal() { return std::normal_distribution<double>(0.0, 1.0)(gen_); }
    // Logistic(0,1) sample.
    double logistic() {
        double u = std::uniform_real_distribution<double>(1e-12, 1.0 - 1e-12)(gen_);
        return std::log(u) - std::log1p(-u);
    }
    // Gumbel(0,1) sample: -log(-log u).
    double gumbel() {
        double u = std::uniform_real_distribution<double>(1e-12, 1.0 - 1e-12)(gen_);
        return -std::log(-std::log(u));
    }
    std::size_t index(std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(gen_);
    }
    // Sample an index from an (unnormalized is not allowed) probability vector.
    template <typename Vec>
    std::size_t categorical(const Vec& probs) {
        double u = uniform();
        double acc = 0.0;
        for (std::size_t i = 0; i + 1 < probs.size(); ++i) {
            acc += probs[i];
            if (u < acc) return i;
        }
        return probs.size() - 1;
    }

    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
};

}  // namespace latcert
