#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace elab {

/// splitmix64 step; also used to mix derived seeds.
inline std::uint64_t splitmix64(std::uint64_t& s) {
    s += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = s;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a_str(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

/// Deterministic fan-out of the global run seed into per-stage streams:
/// derived = splitmix64(global ^ fnv1a(stage)). Documented in the README;
/// every pipeline stage pulls its randomness from one of these.
inline std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stage) {
    std::uint64_t s = global_seed ^ fnv1a_str(stage);
    return splitmix64(s);
}

inline std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stage, std::uint64_t index) {
    std::uint64_t s = global_seed ^ fnv1a_str(stage);
    s = splitmix64(s) ^ (0x9E3779B97F4A7C15ULL * (index + 1));
    return splitmix64(s);
}

/// Self-contained PRNG (splitmix64 + Box-Muller). std:: distributions are
/// implementation-defined, which would break byte-identical reruns across
/// toolchains, so the whole algorithm is pinned here.
class Rng {
   public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return splitmix64(state_); }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    /// Standard normal via Box-Muller (cached spare).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

   private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace elab
