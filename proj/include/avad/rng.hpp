#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace avad {

/// Counter-based splittable random streams. One 64-bit root seed fans out to
/// independent per-component streams keyed by a tag string plus up to three
/// indices; adding a consumer never perturbs another consumer's stream.
/// All sampling is integer-based so sequences are identical across platforms.
class Rng {
public:
    explicit Rng(std::uint64_t state) : state_(state) {}

    static std::uint64_t derive(std::uint64_t seed, std::string_view tag,
                                std::uint64_t a = 0, std::uint64_t b = 0,
                                std::uint64_t c = 0) {
        std::uint64_t h = 0xcbf29ce484222325ull ^ mix(seed);
        for (char ch : tag) {
            h ^= static_cast<unsigned char>(ch);
            h *= 0x100000001b3ull;
        }
        h = mix(h ^ mix(a + 0x9e3779b97f4a7c15ull));
        h = mix(h ^ mix(b + 0x7f4a7c159e3779b9ull));
        h = mix(h ^ mix(c + 0x2545f4914f6cdd1dull));
        return h;
    }

    static Rng stream(std::uint64_t seed, std::string_view tag,
                      std::uint64_t a = 0, std::uint64_t b = 0,
                      std::uint64_t c = 0) {
        return Rng(derive(seed, tag, a, b, c));
    }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return mix(state_);
    }

    /// Uniform in [0,1) with 53 random mantissa bits.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        // Rejection-free modulo is fine here; n is tiny relative to 2^64.
        return next_u64() % n;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (deterministic, own uniforms).
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(t);
        have_spare_ = true;
        return r * std::cos(t);
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        // splitmix64 finalizer
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t state_;
    bool have_spare_{false};
    double spare_{0.0};
};

}  // namespace avad
