#pragma once

#include <cstdint>
#include <cmath>
#include <vector>

namespace mape {

// Deterministic splitmix64 generator. All randomness in the project flows
// through this class so results are reproducible independent of the standard
// library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = next_u64();
        while (v >= limit) {
            v = next_u64();
        }
        return v % n;
    }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 6.283185307179586476925286766559 * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& values) {
        for (std::size_t i = values.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(values[i - 1], values[j]);
        }
    }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Master seed fan-out. Each experiment phase draws its sub-seed from a fixed
// position in the splitmix stream of the master seed, so phases can be varied
// independently without correlating their randomness.
struct SeedBundle {
    std::uint64_t data;
    std::uint64_t init;
    std::uint64_t unlearn;
    std::uint64_t attack;

    static SeedBundle from_master(std::uint64_t master) {
        Rng r(master);
        SeedBundle s{};
        s.data = r.next_u64();
        s.init = r.next_u64();
        s.unlearn = r.next_u64();
        s.attack = r.next_u64();
        return s;
    }
};

}  // namespace mape
