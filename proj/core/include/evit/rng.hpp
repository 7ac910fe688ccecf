#pragma once

#include <cstdint>
#include <random>

namespace evit {

// Seeded generator with a platform-independent stream. The raw engine is mt19937_64, whose
// output sequence is fixed by the standard; every conversion to doubles or bounded integers
// below uses our own integer arithmetic instead of the implementation-defined distributions.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() { return engine_(); }
    // Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n);
    double normal();
    // Normal(mean, stddev) resampled until it falls within +-2 standard deviations.
    double truncated_normal(double mean, double stddev);

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace evit
