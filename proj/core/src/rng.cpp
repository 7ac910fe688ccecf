#include "evit/rng.hpp"

#include <cmath>
#include <numbers>

#include "evit/error.hpp"

namespace evit {

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw UsageError("Rng::below(0)");
    // Rejection keeps the result unbiased for any n.
    const std::uint64_t limit = std::uint64_t(-1) - std::uint64_t(-1) % n;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % n;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

double Rng::truncated_normal(double mean, double stddev) {
    double z;
    do {
        z = normal();
    } while (z < -2.0 || z > 2.0);
    return mean + stddev * z;
}

}  // namespace evit
