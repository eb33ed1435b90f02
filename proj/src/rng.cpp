#include "kd/rng.hpp"

#include <cmath>
#include <numbers>

namespace kd {

double CounterRng::normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t derive_seed(std::uint64_t parent, std::initializer_list<std::uint64_t> tags) noexcept {
    std::uint64_t h = CounterRng::mix(parent ^ 0x6a09e667f3bcc909ULL);
    for (auto t : tags) h = CounterRng::mix(h ^ CounterRng::mix(t + 0x9e3779b97f4a7c15ULL));
    return h;
}

}  // namespace kd
