// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include "uniprefill/rng.hpp"

#include <cmath>

namespace uniprefill {

uint64_t hash_mix(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

uint64_t hash_combine(uint64_t a, uint64_t b) {
    return hash_mix(a ^ (0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2) + hash_mix(b)));
}

CounterRng::CounterRng(uint64_t seed, uint64_t stream)
    : key_(hash_combine(seed, stream)) {}

uint64_t CounterRng::bits(uint64_t i) const {
    return hash_mix(key_ ^ (i * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL));
}

double CounterRng::uniform(uint64_t i) const {
    // 53 mantissa bits, then shift away from exact zero.
    const double u = static_cast<double>(bits(i) >> 11) * 0x1.0p-53;
    return u > 0.0 ? u : 0x1.0p-53;
}

float CounterRng::normal(uint64_t i, double stddev) const {
    const double u1 = uniform(2 * i);
    const double u2 = uniform(2 * i + 1);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double z = r * std::cos(2.0 * 3.14159265358979323846 * u2);
    return static_cast<float>(z * stddev);
}

} // namespace uniprefill
