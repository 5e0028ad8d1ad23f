// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <cstdint>

namespace uniprefill {

/// splitmix64 finalizer. Zero-allocation, stateless.
uint64_t hash_mix(uint64_t x);

/// Combine two words into one well-mixed word.
uint64_t hash_combine(uint64_t a, uint64_t b);

/// Counter-based generator: value i of stream (seed, stream) is a pure
/// function of (seed, stream, i), so tensors can be materialized in any
/// order and still come out bit-identical for a given seed.
class CounterRng {
public:
    CounterRng(uint64_t seed, uint64_t stream);

    uint64_t bits(uint64_t i) const;

    /// Uniform in (0, 1).
    double uniform(uint64_t i) const;

    /// Box-Muller normal draw with the given stddev. Consumes counters
    /// 2i and 2i+1.
    float normal(uint64_t i, double stddev) const;

private:
    uint64_t key_;
};

} // namespace uniprefill
