// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <stdexcept>
#include <string>

namespace uniprefill {

/// Invalid ModelConfig / ScoreConfig / engine options. The message names the
/// violated invariant.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A caller broke an operation precondition (mismatched shapes, NaN scores,
/// fully masked softmax row, missing TP shard, ...).
class ContractViolation : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Logical position maps outside the cache's allocated capacity.
class CacheBoundsError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Slot lookup for a page that was never allocated.
class AllocationMissError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A runtime self-check failed (write-log audit, seqused mismatch, FLOPs
/// cross-check). Surfaced as a nonzero exit code by the CLI.
class AuditError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace uniprefill
