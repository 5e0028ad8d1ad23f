// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <cstdint>
#include <vector>

namespace uniprefill {

/// One drop event: at layer `layer` the active stream shrank to
/// `retained_length` rows. The surviving logical positions are kept so
/// decode can attend over exactly the set a downstream layer saw.
struct DropEvent {
    int layer = 0;
    int64_t retained_length = 0;
    std::vector<int64_t> retained_positions;
};

/// Per-request record of drop events, driving decode-time length corrections.
/// decode_appended counts autoregressive tokens written since prefill.
struct DropHistory {
    std::vector<DropEvent> events;
    int64_t original_length = 0;
    int64_t decode_appended = 0;

    /// Throws ContractViolation when layers are not strictly increasing or
    /// lengths are inconsistent.
    void validate() const;

    /// Last event with event.layer < layer, or nullptr when none precedes.
    const DropEvent* last_event_before(int layer) const;
};

} // namespace uniprefill
