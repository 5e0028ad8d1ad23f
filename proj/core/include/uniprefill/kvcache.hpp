// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <vector>

#include "uniprefill/drop_history.hpp"
#include "uniprefill/tensor.hpp"

namespace uniprefill {

using RequestId = int32_t;

struct CacheStats {
    int64_t pages_allocated = 0;
    int64_t page_size = 0;
    int64_t slots_written = 0;
    std::map<int, int64_t> pages_per_layer;
    std::map<int, int64_t> written_per_layer;
};

/// Paged key/value store with one block table per (layer, request). Pages are
/// drawn from a single physical arena shared by all layers, so two layers
/// never alias a page and slot ids are globally unique. Retained tokens keep
/// their logical positions after a drop; pages left sparse by drops are not
/// reclaimed mid-request.
class PagedKVCache {
public:
    /// row_dim is the per-token K (and V) row width, i.e. num_heads * head_dim.
    /// max_pages bounds the arena; exceeding it raises CacheBoundsError.
    PagedKVCache(int num_layers, int row_dim, int kv_block_size = 16,
                 int64_t max_pages = 1'000'000);

    int num_layers() const { return num_layers_; }
    int row_dim() const { return row_dim_; }
    int kv_block_size() const { return kv_block_size_; }

    /// Physical slot for an already-allocated page:
    ///   block_table[r, pos / B] * B + pos % B.
    /// Throws AllocationMissError when the page was never allocated.
    int64_t slot_for(int layer, RequestId r, int64_t pos) const;

    /// Like slot_for but allocates the page on first touch.
    int64_t ensure_slot(int layer, RequestId r, int64_t pos);

    bool page_allocated(int layer, RequestId r, int64_t pos) const;

    /// Write one token's K/V rows at its logical position (allocates the page
    /// if needed) and log the write.
    void write(int layer, RequestId r, int64_t pos, const float* k, const float* v);

    /// Decode-side reads. Logged when auditing is on; reading a never-written
    /// position throws AllocationMissError.
    const float* read_key(int layer, RequestId r, int64_t pos);
    const float* read_value(int layer, RequestId r, int64_t pos);

    bool was_written(int layer, RequestId r, int64_t pos) const;
    int64_t written_count(int layer, RequestId r) const;
    std::vector<int64_t> written_positions(int layer, RequestId r) const;

    /// Write-slot lists for the given layers covering exactly the retained
    /// logical positions (pages allocated on demand). Retained tokens are not
    /// renumbered.
    std::vector<std::vector<int64_t>> recompute_slots_after_drop(
        std::span<const int> layers, RequestId r, std::span<const int64_t> retained_positions);

    /// Per-request recurrent state for a linear-attention layer, lazily
    /// zero-initialized to (num_heads * head_dim) x head_dim.
    Matrix& linear_state(int layer, RequestId r, int num_heads, int head_dim);
    bool has_linear_state(int layer, RequestId r) const;

    void set_audit_enabled(bool on) { audit_enabled_ = on; }
    bool audit_enabled() const { return audit_enabled_; }

    struct ReadRecord {
        int layer;
        RequestId request;
        int64_t pos;
        int64_t slot;
    };
    const std::vector<ReadRecord>& read_log() const { return read_log_; }
    void clear_read_log() { read_log_.clear(); }

    CacheStats stats() const;

private:
    struct TableKey {
        int layer;
        RequestId request;
        bool operator<(const TableKey& o) const {
            return layer != o.layer ? layer < o.layer : request < o.request;
        }
    };

    int64_t allocate_page(int layer);
    const std::vector<int64_t>* table_for(int layer, RequestId r) const;

    int num_layers_;
    int row_dim_;
    int kv_block_size_;
    int64_t max_pages_;
    int64_t next_page_ = 0;

    std::vector<float> key_arena_;
    std::vector<float> value_arena_;

    std::map<TableKey, std::vector<int64_t>> block_tables_;
    std::map<TableKey, std::set<int64_t>> written_;
    std::map<TableKey, Matrix> linear_states_;
    std::map<int, int64_t> pages_per_layer_;

    bool audit_enabled_ = false;
    std::vector<ReadRecord> read_log_;
};

/// Effective KV length a decode step may attend over at `layer`:
/// the retained length at the last drop event preceding the layer (or the
/// original length when none precedes) plus tokens appended since prefill.
int64_t decode_seqused(const DropHistory& history, int layer);

/// Retained logical positions in force at `layer` during decode, or nullptr
/// when no drop precedes the layer (meaning: all prompt positions).
const std::vector<int64_t>* retained_positions_before(const DropHistory& history, int layer);

} // namespace uniprefill
