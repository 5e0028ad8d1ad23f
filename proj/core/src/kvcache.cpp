// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#include "uniprefill/kvcache.hpp"

#include "uniprefill/errors.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

namespace uniprefill {

void DropHistory::validate() const {
    if (original_length < 0) throw ContractViolation("DropHistory: negative original_length");
    if (decode_appended < 0) throw ContractViolation("DropHistory: negative decode_appended");
    int prev_layer = -1;
    for (const DropEvent& e : events) {
        if (e.layer <= prev_layer) {
            throw ContractViolation("DropHistory: drop layers must be strictly increasing");
        }
        prev_layer = e.layer;
        if (e.retained_length != static_cast<int64_t>(e.retained_positions.size())) {
            throw ContractViolation("DropHistory: retained_length disagrees with positions");
        }
        if (e.retained_length > original_length) {
            throw ContractViolation("DropHistory: retained_length exceeds original_length");
        }
    }
}

const DropEvent* DropHistory::last_event_before(int layer) const {
    const DropEvent* found = nullptr;
    for (const DropEvent& e : events) {
        if (e.layer < layer) found = &e;
        else break;
    }
    return found;
}

PagedKVCache::PagedKVCache(int num_layers, int row_dim, int kv_block_size, int64_t max_pages)
    : num_layers_(num_layers), row_dim_(row_dim), kv_block_size_(kv_block_size),
      max_pages_(max_pages) {
    if (num_layers <= 0) throw ConfigError("PagedKVCache: num_layers must be positive");
    if (row_dim <= 0) throw ConfigError("PagedKVCache: row_dim must be positive");
    if (kv_block_size <= 0) throw ConfigError("PagedKVCache: kv_block_size must be positive");
}

const std::vector<int64_t>* PagedKVCache::table_for(int layer, RequestId r) const {
    auto it = block_tables_.find(TableKey{layer, r});
    return it == block_tables_.end() ? nullptr : &it->second;
}

int64_t PagedKVCache::allocate_page(int layer) {
    if (next_page_ >= max_pages_) {
        std::ostringstream os;
        os << "PagedKVCache: page arena exhausted (max_pages=" << max_pages_ << ")";
        throw CacheBoundsError(os.str());
    }
    const int64_t page = next_page_++;
    key_arena_.resize(static_cast<size_t>(next_page_) * kv_block_size_ * row_dim_, 0.0f);
    value_arena_.resize(static_cast<size_t>(next_page_) * kv_block_size_ * row_dim_, 0.0f);
    pages_per_layer_[layer] += 1;
    return page;
}

int64_t PagedKVCache::slot_for(int layer, RequestId r, int64_t pos) const {
    if (layer < 0 || layer >= num_layers_) throw CacheBoundsError("slot_for: layer out of range");
    if (pos < 0) throw CacheBoundsError("slot_for: negative position");
    const std::vector<int64_t>* table = table_for(layer, r);
    const int64_t page_index = pos / kv_block_size_;
    if (table == nullptr || page_index >= static_cast<int64_t>(table->size()) ||
        (*table)[page_index] < 0) {
        std::ostringstream os;
        os << "slot_for: page " << page_index << " not allocated for layer " << layer
           << " request " << r;
        throw AllocationMissError(os.str());
    }
    return (*table)[page_index] * kv_block_size_ + pos % kv_block_size_;
}

bool PagedKVCache::page_allocated(int layer, RequestId r, int64_t pos) const {
    const std::vector<int64_t>* table = table_for(layer, r);
    if (table == nullptr) return false;
    const int64_t page_index = pos / kv_block_size_;
    return page_index < static_cast<int64_t>(table->size()) && (*table)[page_index] >= 0;
}

int64_t PagedKVCache::ensure_slot(int layer, RequestId r, int64_t pos) {
    if (layer < 0 || layer >= num_layers_) throw CacheBoundsError("ensure_slot: layer out of range");
    if (pos < 0) throw CacheBoundsError("ensure_slot: negative position");
    std::vector<int64_t>& table = block_tables_[TableKey{layer, r}];
    const int64_t page_index = pos / kv_block_size_;
    if (page_index >= static_cast<int64_t>(table.size())) {
        table.resize(static_cast<size_t>(page_index) + 1, -1);
    }
    if (table[page_index] < 0) table[page_index] = allocate_page(layer);
    return table[page_index] * kv_block_size_ + pos % kv_block_size_;
}

void PagedKVCache::write(int layer, RequestId r, int64_t pos, const float* k, const float* v) {
    const int64_t slot = ensure_slot(layer, r, pos);
    std::memcpy(key_arena_.data() + slot * row_dim_, k, sizeof(float) * row_dim_);
    std::memcpy(value_arena_.data() + slot * row_dim_, v, sizeof(float) * row_dim_);
    written_[TableKey{layer, r}].insert(pos);
}

const float* PagedKVCache::read_key(int layer, RequestId r, int64_t pos) {
    if (!was_written(layer, r, pos)) {
        std::ostringstream os;
        os << "read_key: position " << pos << " never written at layer " << layer
           << " request " << r;
        throw AllocationMissError(os.str());
    }
    const int64_t slot = slot_for(layer, r, pos);
    if (audit_enabled_) read_log_.push_back(ReadRecord{layer, r, pos, slot});
    return key_arena_.data() + slot * row_dim_;
}

const float* PagedKVCache::read_value(int layer, RequestId r, int64_t pos) {
    if (!was_written(layer, r, pos)) {
        std::ostringstream os;
        os << "read_value: position " << pos << " never written at layer " << layer
           << " request " << r;
        throw AllocationMissError(os.str());
    }
    const int64_t slot = slot_for(layer, r, pos);
    return value_arena_.data() + slot * row_dim_;
}

bool PagedKVCache::was_written(int layer, RequestId r, int64_t pos) const {
    auto it = written_.find(TableKey{layer, r});
    return it != written_.end() && it->second.count(pos) > 0;
}

int64_t PagedKVCache::written_count(int layer, RequestId r) const {
    auto it = written_.find(TableKey{layer, r});
    return it == written_.end() ? 0 : static_cast<int64_t>(it->second.size());
}

std::vector<int64_t> PagedKVCache::written_positions(int layer, RequestId r) const {
    auto it = written_.find(TableKey{layer, r});
    if (it == written_.end()) return {};
    return std::vector<int64_t>(it->second.begin(), it->second.end());
}

std::vector<std::vector<int64_t>> PagedKVCache::recompute_slots_after_drop(
    std::span<const int> layers, RequestId r, std::span<const int64_t> retained_positions) {
    std::vector<std::vector<int64_t>> out;
    out.reserve(layers.size());
    for (int layer : layers) {
        std::vector<int64_t> slots;
        slots.reserve(retained_positions.size());
        for (int64_t pos : retained_positions) slots.push_back(ensure_slot(layer, r, pos));
        out.push_back(std::move(slots));
    }
    return out;
}

Matrix& PagedKVCache::linear_state(int layer, RequestId r, int num_heads, int head_dim) {
    auto [it, inserted] = linear_states_.try_emplace(TableKey{layer, r});
    if (inserted) it->second = Matrix(static_cast<int64_t>(num_heads) * head_dim, head_dim);
    return it->second;
}

bool PagedKVCache::has_linear_state(int layer, RequestId r) const {
    return linear_states_.count(TableKey{layer, r}) > 0;
}

CacheStats PagedKVCache::stats() const {
    CacheStats s;
    s.pages_allocated = next_page_;
    s.page_size = kv_block_size_;
    s.pages_per_layer = pages_per_layer_;
    for (const auto& [key, positions] : written_) {
        s.slots_written += static_cast<int64_t>(positions.size());
        s.written_per_layer[key.layer] += static_cast<int64_t>(positions.size());
    }
    return s;
}

int64_t decode_seqused(const DropHistory& history, int layer) {
    const DropEvent* e = history.last_event_before(layer);
    const int64_t base = e ? e->retained_length : history.original_length;
    return base + history.decode_appended;
}

const std::vector<int64_t>* retained_positions_before(const DropHistory& history, int layer) {
    const DropEvent* e = history.last_event_before(layer);
    return e ? &e->retained_positions : nullptr;
}

} // namespace uniprefill
