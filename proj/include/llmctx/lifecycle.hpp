// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

// Chunk lifecycle: the LCTRU eviction queue (least compression-tolerable,
// then least recently used), ahead-of-time swap-out and working-set locks.

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <tuple>
#include <vector>

#include "llmctx/chunkstore.hpp"

namespace llmctx::lifecycle {

using chunkstore::ChunkKey;
using chunkstore::CtxId;

struct QueueEntry {
    ChunkKey key;
    int bitwidth = 8;  // higher bitwidth = heavier class, evicted first
    std::uint64_t last_access = 0;
    std::size_t bytes = 0;
};

/// Eviction queue over in-memory chunks. Pop order is (bitwidth descending,
/// last_access ascending, key ascending). With `by_class` false the class is
/// ignored and the queue degenerates to plain LRU.
class LctruQueue {
public:
    explicit LctruQueue(bool by_class = true) : by_class_(by_class) {}

    void upsert(const QueueEntry& entry);
    bool erase(const ChunkKey& key);
    void erase_context(CtxId ctx);
    /// Moves the chunks to the tail of their class with last_access = now.
    /// Unknown keys are ignored.
    void touch(std::span<const ChunkKey> keys, std::uint64_t now);
    void set_locked(CtxId ctx, bool locked);
    bool is_locked(CtxId ctx) const { return locked_.count(ctx) != 0; }

    bool contains(const ChunkKey& key) const { return index_.count(key) != 0; }
    std::size_t size() const noexcept { return index_.size(); }
    const QueueEntry& entry(const ChunkKey& key) const;

    /// Every entry in pop order, locked ones included.
    std::vector<QueueEntry> order() const;
    /// Unlocked entries in pop order.
    std::vector<ChunkKey> candidates() const;
    std::size_t unlocked_bytes() const;

    /// Removes and returns the shortest unlocked prefix whose bytes reach
    /// `needed_bytes`. Throws Errc::out_of_memory (queue unchanged) otherwise.
    std::vector<ChunkKey> pop_for(std::size_t needed_bytes);

private:
    using SortKey = std::tuple<int, std::uint64_t, ChunkKey>;  // (-class, time, key)
    SortKey sort_key(const QueueEntry& e) const;

    bool by_class_;
    std::set<SortKey> order_;
    std::map<ChunkKey, QueueEntry> index_;
    std::set<CtxId> locked_;
};

struct Policy {
    bool lctru = true;  // class-aware order; false = plain LRU
    bool aot = true;    // swap dirty chunks out when a call returns
    bool lock = true;   // pin the running context's chunks
    bool whole_context = false;  // victims take their whole context with them
    bool discard = false;        // victims are dropped instead of written
};

struct AotReport {
    std::size_t files_written = 0;
    std::size_t bytes_written = 0;
    std::vector<ChunkKey> failed;
    bool degraded = false;
};

/// Glue between the queue and the chunk store.
class Manager {
public:
    Manager(chunkstore::ChunkStore& store, Policy policy = {});

    const Policy& policy() const noexcept { return policy_; }
    LctruQueue& queue() noexcept { return queue_; }
    const LctruQueue& queue() const noexcept { return queue_; }

    /// Global logical clock: one tick per call.
    std::uint64_t tick() noexcept { return ++clock_; }
    std::uint64_t now() const noexcept { return clock_; }

    /// Re-reads a context's chunks: in-memory ones are queued, the rest dropped.
    void sync(const chunkstore::ContextState& ctx);
    void forget(CtxId ctx) { queue_.erase_context(ctx); }

    /// Frees space until `bytes` are available, evicting in queue order.
    chunkstore::ReclaimReport make_room(std::size_t bytes);

    /// Throws Errc::busy when the context cannot fit next to the other
    /// locked contexts. A no-op when the policy disables locking.
    void lock(chunkstore::ContextState& ctx);
    /// Idempotent.
    void unlock(chunkstore::ContextState& ctx);

    AotReport aot_swapout(chunkstore::ContextState& ctx);
    void touch(chunkstore::ContextState& ctx, std::uint64_t now);

private:
    chunkstore::ChunkStore& store_;
    Policy policy_;
    LctruQueue queue_;
    std::uint64_t clock_ = 0;
};

}  // namespace llmctx::lifecycle
