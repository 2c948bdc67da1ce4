// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

#include "llmctx/lifecycle.hpp"

#include <string>

#include "llmctx/error.hpp"

namespace llmctx::lifecycle {

LctruQueue::SortKey LctruQueue::sort_key(const QueueEntry& e) const {
    return {by_class_ ? -e.bitwidth : 0, e.last_access, e.key};
}

void LctruQueue::upsert(const QueueEntry& entry) {
    erase(entry.key);
    index_.emplace(entry.key, entry);
    order_.insert(sort_key(entry));
}

bool LctruQueue::erase(const ChunkKey& key) {
    auto it = index_.find(key);
    if (it == index_.end()) return false;
    order_.erase(sort_key(it->second));
    index_.erase(it);
    return true;
}

void LctruQueue::erase_context(CtxId ctx) {
    for (auto it = index_.lower_bound(ChunkKey{ctx, 0}); it != index_.end() && it->first.ctx == ctx;) {
        order_.erase(sort_key(it->second));
        it = index_.erase(it);
    }
    locked_.erase(ctx);
}

void LctruQueue::touch(std::span<const ChunkKey> keys, std::uint64_t now) {
    for (const ChunkKey& key : keys) {
        auto it = index_.find(key);
        if (it == index_.end()) continue;
        order_.erase(sort_key(it->second));
        it->second.last_access = now;
        order_.insert(sort_key(it->second));
    }
}

void LctruQueue::set_locked(CtxId ctx, bool locked) {
    if (locked) {
        locked_.insert(ctx);
    } else {
        locked_.erase(ctx);
    }
}

const QueueEntry& LctruQueue::entry(const ChunkKey& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) raise(Errc::not_found, "chunk is not queued");
    return it->second;
}

std::vector<QueueEntry> LctruQueue::order() const {
    std::vector<QueueEntry> out;
    out.reserve(order_.size());
    for (const auto& k : order_) out.push_back(index_.at(std::get<2>(k)));
    return out;
}

std::vector<ChunkKey> LctruQueue::candidates() const {
    std::vector<ChunkKey> out;
    for (const auto& k : order_) {
        const ChunkKey& key = std::get<2>(k);
        if (!is_locked(key.ctx)) out.push_back(key);
    }
    return out;
}

std::size_t LctruQueue::unlocked_bytes() const {
    std::size_t n = 0;
    for (const auto& [key, e] : index_) {
        if (!is_locked(key.ctx)) n += e.bytes;
    }
    return n;
}

std::vector<ChunkKey> LctruQueue::pop_for(std::size_t needed_bytes) {
    std::vector<ChunkKey> out;
    if (needed_bytes == 0) return out;
    std::size_t got = 0;
    for (const auto& k : order_) {
        const ChunkKey& key = std::get<2>(k);
        if (is_locked(key.ctx)) continue;
        out.push_back(key);
        got += index_.at(key).bytes;
        if (got >= needed_bytes) break;
    }
    if (got < needed_bytes) {
        raise(Errc::out_of_memory, "unlocked chunks hold " + std::to_string(got) + " of the " +
                                       std::to_string(needed_bytes) + " bytes needed");
    }
    for (const ChunkKey& key : out) erase(key);
    return out;
}

Manager::Manager(chunkstore::ChunkStore& store, Policy policy)
    : store_(store), policy_(policy), queue_(policy.lctru) {}

void Manager::sync(const chunkstore::ContextState& ctx) {
    queue_.erase_context(ctx.id);
    if (ctx.locked) queue_.set_locked(ctx.id, true);
    for (const auto& c : ctx.chunks) {
        if (c.in_memory()) queue_.upsert({c.key, c.bitwidth, c.last_access, store_.chunk_bytes(c)});
    }
}

chunkstore::ReclaimReport Manager::make_room(std::size_t bytes) {
    const std::size_t free = store_.ledger().free();
    if (bytes <= free) return {};
    std::size_t needed = bytes - free;
    auto victims = queue_.pop_for(needed);
    if (policy_.whole_context || policy_.discard) {
        std::set<CtxId> hit;
        for (const ChunkKey& key : victims) hit.insert(key.ctx);
        victims.clear();
        needed = 0;
        for (CtxId id : hit) {
            const auto& ctx = store_.context(id);
            for (const auto& c : ctx.chunks) {
                if (!c.in_memory()) continue;
                queue_.erase(c.key);
                victims.push_back(c.key);
                needed += store_.ledger().bytes_of(c.key);
            }
        }
    }
    if (policy_.discard) {
        chunkstore::ReclaimReport report;
        std::set<CtxId> hit;
        for (const ChunkKey& key : victims) hit.insert(key.ctx);
        for (CtxId id : hit) {
            report.freed_bytes += store_.discard_kv(store_.context(id));
            queue_.erase_context(id);
        }
        report.evicted = std::move(victims);
        return report;
    }
    try {
        return store_.reclaim(needed, victims);
    } catch (...) {
        // Put the victims back so the queue keeps matching the store.
        for (const ChunkKey& key : victims) {
            auto& ctx = store_.context(key.ctx);
            if (const auto* c = ctx.find(key.index); c != nullptr && c->in_memory()) {
                queue_.upsert({c->key, c->bitwidth, c->last_access, store_.chunk_bytes(*c)});
            }
        }
        throw;
    }
}

void Manager::lock(chunkstore::ContextState& ctx) {
    if (!policy_.lock) return;
    if (ctx.locked) return;
    std::size_t pinned = 0;
    for (CtxId id : store_.context_ids()) {
        const auto& other = store_.context(id);
        if (other.locked && id != ctx.id) pinned += store_.working_set_bytes(other);
    }
    const std::size_t need = store_.working_set_bytes(ctx);
    if (need + pinned > store_.ledger().budget()) {
        raise(Errc::busy, "context " + std::to_string(ctx.id) + " needs " + std::to_string(need) +
                              " bytes but only " + std::to_string(store_.ledger().budget() - pinned) +
                              " can be pinned");
    }
    ctx.locked = true;
    queue_.set_locked(ctx.id, true);
}

void Manager::unlock(chunkstore::ContextState& ctx) {
    ctx.locked = false;
    queue_.set_locked(ctx.id, false);
}

AotReport Manager::aot_swapout(chunkstore::ContextState& ctx) {
    AotReport report;
    if (!policy_.aot) return report;
    for (auto& c : ctx.chunks) {
        if (!c.in_memory() || !c.dirty) continue;
        try {
            report.bytes_written += store_.write_swap(c);
            ++report.files_written;
        } catch (const Error& e) {
            if (e.code() != Errc::io) throw;
            report.failed.push_back(c.key);
            report.degraded = true;
        }
    }
    return report;
}

void Manager::touch(chunkstore::ContextState& ctx, std::uint64_t now) {
    ctx.clock = now;
    std::vector<ChunkKey> keys;
    for (auto& c : ctx.chunks) {
        if (!c.in_memory()) continue;
        c.last_access = now;
        keys.push_back(c.key);
        if (!queue_.contains(c.key)) queue_.upsert({c.key, c.bitwidth, now, store_.chunk_bytes(c)});
    }
    queue_.touch(keys, now);
}

}  // namespace llmctx::lifecycle
