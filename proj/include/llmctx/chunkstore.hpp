// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

// Chunk-wise context memory: fixed-span KV chunks with residency state, the
// memory ledger, and the Claim / Reclaim / Load / Fault primitives.
//
// Chunk i of a context always covers global positions [i*T, (i+1)*T), where T
// is the chunk size; the sliding window drops whole chunks from the front, so
// a context's first position is always a multiple of T.

#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <vector>

#include "llmctx/quant.hpp"
#include "llmctx/swapfile.hpp"
#include "llmctx/tinylm.hpp"
#include "llmctx/tolerance.hpp"

namespace llmctx::chunkstore {

using CtxId = std::uint64_t;
using tinylm::TokenId;

struct ChunkKey {
    CtxId ctx = 0;
    std::uint32_t index = 0;

    friend auto operator<=>(const ChunkKey&, const ChunkKey&) = default;
};

enum class Residency { InMemory, OnDisk, Both };

struct KvChunk {
    ChunkKey key;
    std::size_t token_start = 0;
    std::size_t token_count = 0;
    std::optional<quant::QuantizedChunkPayload> payload;  // set iff in memory
    int bitwidth = 8;
    double density = 0.0;
    Residency residency = Residency::InMemory;
    bool dirty = false;
    std::uint64_t last_access = 0;

    bool in_memory() const noexcept { return residency != Residency::OnDisk; }
    bool on_disk() const noexcept { return residency != Residency::InMemory; }
    std::size_t token_end() const noexcept { return token_start + token_count; }
};

/// Byte accounting for in-memory chunk payloads. Per-channel metadata is
/// tracked but not charged against the budget.
class MemoryLedger {
public:
    explicit MemoryLedger(std::size_t budget_bytes = 0) : budget_(budget_bytes) {}

    /// Throws Errc::out_of_memory (ledger unchanged) when `bytes` exceed the
    /// free space, and Errc::consistency when the key is already held.
    void claim(const ChunkKey& key, std::size_t bytes, std::size_t metadata_bytes = 0);
    /// Returns the released byte count (0 if the key was not held).
    std::size_t release(const ChunkKey& key);

    std::size_t budget() const;
    std::size_t used() const;
    std::size_t free() const;
    std::size_t metadata_bytes() const;
    bool holds(const ChunkKey& key) const;
    std::size_t bytes_of(const ChunkKey& key) const;
    std::size_t entries() const;

private:
    struct Entry {
        std::size_t bytes = 0;
        std::size_t metadata = 0;
    };
    mutable std::mutex mutex_;
    std::size_t budget_ = 0;
    std::size_t used_ = 0;
    std::size_t metadata_ = 0;
    std::map<ChunkKey, Entry> entries_;
};

struct ContextState {
    CtxId id = 0;
    std::vector<TokenId> tokens;  // memory-resident text; tokens[0] is at first_position
    std::size_t first_position = 0;
    std::vector<KvChunk> chunks;  // chunks[k].key.index == first_position / T + k
    bool locked = false;
    std::size_t max_window = 0;
    std::uint64_t clock = 0;
    tolerance::DensityLedger density;

    std::size_t end_position() const noexcept { return first_position + tokens.size(); }
    /// Positions covered by KV chunks (prompt text may run ahead of this).
    std::size_t kv_length() const noexcept;
    KvChunk* find(std::uint32_t index);
    const KvChunk* find(std::uint32_t index) const;
};

struct StoreOptions {
    std::size_t budget_bytes = 64u << 20;
    std::size_t chunk_tokens = 16;
    int base_bitwidth = 8;  // kRawBitwidth disables quantization
    std::filesystem::path swap_dir = "llmctx-swap";
    std::size_t max_window = 4096;
};

struct ReclaimReport {
    std::vector<ChunkKey> evicted;
    std::size_t freed_bytes = 0;
    std::size_t write_bytes = 0;  // swap-file bytes written for dirty victims
};

/// Which missing chunks of a context are read from disk and which are rebuilt.
struct LoadAssignment {
    std::vector<std::uint32_t> io;
    std::vector<std::uint32_t> recompute;

    bool empty() const noexcept { return io.empty() && recompute.empty(); }
};

struct LoadReport {
    std::size_t payload_bytes_read = 0;  // packed payload bytes of chunks read from disk
    std::size_t file_bytes_read = 0;     // everything read, headers and metadata included
    std::size_t chunks_read = 0;
    std::size_t chunks_recomputed = 0;
    std::vector<std::uint32_t> fallbacks;  // I/O chunks rebuilt after a read failure
    bool degraded = false;
    double wall_seconds = 0.0;
};

struct StoreStats {
    std::size_t faults = 0;
    std::size_t files_written = 0;
    std::size_t bytes_written = 0;
    std::size_t payload_bytes_read = 0;
    std::size_t chunks_recomputed = 0;
};

class ChunkStore;

/// One load of a context's missing chunks, split into an I/O lane
/// (read_layer) and a compute lane (recompute_layer). The lanes may run on two
/// threads as long as recompute_layer(l) starts after read_layer(l) returned.
class LoadSession {
public:
    LoadSession(ChunkStore& store, ContextState& ctx, LoadAssignment assignment);
    ~LoadSession();
    LoadSession(const LoadSession&) = delete;
    LoadSession& operator=(const LoadSession&) = delete;

    std::size_t layers() const noexcept;
    const LoadAssignment& assignment() const noexcept { return assignment_; }

    /// Reads layer `layer` of every I/O chunk into the working cache and
    /// returns the payload bytes read. File errors mark the chunk failed.
    std::size_t read_layer(std::size_t layer);
    /// Rebuilds layer `layer` of every recompute chunk.
    void recompute_layer(std::size_t layer);
    /// Recovers failed reads by recompute, re-quantizes rebuilt chunks at
    /// their bitwidth and installs everything in memory.
    LoadReport finish();

private:
    struct IoChunk;

    ChunkStore& store_;
    ContextState& ctx_;
    LoadAssignment assignment_;
    tinylm::KvTensor work_;
    std::vector<std::unique_ptr<IoChunk>> io_;
    std::unique_ptr<tinylm::RowRecomputer> recomputer_;
    LoadReport report_;
    bool finished_ = false;
    bool partial_ = false;  // some missing chunks stay on disk
};

class ChunkStore {
public:
    ChunkStore(const tinylm::Model& model, StoreOptions options);

    const StoreOptions& options() const noexcept { return options_; }
    const tinylm::Model& model() const noexcept { return *model_; }
    MemoryLedger& ledger() noexcept { return ledger_; }
    const MemoryLedger& ledger() const noexcept { return ledger_; }
    StoreStats& stats() noexcept { return stats_; }
    const StoreStats& stats() const noexcept { return stats_; }

    ContextState& create_context(CtxId id);
    bool has_context(CtxId id) const;
    ContextState& context(CtxId id);
    const ContextState& context(CtxId id) const;
    std::vector<CtxId> context_ids() const;
    /// Frees memory, deletes swap files and forgets the context.
    void delete_context(CtxId id);

    quant::ChunkShape shape_for(std::size_t tokens) const;
    std::size_t chunk_bytes(const KvChunk& chunk) const;
    std::filesystem::path swap_path(const ChunkKey& key) const;

    /// Installs `payload` as the in-memory copy of `chunk` and charges the
    /// ledger. Throws Errc::out_of_memory when it does not fit.
    void claim(KvChunk& chunk, quant::QuantizedChunkPayload payload);
    /// Evicts the shortest prefix of `order` (skipping locked or non-resident
    /// chunks) that frees at least `needed_bytes`. Dirty victims are written
    /// first; clean ones cost no I/O. Throws Errc::out_of_memory, evicting
    /// nothing, when the unlocked candidates cannot free enough.
    ReclaimReport reclaim(std::size_t needed_bytes, std::span<const ChunkKey> order);
    /// Sequential load of the missing chunks of `ctx`.
    LoadReport load(ContextState& ctx, const LoadAssignment& assignment);
    /// Synchronous single-chunk load; returns false when already in memory.
    bool fault(ContextState& ctx, std::uint32_t index);
    /// Drops the oldest whole chunks while the text exceeds the window by at
    /// least one chunk.
    std::vector<ChunkKey> slide_window(ContextState& ctx);

    /// Drops every chunk of a context from memory and disk, keeping its text;
    /// the next use rebuilds the cache from scratch. Returns the bytes freed.
    std::size_t discard_kv(ContextState& ctx);
    /// Evicts one chunk regardless of locks (writing it first if needed).
    void evict_now(ContextState& ctx, std::uint32_t index);

    /// Indices of chunks that are not in memory.
    std::vector<std::uint32_t> missing_chunks(const ContextState& ctx) const;
    /// Bytes of every chunk of the context at its current bitwidth.
    std::size_t working_set_bytes(const ContextState& ctx) const;
    /// Dequantized KV of the whole context; every chunk must be in memory.
    tinylm::KvTensor assemble_kv(const ContextState& ctx) const;
    /// Extra ledger bytes commit() would claim for rows up to kv.length.
    std::size_t commit_bytes_needed(const ContextState& ctx, const tinylm::KvTensor& kv) const;
    /// Stores the rows of `kv` from `from_position` on as dirty chunks at the
    /// base bitwidth. Returns the keys of the written chunks.
    std::vector<ChunkKey> commit(ContextState& ctx, const tinylm::KvTensor& kv,
                                 std::size_t from_position);
    /// Lowers an in-memory chunk to `bits`; returns false when nothing changed
    /// (bitwidths only ever decrease).
    bool lower_bitwidth(ContextState& ctx, std::uint32_t index, int bits);
    /// Writes one chunk's swap file and marks it clean. Returns bytes written.
    std::size_t write_swap(KvChunk& chunk);
    /// Rebuilds a context's chunk table from its swap files; chunks start on disk.
    ContextState& recover_context(CtxId id, std::vector<TokenId> tokens, std::size_t first_position);

    /// Test hook: when it returns true for a key, swap-file writes fail as if
    /// the disk were full.
    void set_write_fault(std::function<bool(const ChunkKey&)> hook) { write_fault_ = std::move(hook); }

private:
    friend class LoadSession;

    KvChunk& chunk_ref(const ChunkKey& key);
    quant::QuantizedChunkPayload encode_rows(const tinylm::KvTensor& kv, std::size_t first_row,
                                             std::size_t rows, int bits) const;
    void forget_chunk(KvChunk& chunk);

    const tinylm::Model* model_;
    StoreOptions options_;
    MemoryLedger ledger_;
    StoreStats stats_;
    std::map<CtxId, ContextState> contexts_;
    std::function<bool(const ChunkKey&)> write_fault_;
};

/// Copies a chunk's rows out of a KV tensor in quant element order.
quant::ChunkTensor extract_rows(const tinylm::KvTensor& kv, std::size_t first_row, std::size_t rows);
/// Writes a chunk tensor back into rows of a KV tensor.
void insert_rows(tinylm::KvTensor& kv, std::size_t first_row, const quant::ChunkTensor& chunk);

}  // namespace llmctx::chunkstore
