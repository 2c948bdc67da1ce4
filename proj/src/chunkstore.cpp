// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

#include "llmctx/chunkstore.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <set>
#include <string>
#include <system_error>

#include "llmctx/error.hpp"

namespace llmctx::chunkstore {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// MemoryLedger

void MemoryLedger::claim(const ChunkKey& key, std::size_t bytes, std::size_t metadata) {
    std::lock_guard lock(mutex_);
    if (entries_.count(key) != 0) raise(Errc::consistency, "chunk is already claimed");
    if (bytes > budget_ - used_) {
        raise(Errc::out_of_memory, "claim of " + std::to_string(bytes) + " bytes exceeds the " +
                                       std::to_string(budget_ - used_) + " free bytes");
    }
    entries_.emplace(key, Entry{bytes, metadata});
    used_ += bytes;
    metadata_ += metadata;
}

std::size_t MemoryLedger::release(const ChunkKey& key) {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return 0;
    const std::size_t bytes = it->second.bytes;
    used_ -= bytes;
    metadata_ -= it->second.metadata;
    entries_.erase(it);
    return bytes;
}

std::size_t MemoryLedger::budget() const {
    std::lock_guard lock(mutex_);
    return budget_;
}

std::size_t MemoryLedger::used() const {
    std::lock_guard lock(mutex_);
    return used_;
}

std::size_t MemoryLedger::free() const {
    std::lock_guard lock(mutex_);
    return budget_ - used_;
}

std::size_t MemoryLedger::metadata_bytes() const {
    std::lock_guard lock(mutex_);
    return metadata_;
}

bool MemoryLedger::holds(const ChunkKey& key) const {
    std::lock_guard lock(mutex_);
    return entries_.count(key) != 0;
}

std::size_t MemoryLedger::bytes_of(const ChunkKey& key) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(key);
    return it == entries_.end() ? 0 : it->second.bytes;
}

std::size_t MemoryLedger::entries() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
}

// ---------------------------------------------------------------------------
// ContextState

std::size_t ContextState::kv_length() const noexcept {
    std::size_t n = 0;
    for (const auto& c : chunks) n += c.token_count;
    return n;
}

KvChunk* ContextState::find(std::uint32_t index) {
    for (auto& c : chunks) {
        if (c.key.index == index) return &c;
    }
    return nullptr;
}

const KvChunk* ContextState::find(std::uint32_t index) const {
    return const_cast<ContextState*>(this)->find(index);
}

// ---------------------------------------------------------------------------
// Row helpers

quant::ChunkTensor extract_rows(const tinylm::KvTensor& kv, std::size_t first_row, std::size_t rows) {
    if (first_row + rows > kv.length) raise(Errc::consistency, "chunk rows outside the cache");
    quant::ChunkTensor out;
    out.shape = {kv.layers, kv.heads, kv.head_dim, rows};
    out.data.resize(out.shape.elements());
    for (std::size_t l = 0; l < kv.layers; ++l) {
        for (std::size_t t = 0; t < rows; ++t) {
            const auto k = kv.key_row(l, first_row + t);
            const auto v = kv.value_row(l, first_row + t);
            std::copy(k.begin(), k.end(), out.data.begin() + static_cast<std::ptrdiff_t>(out.shape.element(l, 0, t, 0)));
            std::copy(v.begin(), v.end(), out.data.begin() + static_cast<std::ptrdiff_t>(out.shape.element(l, 1, t, 0)));
        }
    }
    return out;
}

void insert_rows(tinylm::KvTensor& kv, std::size_t first_row, const quant::ChunkTensor& chunk) {
    const auto& s = chunk.shape;
    if (s.layers != kv.layers || s.heads != kv.heads || s.head_dim != kv.head_dim ||
        first_row + s.tokens > kv.length) {
        raise(Errc::consistency, "chunk does not fit the cache");
    }
    const std::size_t hidden = kv.hidden();
    for (std::size_t l = 0; l < s.layers; ++l) {
        for (std::size_t t = 0; t < s.tokens; ++t) {
            auto k = kv.key_row(l, first_row + t);
            auto v = kv.value_row(l, first_row + t);
            std::copy_n(chunk.data.begin() + static_cast<std::ptrdiff_t>(s.element(l, 0, t, 0)), hidden, k.begin());
            std::copy_n(chunk.data.begin() + static_cast<std::ptrdiff_t>(s.element(l, 1, t, 0)), hidden, v.begin());
        }
    }
}

namespace {

// Decodes one layer of a swap-file image into cache rows. Arithmetic matches
// quant::dequantize exactly.
void decode_layer(const swapfile::Header& h, std::span<const std::uint8_t> image, std::size_t layer,
                  tinylm::KvTensor& kv, std::size_t first_row) {
    const auto s = swapfile::layer_slices(h, layer);
    const std::size_t hidden = h.shape.hidden();
    const std::size_t tokens = h.shape.tokens;
    const std::size_t count = 2 * tokens * hidden;
    const auto payload = image.subspan(s.payload_offset, s.payload_bytes);
    auto f32_at = [&](std::size_t offset) {
        std::uint32_t bits = 0;
        for (std::size_t b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(image[offset + b]) << (8 * b);
        return std::bit_cast<float>(bits);
    };

    std::vector<float> values(count);
    if (h.bitwidth == quant::kRawBitwidth) {
        for (std::size_t i = 0; i < count; ++i) values[i] = f32_at(s.payload_offset + 4 * i);
    } else {
        const auto codes = quant::unpack_codes(payload, h.bitwidth, count);
        for (std::size_t kvi = 0; kvi < 2; ++kvi) {
            for (std::size_t hd = 0; hd < hidden; ++hd) {
                const std::size_t c = kvi * hidden + hd;
                const double scale = f32_at(s.scales_offset + 4 * c);
                const double zero = f32_at(s.zeros_offset + 4 * c);
                if (!(scale > 0.0) || !std::isfinite(scale) || !std::isfinite(zero)) {
                    raise(Errc::format, "swap file has an invalid scale");
                }
                for (std::size_t t = 0; t < tokens; ++t) {
                    const std::size_t e = (kvi * tokens + t) * hidden + hd;
                    values[e] = static_cast<float>(codes[e] * scale + zero);
                }
            }
        }
    }
    for (std::size_t t = 0; t < tokens; ++t) {
        auto k = kv.key_row(layer, first_row + t);
        auto v = kv.value_row(layer, first_row + t);
        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(t * hidden), hidden, k.begin());
        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>((tokens + t) * hidden), hidden, v.begin());
    }
}

bool read_at(std::ifstream& in, std::size_t offset, std::uint8_t* dst, std::size_t n) {
    in.seekg(static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    return static_cast<std::size_t>(in.gcount()) == n;
}

}  // namespace

// ---------------------------------------------------------------------------
// LoadSession

struct LoadSession::IoChunk {
    std::uint32_t index = 0;
    std::size_t first_row = 0;
    swapfile::Header header;
    std::ifstream file;
    std::vector<std::uint8_t> image;
    bool failed = false;
};

LoadSession::LoadSession(ChunkStore& store, ContextState& ctx, LoadAssignment assignment)
    : store_(store), ctx_(ctx), assignment_(std::move(assignment)) {
    std::set<std::uint32_t> seen;
    std::size_t needed = 0;
    for (const auto* list : {&assignment_.io, &assignment_.recompute}) {
        for (std::uint32_t idx : *list) {
            const KvChunk* c = ctx_.find(idx);
            if (c == nullptr) raise(Errc::consistency, "chunk " + std::to_string(idx) + " is not part of the context");
            if (c->in_memory()) raise(Errc::consistency, "chunk " + std::to_string(idx) + " is already in memory");
            if (!seen.insert(idx).second) raise(Errc::consistency, "chunk " + std::to_string(idx) + " is assigned twice");
            needed += store_.chunk_bytes(*c);
        }
    }
    for (const auto& c : ctx_.chunks) {
        if (!c.in_memory() && seen.count(c.key.index) == 0) partial_ = true;
    }
    if (partial_ && !assignment_.recompute.empty()) {
        raise(Errc::consistency, "recompute needs every other chunk of the context in memory or loaded");
    }
    if (needed > store_.ledger().free()) {
        raise(Errc::out_of_memory, "load needs " + std::to_string(needed) + " bytes but only " +
                                       std::to_string(store_.ledger().free()) + " are free");
    }
    if (assignment_.empty()) return;

    const auto& cfg = store_.model().config();
    work_ = tinylm::KvTensor(cfg.layers, cfg.heads, cfg.head_dim, ctx_.kv_length(), ctx_.first_position);
    for (const auto& c : ctx_.chunks) {
        if (c.in_memory()) insert_rows(work_, c.token_start - ctx_.first_position, quant::dequantize(*c.payload));
    }
    for (std::uint32_t idx : assignment_.io) {
        auto io = std::make_unique<IoChunk>();
        io->index = idx;
        io->first_row = ctx_.find(idx)->token_start - ctx_.first_position;
        io_.push_back(std::move(io));
    }
}

LoadSession::~LoadSession() = default;

std::size_t LoadSession::layers() const noexcept { return store_.model().config().layers; }

std::size_t LoadSession::read_layer(std::size_t layer) {
    std::size_t bytes = 0;
    for (auto& io : io_) {
        if (io->failed) continue;
        try {
            if (layer == 0) {
                const KvChunk& c = *ctx_.find(io->index);
                io->file.open(store_.swap_path(c.key), std::ios::binary);
                if (!io->file) raise(Errc::io, "swap file is missing");
                std::uint8_t head[swapfile::kHeaderBytes];
                if (!read_at(io->file, 0, head, sizeof head)) raise(Errc::format, "swap file is truncated");
                io->header = swapfile::decode_header(head);
                const auto& h = io->header;
                if (h.ctx_id != c.key.ctx || h.chunk_index != c.key.index || h.token_start != c.token_start ||
                    h.shape != store_.shape_for(c.token_count) || h.bitwidth != c.bitwidth) {
                    raise(Errc::format, "swap file does not describe this chunk");
                }
                io->image.assign(swapfile::file_size(h), 0);
                std::copy(std::begin(head), std::end(head), io->image.begin());
                report_.file_bytes_read += sizeof head;
            }
            const auto s = swapfile::layer_slices(io->header, layer);
            for (auto [offset, n] : {std::pair{s.scales_offset, s.channel_bytes},
                                     std::pair{s.zeros_offset, s.channel_bytes},
                                     std::pair{s.payload_offset, s.payload_bytes}}) {
                if (!read_at(io->file, offset, io->image.data() + offset, n)) {
                    raise(Errc::format, "swap file is truncated");
                }
                report_.file_bytes_read += n;
            }
            bytes += s.payload_bytes;
            report_.payload_bytes_read += s.payload_bytes;
            decode_layer(io->header, io->image, layer, work_, io->first_row);
            if (layer + 1 == layers()) {
                const std::size_t crc_at = io->image.size() - swapfile::kCrcBytes;
                if (!read_at(io->file, crc_at, io->image.data() + crc_at, swapfile::kCrcBytes)) {
                    raise(Errc::format, "swap file is truncated");
                }
                report_.file_bytes_read += swapfile::kCrcBytes;
                if (!swapfile::crc_matches(io->image)) raise(Errc::format, "swap-file CRC mismatch");
                io->file.close();
            }
        } catch (const Error&) {
            io->failed = true;
            io->file.close();
        }
    }
    return bytes;
}

void LoadSession::recompute_layer(std::size_t layer) {
    if (assignment_.recompute.empty()) return;
    if (!recomputer_) {
        std::vector<std::size_t> rows;
        for (std::uint32_t idx : assignment_.recompute) {
            const KvChunk& c = *ctx_.find(idx);
            for (std::size_t t = 0; t < c.token_count; ++t) rows.push_back(c.token_start - ctx_.first_position + t);
        }
        std::sort(rows.begin(), rows.end());
        recomputer_ = std::make_unique<tinylm::RowRecomputer>(store_.model(), work_, std::move(rows),
                                                              std::span<const TokenId>(ctx_.tokens));
    }
    if (recomputer_->next_layer() != layer) raise(Errc::consistency, "recompute layers must run in order");
    recomputer_->run_layer(layer);
}

LoadReport LoadSession::finish() {
    if (finished_) raise(Errc::consistency, "load session already finished");
    finished_ = true;
    if (assignment_.empty()) return report_;

    std::vector<std::uint32_t> rebuild = assignment_.recompute;
    for (const auto& io : io_) {
        if (io->failed) {
            report_.fallbacks.push_back(io->index);
            rebuild.push_back(io->index);
        }
    }
    try {
        if (!report_.fallbacks.empty()) {
            if (partial_) raise(Errc::context, "swap file unusable and the context is not fully loaded");
            // Rows rebuilt earlier attended to unreadable rows; redo them all.
            report_.degraded = true;
            std::vector<std::size_t> rows;
            for (std::uint32_t idx : rebuild) {
                const KvChunk& c = *ctx_.find(idx);
                for (std::size_t t = 0; t < c.token_count; ++t) rows.push_back(c.token_start - ctx_.first_position + t);
            }
            std::sort(rows.begin(), rows.end());
            tinylm::RowRecomputer fallback(store_.model(), work_, std::move(rows), std::span<const TokenId>(ctx_.tokens));
            fallback.run_all();
        } else if (recomputer_ && recomputer_->next_layer() != layers()) {
            raise(Errc::consistency, "load finished before every layer was recomputed");
        } else if (!assignment_.recompute.empty() && !recomputer_) {
            raise(Errc::consistency, "load finished before any layer was recomputed");
        }
    } catch (const Error& e) {
        if (e.code() == Errc::consistency || e.code() == Errc::context) throw;
        raise(Errc::context, std::string("context cannot be rebuilt: ") + e.what());
    }

    for (const auto& io : io_) {
        if (io->failed) continue;
        KvChunk& c = *ctx_.find(io->index);
        store_.claim(c, swapfile::decode(io->image).payload);
        c.residency = Residency::Both;
        c.dirty = false;
        ++report_.chunks_read;
    }
    for (std::uint32_t idx : rebuild) {
        KvChunk& c = *ctx_.find(idx);
        store_.claim(c, store_.encode_rows(work_, c.token_start - ctx_.first_position, c.token_count, c.bitwidth));
        // A chunk rebuilt by plan still has a good swap file, which stays a
        // valid copy; one rebuilt after a failed read must be written again.
        const bool file_ok = std::find(report_.fallbacks.begin(), report_.fallbacks.end(), idx) == report_.fallbacks.end();
        c.residency = file_ok ? Residency::Both : Residency::InMemory;
        c.dirty = !file_ok;
        ++report_.chunks_recomputed;
    }
    store_.stats_.payload_bytes_read += report_.payload_bytes_read;
    store_.stats_.chunks_recomputed += report_.chunks_recomputed;
    return report_;
}

// ---------------------------------------------------------------------------
// ChunkStore

ChunkStore::ChunkStore(const tinylm::Model& model, StoreOptions options)
    : model_(&model), options_(std::move(options)), ledger_(options_.budget_bytes) {
    if (options_.chunk_tokens == 0) raise(Errc::argument, "chunk size must be positive");
    if (!quant::is_storage_bitwidth(options_.base_bitwidth)) {
        raise(Errc::argument, "base bitwidth must be 2, 4, 8 or 32");
    }
    if (options_.max_window < options_.chunk_tokens) {
        raise(Errc::argument, "window must hold at least one chunk");
    }
    fs::create_directories(options_.swap_dir);
}

ContextState& ChunkStore::create_context(CtxId id) {
    if (contexts_.count(id) != 0) raise(Errc::argument, "context " + std::to_string(id) + " already exists");
    ContextState ctx;
    ctx.id = id;
    ctx.max_window = options_.max_window;
    ctx.density = tolerance::DensityLedger(model_->config().layers, model_->config().heads, 0);
    // Leftovers from an earlier process cannot belong to a fresh context.
    std::error_code ec;
    fs::remove_all(swap_path({id, 0}).parent_path(), ec);
    return contexts_.emplace(id, std::move(ctx)).first->second;
}

bool ChunkStore::has_context(CtxId id) const { return contexts_.count(id) != 0; }

ContextState& ChunkStore::context(CtxId id) {
    auto it = contexts_.find(id);
    if (it == contexts_.end()) raise(Errc::not_found, "unknown context " + std::to_string(id));
    return it->second;
}

const ContextState& ChunkStore::context(CtxId id) const {
    return const_cast<ChunkStore*>(this)->context(id);
}

std::vector<CtxId> ChunkStore::context_ids() const {
    std::vector<CtxId> ids;
    for (const auto& [id, ctx] : contexts_) ids.push_back(id);
    return ids;
}

void ChunkStore::delete_context(CtxId id) {
    ContextState& ctx = context(id);
    for (auto& c : ctx.chunks) ledger_.release(c.key);
    std::error_code ec;
    fs::remove_all(options_.swap_dir / ("ctx-" + std::to_string(id)), ec);
    contexts_.erase(id);
}

quant::ChunkShape ChunkStore::shape_for(std::size_t tokens) const {
    const auto& cfg = model_->config();
    return {cfg.layers, cfg.heads, cfg.head_dim, tokens};
}

std::size_t ChunkStore::chunk_bytes(const KvChunk& chunk) const {
    return quant::payload_bytes(shape_for(chunk.token_count), chunk.bitwidth);
}

fs::path ChunkStore::swap_path(const ChunkKey& key) const {
    return options_.swap_dir / ("ctx-" + std::to_string(key.ctx)) / ("chunk-" + std::to_string(key.index) + ".llmc");
}

KvChunk& ChunkStore::chunk_ref(const ChunkKey& key) {
    KvChunk* c = context(key.ctx).find(key.index);
    if (c == nullptr) raise(Errc::not_found, "unknown chunk " + std::to_string(key.index));
    return *c;
}

void ChunkStore::claim(KvChunk& chunk, quant::QuantizedChunkPayload payload) {
    if (payload.shape != shape_for(chunk.token_count)) raise(Errc::consistency, "payload shape does not match the chunk");
    if (chunk.in_memory()) raise(Errc::consistency, "chunk is already in memory");
    ledger_.claim(chunk.key, quant::payload_bytes(payload.shape, payload.bitwidth), quant::metadata_bytes(payload.shape));
    chunk.bitwidth = payload.bitwidth;
    chunk.payload = std::move(payload);
    chunk.residency = Residency::InMemory;
}

ReclaimReport ChunkStore::reclaim(std::size_t needed_bytes, std::span<const ChunkKey> order) {
    ReclaimReport report;
    if (needed_bytes == 0) return report;
    if (needed_bytes > ledger_.budget()) raise(Errc::out_of_memory, "request exceeds the whole budget");

    std::vector<KvChunk*> victims;
    std::size_t freed = 0;
    for (const ChunkKey& key : order) {
        if (freed >= needed_bytes) break;
        auto it = contexts_.find(key.ctx);
        if (it == contexts_.end() || it->second.locked) continue;
        KvChunk* c = it->second.find(key.index);
        if (c == nullptr || !c->in_memory()) continue;
        victims.push_back(c);
        freed += ledger_.bytes_of(c->key);
    }
    if (freed < needed_bytes) {
        raise(Errc::out_of_memory, "unlocked chunks free only " + std::to_string(freed) + " of " +
                                       std::to_string(needed_bytes) + " bytes");
    }
    for (KvChunk* c : victims) {
        if (c->dirty || !c->on_disk()) report.write_bytes += write_swap(*c);
        report.freed_bytes += ledger_.release(c->key);
        c->payload.reset();
        c->residency = Residency::OnDisk;
        report.evicted.push_back(c->key);
    }
    return report;
}

LoadReport ChunkStore::load(ContextState& ctx, const LoadAssignment& assignment) {
    const auto start = std::chrono::steady_clock::now();
    LoadSession session(*this, ctx, assignment);
    if (!assignment.empty()) {
        for (std::size_t l = 0; l < session.layers(); ++l) {
            session.read_layer(l);
            session.recompute_layer(l);
        }
    }
    LoadReport report = session.finish();
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

bool ChunkStore::fault(ContextState& ctx, std::uint32_t index) {
    KvChunk* c = ctx.find(index);
    if (c == nullptr) raise(Errc::not_found, "unknown chunk " + std::to_string(index));
    if (c->in_memory()) return false;
    try {
        load(ctx, LoadAssignment{{index}, {}});
    } catch (const Error& e) {
        if (e.code() != Errc::context) throw;
        // The file is unusable and rebuilding the chunk needs every other
        // row, so bring the rest of the context in with it.
        LoadAssignment all;
        all.recompute.push_back(index);
        for (const auto& other : ctx.chunks) {
            if (!other.in_memory() && other.key.index != index) all.io.push_back(other.key.index);
        }
        load(ctx, all);
    }
    ++stats_.faults;
    return true;
}

std::vector<ChunkKey> ChunkStore::slide_window(ContextState& ctx) {
    std::vector<ChunkKey> dropped;
    const std::size_t t = options_.chunk_tokens;
    while (ctx.tokens.size() >= ctx.max_window + t) {
        if (!ctx.chunks.empty() && ctx.chunks.front().token_start == ctx.first_position) {
            KvChunk& c = ctx.chunks.front();
            if (c.token_count < t) break;
            dropped.push_back(c.key);
            forget_chunk(c);
            ctx.chunks.erase(ctx.chunks.begin());
        }
        ctx.tokens.erase(ctx.tokens.begin(), ctx.tokens.begin() + static_cast<std::ptrdiff_t>(t));
        ctx.first_position += t;
        ctx.density.drop_front(std::min(t, ctx.density.size()));
    }
    return dropped;
}

void ChunkStore::forget_chunk(KvChunk& chunk) {
    ledger_.release(chunk.key);
    chunk.payload.reset();
    std::error_code ec;
    fs::remove(swap_path(chunk.key), ec);
}

std::size_t ChunkStore::discard_kv(ContextState& ctx) {
    std::size_t freed = 0;
    for (auto& c : ctx.chunks) {
        freed += ledger_.bytes_of(c.key);
        forget_chunk(c);
    }
    ctx.chunks.clear();
    ctx.density = tolerance::DensityLedger(model_->config().layers, model_->config().heads, ctx.first_position);
    return freed;
}

void ChunkStore::evict_now(ContextState& ctx, std::uint32_t index) {
    KvChunk* c = ctx.find(index);
    if (c == nullptr) raise(Errc::not_found, "unknown chunk " + std::to_string(index));
    if (!c->in_memory()) return;
    if (c->dirty || !c->on_disk()) write_swap(*c);
    ledger_.release(c->key);
    c->payload.reset();
    c->residency = Residency::OnDisk;
}

std::vector<std::uint32_t> ChunkStore::missing_chunks(const ContextState& ctx) const {
    std::vector<std::uint32_t> out;
    for (const auto& c : ctx.chunks) {
        if (!c.in_memory()) out.push_back(c.key.index);
    }
    return out;
}

std::size_t ChunkStore::working_set_bytes(const ContextState& ctx) const {
    std::size_t n = 0;
    for (const auto& c : ctx.chunks) n += chunk_bytes(c);
    return n;
}

tinylm::KvTensor ChunkStore::assemble_kv(const ContextState& ctx) const {
    const auto& cfg = model_->config();
    tinylm::KvTensor kv(cfg.layers, cfg.heads, cfg.head_dim, ctx.kv_length(), ctx.first_position);
    for (const auto& c : ctx.chunks) {
        if (!c.in_memory()) raise(Errc::context, "chunk " + std::to_string(c.key.index) + " is not in memory");
        insert_rows(kv, c.token_start - ctx.first_position, quant::dequantize(*c.payload));
    }
    return kv;
}

quant::QuantizedChunkPayload ChunkStore::encode_rows(const tinylm::KvTensor& kv, std::size_t first_row,
                                                     std::size_t rows, int bits) const {
    const auto tensor = extract_rows(kv, first_row, rows);
    return bits == quant::kRawBitwidth ? quant::store_raw(tensor) : quant::quantize(tensor, bits);
}

std::size_t ChunkStore::commit_bytes_needed(const ContextState& ctx, const tinylm::KvTensor& kv) const {
    const std::size_t t = options_.chunk_tokens;
    const std::size_t end = kv.first_position + kv.length;
    const std::size_t begin = ctx.first_position + ctx.kv_length();
    if (end <= begin) return 0;
    std::size_t extra = 0;
    for (std::size_t start = begin - begin % t; start < end; start += t) {
        const std::size_t count = std::min(t, end - start);
        const std::size_t after = quant::payload_bytes(shape_for(count), options_.base_bitwidth);
        const KvChunk* c = ctx.find(static_cast<std::uint32_t>(start / t));
        const std::size_t before = c != nullptr && c->in_memory() ? chunk_bytes(*c) : 0;
        if (after > before) extra += after - before;
    }
    return extra;
}

std::vector<ChunkKey> ChunkStore::commit(ContextState& ctx, const tinylm::KvTensor& kv,
                                         std::size_t from_position) {
    if (kv.first_position != ctx.first_position) raise(Errc::consistency, "cache does not start at the context's window");
    const std::size_t t = options_.chunk_tokens;
    const std::size_t end = kv.first_position + kv.length;
    if (from_position > ctx.first_position + ctx.kv_length()) {
        raise(Errc::consistency, "commit would leave a gap in the chunk table");
    }
    std::vector<ChunkKey> written;
    for (std::size_t start = from_position - from_position % t; start < end; start += t) {
        const std::size_t count = std::min(t, end - start);
        const auto index = static_cast<std::uint32_t>(start / t);
        auto payload = encode_rows(kv, start - kv.first_position, count, options_.base_bitwidth);
        KvChunk* c = ctx.find(index);
        if (c == nullptr) {
            KvChunk fresh;
            fresh.key = {ctx.id, index};
            fresh.token_start = start;
            fresh.token_count = count;
            fresh.bitwidth = options_.base_bitwidth;
            fresh.residency = Residency::OnDisk;  // claim flips it to InMemory
            fresh.last_access = ctx.clock;
            ctx.chunks.push_back(std::move(fresh));
            c = &ctx.chunks.back();
        } else {
            if (!c->in_memory()) raise(Errc::consistency, "cannot commit into a swapped-out chunk");
            ledger_.release(c->key);
            c->payload.reset();
            c->residency = Residency::OnDisk;
            c->token_count = count;
            std::error_code ec;
            fs::remove(swap_path(c->key), ec);
        }
        claim(*c, std::move(payload));
        c->dirty = true;
        written.push_back(c->key);
    }
    return written;
}

bool ChunkStore::lower_bitwidth(ContextState& ctx, std::uint32_t index, int bits) {
    KvChunk* c = ctx.find(index);
    if (c == nullptr) raise(Errc::not_found, "unknown chunk " + std::to_string(index));
    if (!quant::is_code_bitwidth(bits)) raise(Errc::argument, "target bitwidth must be 2, 4 or 8");
    if (!c->in_memory() || bits >= c->bitwidth) return false;
    auto payload = c->bitwidth == quant::kRawBitwidth ? quant::quantize(quant::dequantize(*c->payload), bits)
                                                      : quant::requantize(*c->payload, bits);
    ledger_.release(c->key);
    c->payload.reset();
    c->residency = Residency::OnDisk;
    claim(*c, std::move(payload));
    c->dirty = true;
    std::error_code ec;
    fs::remove(swap_path(c->key), ec);
    return true;
}

std::size_t ChunkStore::write_swap(KvChunk& chunk) {
    if (!chunk.payload) raise(Errc::consistency, "cannot swap out a chunk that is not in memory");
    if (write_fault_ && write_fault_(chunk.key)) raise(Errc::io, "no space left on the swap device");
    const auto image = swapfile::encode({chunk.key.ctx, chunk.key.index,
                                         static_cast<std::uint32_t>(chunk.token_start), *chunk.payload});
    const fs::path path = swap_path(chunk.key);
    fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(image.data()), static_cast<std::streamsize>(image.size()));
        if (!out) raise(Errc::io, "failed to write " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) raise(Errc::io, "failed to publish " + path.string() + ": " + ec.message());
    chunk.dirty = false;
    chunk.residency = Residency::Both;
    ++stats_.files_written;
    stats_.bytes_written += image.size();
    return image.size();
}

ContextState& ChunkStore::recover_context(CtxId id, std::vector<TokenId> tokens, std::size_t first_position) {
    const std::size_t t = options_.chunk_tokens;
    if (first_position % t != 0) raise(Errc::argument, "window must start on a chunk boundary");
    std::map<std::uint32_t, swapfile::SwapRecord> records;
    const fs::path dir = options_.swap_dir / ("ctx-" + std::to_string(id));
    if (fs::exists(dir)) {
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (entry.path().extension() != ".llmc") continue;
            std::ifstream in(entry.path(), std::ios::binary);
            std::vector<std::uint8_t> image((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
            auto rec = swapfile::decode(image);
            if (rec.ctx_id != id) raise(Errc::format, "swap file belongs to another context");
            records.emplace(rec.chunk_index, std::move(rec));
        }
    }
    ContextState& ctx = create_context(id);
    ctx.tokens = std::move(tokens);
    ctx.first_position = first_position;
    ctx.density = tolerance::DensityLedger(model_->config().layers, model_->config().heads, first_position);
    std::size_t expected = first_position;
    for (auto& [index, rec] : records) {
        if (rec.token_start < first_position) continue;
        if (rec.token_start != expected || rec.payload.shape != shape_for(rec.payload.shape.tokens) ||
            rec.token_start + rec.payload.shape.tokens > ctx.end_position()) {
            contexts_.erase(id);
            raise(Errc::context, "swap files do not form a contiguous context");
        }
        KvChunk c;
        c.key = {id, index};
        c.token_start = rec.token_start;
        c.token_count = rec.payload.shape.tokens;
        c.bitwidth = rec.payload.bitwidth;
        c.residency = Residency::OnDisk;
        ctx.chunks.push_back(std::move(c));
        expected += rec.payload.shape.tokens;
    }
    return ctx;
}

}  // namespace llmctx::chunkstore
