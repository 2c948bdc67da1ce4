// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <random>

#include "llmctx/chunkstore.hpp"
#include "llmctx/error.hpp"
#include "llmctx/swapfile.hpp"

using namespace llmctx;
using namespace llmctx::chunkstore;
namespace fs = std::filesystem;

namespace {

fs::path tmp_root() {
    if (const char* env = std::getenv("LLMCTX_TEST_TMP")) return env;
    return fs::temp_directory_path() / "llmctx-tests";
}

tinylm::Config model_config() {
    tinylm::Config c;
    c.max_seq = 256;
    c.seed = 5;
    return c;
}

std::vector<TokenId> random_tokens(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<TokenId> out(n);
    for (auto& t : out) t = static_cast<TokenId>(1 + rng() % 255);
    return out;
}

std::vector<std::uint8_t> read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

Errc code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected an llmctx::Error";
    return Errc::context;
}

constexpr std::size_t kChunk8 = 2 * 2 * 64 * 16;  // bytes of a full 8-bit chunk

class ChunkStoreTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir = tmp_root() / ("chunkstore-" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir);
    }

    StoreOptions options(std::size_t budget, int bits = 8, std::size_t window = 4096) const {
        StoreOptions o;
        o.budget_bytes = budget;
        o.base_bitwidth = bits;
        o.swap_dir = dir;
        o.max_window = window;
        return o;
    }

    // A context holding `n` prefilled tokens, all chunks dirty in memory.
    ContextState& fill(ChunkStore& store, CtxId id, std::size_t n, std::uint64_t seed) {
        auto& ctx = store.create_context(id);
        ctx.tokens = random_tokens(n, seed);
        const auto f = tinylm::forward_full(model, ctx.tokens);
        ctx.density.update(f.attention);
        store.commit(ctx, f.kv, 0);
        return ctx;
    }

    std::vector<ChunkKey> keys_of(const ContextState& ctx) const {
        std::vector<ChunkKey> out;
        for (const auto& c : ctx.chunks) out.push_back(c.key);
        return out;
    }

    tinylm::Model model{model_config()};
    fs::path dir;
};

}  // namespace

TEST(MemoryLedger, ClaimReleaseAndOverflow) {
    MemoryLedger ledger(100);
    ledger.claim({1, 0}, 60, 8);
    EXPECT_EQ(ledger.used(), 60u);
    EXPECT_EQ(ledger.free(), 40u);
    EXPECT_EQ(ledger.metadata_bytes(), 8u);
    EXPECT_EQ(code_of([&] { ledger.claim({1, 1}, 41); }), Errc::out_of_memory);
    EXPECT_EQ(ledger.used(), 60u);
    EXPECT_FALSE(ledger.holds({1, 1}));
    EXPECT_EQ(code_of([&] { ledger.claim({1, 0}, 1); }), Errc::consistency);
    ledger.claim({1, 1}, 40);
    EXPECT_EQ(ledger.free(), 0u);
    EXPECT_EQ(ledger.release({1, 0}), 60u);
    EXPECT_EQ(ledger.release({1, 0}), 0u);
    EXPECT_EQ(ledger.used(), 40u);
    EXPECT_EQ(ledger.entries(), 1u);
}

TEST_F(ChunkStoreTest, CommitCreatesChunksAtBaseBitwidth) {
    ChunkStore store(model, options(1 << 20));
    auto& ctx = fill(store, 1, 40, 1);
    ASSERT_EQ(ctx.chunks.size(), 3u);
    EXPECT_EQ(ctx.chunks[2].token_count, 8u);
    EXPECT_EQ(ctx.kv_length(), 40u);
    for (const auto& c : ctx.chunks) {
        EXPECT_TRUE(c.dirty);
        EXPECT_EQ(c.residency, Residency::InMemory);
        EXPECT_EQ(c.bitwidth, 8);
    }
    EXPECT_EQ(store.ledger().used(), kChunk8 * 2 + kChunk8 / 2);
    EXPECT_EQ(store.working_set_bytes(ctx), store.ledger().used());

    // Extending rewrites the partial tail and adds new chunks.
    auto kv = store.assemble_kv(ctx);
    for (int i = 0; i < 10; ++i) {
        ctx.tokens.push_back(3);
        tinylm::forward_step(model, kv, 3);
    }
    // The tail grows from 8 to 16 tokens and a 2-token chunk appears.
    EXPECT_EQ(store.commit_bytes_needed(ctx, kv), kChunk8 / 2 + 2 * kChunk8 / 16);
    const auto written = store.commit(ctx, kv, 40);
    EXPECT_EQ(written.size(), 2u);
    EXPECT_EQ(ctx.chunks.size(), 4u);
    EXPECT_EQ(ctx.kv_length(), 50u);
    EXPECT_EQ(code_of([&] { store.commit(ctx, kv, 60); }), Errc::consistency);
}

TEST_F(ChunkStoreTest, ReclaimWritesDirtyVictimsAndLoadRestoresThemExactly) {
    ChunkStore store(model, options(1 << 20));
    auto& ctx = fill(store, 1, 48, 2);
    std::vector<quant::QuantizedChunkPayload> before;
    for (const auto& c : ctx.chunks) before.push_back(*c.payload);
    const auto keys = keys_of(ctx);

    const auto report = store.reclaim(kChunk8 + 1, keys);
    ASSERT_EQ(report.evicted.size(), 2u);  // shortest prefix covering the request
    EXPECT_EQ(report.freed_bytes, 2 * kChunk8);
    EXPECT_GT(report.write_bytes, 2 * kChunk8);
    EXPECT_EQ(ctx.chunks[0].residency, Residency::OnDisk);
    EXPECT_EQ(ctx.chunks[2].residency, Residency::InMemory);
    EXPECT_EQ(store.ledger().used(), kChunk8);
    EXPECT_EQ(store.stats().files_written, 2u);
    for (std::size_t k = 0; k < 2; ++k) {
        const auto file = read_file(store.swap_path(keys[k]));
        EXPECT_EQ(swapfile::decode(file).payload, before[k]);
    }
    EXPECT_EQ(store.missing_chunks(ctx), (std::vector<std::uint32_t>{0, 1}));
    EXPECT_EQ(code_of([&] { store.assemble_kv(ctx); }), Errc::context);

    const auto load = store.load(ctx, LoadAssignment{{0, 1}, {}});
    EXPECT_EQ(load.chunks_read, 2u);
    EXPECT_EQ(load.payload_bytes_read, 2 * kChunk8);
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_EQ(*ctx.chunks[k].payload, before[k]);
        EXPECT_TRUE(ctx.chunks[k].in_memory());
    }
    // Loaded chunks are clean copies of their files: evicting again writes nothing.
    EXPECT_EQ(ctx.chunks[0].residency, Residency::Both);
    EXPECT_FALSE(ctx.chunks[0].dirty);
    const auto again = store.reclaim(kChunk8, keys);
    EXPECT_EQ(again.write_bytes, 0u);
}

TEST_F(ChunkStoreTest, ReclaimSkipsLockedAndFailsCleanly) {
    ChunkStore store(model, options(1 << 20));
    auto& a = fill(store, 1, 32, 3);
    auto& b = fill(store, 2, 32, 4);
    a.locked = true;
    std::vector<ChunkKey> order = keys_of(a);
    for (auto k : keys_of(b)) order.push_back(k);
    const auto used = store.ledger().used();
    EXPECT_EQ(code_of([&] { store.reclaim(3 * kChunk8, order); }), Errc::out_of_memory);
    EXPECT_EQ(store.ledger().used(), used);
    for (const auto& c : b.chunks) EXPECT_TRUE(c.in_memory());
    const auto report = store.reclaim(kChunk8, order);
    ASSERT_EQ(report.evicted.size(), 1u);
    EXPECT_EQ(report.evicted[0].ctx, 2u);
}

TEST_F(ChunkStoreTest, ClaimOverBudgetIsRefused) {
    ChunkStore store(model, options(kChunk8 + 10));
    auto& ctx = store.create_context(1);
    ctx.tokens = random_tokens(32, 1);
    const auto f = tinylm::forward_full(model, ctx.tokens);
    EXPECT_EQ(store.commit_bytes_needed(ctx, f.kv), 2 * kChunk8);
    EXPECT_EQ(code_of([&] { store.commit(ctx, f.kv, 0); }), Errc::out_of_memory);
    EXPECT_LE(store.ledger().used(), store.ledger().budget());
}

TEST_F(ChunkStoreTest, RecomputeRebuildsUnquantizedChunksExactly) {
    ChunkStore store(model, options(1 << 22, quant::kRawBitwidth));
    auto& ctx = fill(store, 1, 64, 5);
    const auto truth = store.assemble_kv(ctx);
    store.reclaim(2 * kChunk8 * 4, std::vector<ChunkKey>{{1, 1}, {1, 3}});
    const auto report = store.load(ctx, LoadAssignment{{}, {1, 3}});
    EXPECT_EQ(report.chunks_recomputed, 2u);
    EXPECT_EQ(report.chunks_read, 0u);
    EXPECT_LE(store.assemble_kv(ctx).max_abs_diff(truth), 1e-4f);
    // A planned recompute leaves the swap file valid.
    EXPECT_EQ(ctx.find(1)->residency, Residency::Both);
    EXPECT_FALSE(ctx.find(1)->dirty);
}

TEST_F(ChunkStoreTest, MixedLoadAndValidation) {
    ChunkStore store(model, options(1 << 22, quant::kRawBitwidth));
    auto& ctx = fill(store, 1, 64, 6);
    const auto truth = store.assemble_kv(ctx);
    store.reclaim(store.working_set_bytes(ctx), keys_of(ctx));
    EXPECT_EQ(code_of([&] { store.load(ctx, LoadAssignment{{0, 0}, {}}); }), Errc::consistency);
    EXPECT_EQ(code_of([&] { store.load(ctx, LoadAssignment{{9}, {}}); }), Errc::consistency);
    // Recompute needs every other row in memory or on its way in.
    EXPECT_EQ(code_of([&] { store.load(ctx, LoadAssignment{{0}, {1}}); }), Errc::consistency);
    const auto report = store.load(ctx, LoadAssignment{{0, 2}, {1, 3}});
    EXPECT_EQ(report.chunks_read, 2u);
    EXPECT_EQ(report.chunks_recomputed, 2u);
    EXPECT_LE(store.assemble_kv(ctx).max_abs_diff(truth), 1e-4f);
    EXPECT_EQ(code_of([&] { store.load(ctx, LoadAssignment{{0}, {}}); }), Errc::consistency);
}

TEST_F(ChunkStoreTest, FaultLoadsOneChunk) {
    ChunkStore store(model, options(1 << 20));
    auto& ctx = fill(store, 1, 48, 7);
    const auto payload = *ctx.chunks[1].payload;
    store.reclaim(1, std::vector<ChunkKey>{{1, 1}});
    EXPECT_TRUE(store.fault(ctx, 1));
    EXPECT_EQ(*ctx.chunks[1].payload, payload);
    EXPECT_FALSE(store.fault(ctx, 1));
    EXPECT_EQ(store.stats().faults, 1u);
    EXPECT_EQ(code_of([&] { store.fault(ctx, 7); }), Errc::not_found);
}

TEST_F(ChunkStoreTest, CorruptFileFallsBackToRecompute) {
    ChunkStore store(model, options(1 << 22, quant::kRawBitwidth));
    auto& ctx = fill(store, 1, 48, 8);
    const auto truth = store.assemble_kv(ctx);
    store.reclaim(1, std::vector<ChunkKey>{{1, 1}});
    {
        auto bytes = read_file(store.swap_path({1, 1}));
        bytes[bytes.size() / 2] ^= 0x40;
        std::ofstream(store.swap_path({1, 1}), std::ios::binary)
            .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    const auto report = store.load(ctx, LoadAssignment{{1}, {}});
    EXPECT_TRUE(report.degraded);
    EXPECT_EQ(report.fallbacks, (std::vector<std::uint32_t>{1}));
    EXPECT_LE(store.assemble_kv(ctx).max_abs_diff(truth), 1e-4f);
    // The bad file is no longer trusted.
    EXPECT_TRUE(ctx.find(1)->dirty);
    EXPECT_EQ(ctx.find(1)->residency, Residency::InMemory);
}

TEST_F(ChunkStoreTest, MissingFileWithOtherChunksOnDiskIsAContextError) {
    ChunkStore store(model, options(1 << 22));
    auto& ctx = fill(store, 1, 48, 9);
    store.reclaim(store.working_set_bytes(ctx), keys_of(ctx));
    fs::remove(store.swap_path({1, 1}));
    // Only chunk 1 is requested; it cannot be rebuilt while 0 and 2 stay on disk.
    EXPECT_EQ(code_of([&] { store.load(ctx, LoadAssignment{{1}, {}}); }), Errc::context);
    // A fault brings the others in and rebuilds the lost one.
    EXPECT_TRUE(store.fault(ctx, 1));
    EXPECT_TRUE(store.missing_chunks(ctx).empty());
}

TEST_F(ChunkStoreTest, SlideWindowDropsWholeChunks) {
    ChunkStore store(model, options(1 << 20, 8, 64));
    auto& ctx = fill(store, 1, 80, 10);
    ctx.chunks[0].dirty = false;
    store.write_swap(ctx.chunks[0]);
    ASSERT_TRUE(fs::exists(store.swap_path({1, 0})));
    const auto dropped = store.slide_window(ctx);
    ASSERT_EQ(dropped.size(), 1u);
    EXPECT_EQ(dropped[0].index, 0u);
    EXPECT_EQ(ctx.first_position, 16u);
    EXPECT_EQ(ctx.tokens.size(), 64u);
    EXPECT_EQ(ctx.density.first_position(), 16u);
    EXPECT_FALSE(fs::exists(store.swap_path({1, 0})));
    EXPECT_EQ(store.ledger().used(), 4 * kChunk8);
    EXPECT_EQ(store.assemble_kv(ctx).first_position, 16u);
    EXPECT_TRUE(store.slide_window(ctx).empty());
}

TEST_F(ChunkStoreTest, LowerBitwidthOnlyDecreases) {
    ChunkStore store(model, options(1 << 20));
    auto& ctx = fill(store, 1, 32, 11);
    store.write_swap(ctx.chunks[0]);
    EXPECT_TRUE(store.lower_bitwidth(ctx, 0, 4));
    EXPECT_EQ(ctx.chunks[0].bitwidth, 4);
    EXPECT_TRUE(ctx.chunks[0].dirty);
    EXPECT_FALSE(fs::exists(store.swap_path({1, 0})));
    EXPECT_EQ(store.ledger().used(), kChunk8 + kChunk8 / 2);
    EXPECT_FALSE(store.lower_bitwidth(ctx, 0, 8));
    EXPECT_FALSE(store.lower_bitwidth(ctx, 0, 4));
    EXPECT_TRUE(store.lower_bitwidth(ctx, 0, 2));
    EXPECT_EQ(code_of([&] { store.lower_bitwidth(ctx, 0, 3); }), Errc::argument);
}

TEST_F(ChunkStoreTest, DeleteReturnsLedgerAndRemovesFiles) {
    ChunkStore store(model, options(1 << 20));
    fill(store, 1, 32, 12);
    const auto before = store.ledger().used();
    auto& ctx = fill(store, 2, 48, 13);
    store.reclaim(kChunk8, keys_of(ctx));
    store.delete_context(2);
    EXPECT_EQ(store.ledger().used(), before);
    EXPECT_FALSE(store.has_context(2));
    EXPECT_FALSE(fs::exists(dir / "ctx-2"));
    EXPECT_EQ(code_of([&] { store.context(2); }), Errc::not_found);
}

TEST_F(ChunkStoreTest, WriteFailureSurfacesAsIoError) {
    ChunkStore store(model, options(1 << 20));
    auto& ctx = fill(store, 1, 32, 14);
    store.set_write_fault([](const ChunkKey& k) { return k.index == 1; });
    store.write_swap(ctx.chunks[0]);
    EXPECT_EQ(code_of([&] { store.write_swap(ctx.chunks[1]); }), Errc::io);
    EXPECT_TRUE(ctx.chunks[1].dirty);
    EXPECT_FALSE(fs::exists(store.swap_path({1, 1})));
}

TEST_F(ChunkStoreTest, RecoverContextFromSwapFiles) {
    std::vector<quant::QuantizedChunkPayload> before;
    std::vector<TokenId> tokens;
    {
        ChunkStore store(model, options(1 << 20));
        auto& ctx = fill(store, 4, 40, 15);
        tokens = ctx.tokens;
        for (auto& c : ctx.chunks) {
            before.push_back(*c.payload);
            store.write_swap(c);
        }
    }
    ChunkStore store(model, options(1 << 20));
    auto& ctx = store.recover_context(4, tokens, 0);
    ASSERT_EQ(ctx.chunks.size(), 3u);
    for (const auto& c : ctx.chunks) EXPECT_EQ(c.residency, Residency::OnDisk);
    store.load(ctx, LoadAssignment{{0, 1, 2}, {}});
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(*ctx.chunks[k].payload, before[k]);
}

TEST_F(ChunkStoreTest, RandomOperationsKeepBudgetAndDurability) {
    const std::size_t budget = 10 * kChunk8;
    ChunkStore store(model, options(budget, 8, 96));
    std::mt19937_64 rng(77);
    std::map<ChunkKey, quant::QuantizedChunkPayload> evicted;  // payload at eviction time
    for (CtxId id = 1; id <= 3; ++id) {
        auto& ctx = store.create_context(id);
        ctx.tokens = random_tokens(8, id);
        const auto f = tinylm::forward_full(model, ctx.tokens);
        ctx.density.update(f.attention);
        store.commit(ctx, f.kv, 0);
    }
    auto resident_order = [&] {
        std::vector<ChunkKey> keys;
        for (CtxId id : store.context_ids()) {
            for (const auto& c : store.context(id).chunks) {
                if (c.in_memory()) keys.push_back(c.key);
            }
        }
        std::shuffle(keys.begin(), keys.end(), rng);
        return keys;
    };
    auto snapshot = [&] {
        std::map<ChunkKey, quant::QuantizedChunkPayload> m;
        for (CtxId id : store.context_ids()) {
            for (const auto& c : store.context(id).chunks) {
                if (c.in_memory()) m.emplace(c.key, *c.payload);
            }
        }
        return m;
    };
    auto reclaim = [&](std::size_t bytes) {
        const auto snap = snapshot();
        const auto report = store.reclaim(bytes, resident_order());
        for (const auto& k : report.evicted) evicted[k] = snap.at(k);
    };

    for (int step = 0; step < 300; ++step) {
        const CtxId id = 1 + rng() % 3;
        auto& ctx = store.context(id);
        const int op = static_cast<int>(rng() % 4);
        try {
            if (op == 0) {  // extend: everything in, grow, commit, slide
                ctx.locked = true;
                const auto missing = store.missing_chunks(ctx);
                std::size_t need = 0;
                for (auto i : missing) need += store.chunk_bytes(*ctx.find(i));
                if (need > store.ledger().free()) reclaim(need - store.ledger().free());
                if (!missing.empty()) store.load(ctx, LoadAssignment{missing, {}});
                for (auto i : missing) {
                    EXPECT_EQ(*ctx.find(i)->payload, evicted.at({id, i}));
                }
                auto kv = store.assemble_kv(ctx);
                const std::size_t from = ctx.end_position();
                const std::size_t grow = 1 + rng() % 20;
                for (std::size_t g = 0; g < grow; ++g) {
                    const auto t = static_cast<TokenId>(1 + rng() % 255);
                    const auto s = tinylm::forward_step(model, kv, t);
                    ctx.tokens.push_back(t);
                    ctx.density.update(kv.first_position + kv.length - 1, s.attention_rows);
                }
                const auto need_commit = store.commit_bytes_needed(ctx, kv);
                if (need_commit > store.ledger().free()) reclaim(need_commit - store.ledger().free());
                store.commit(ctx, kv, from);
                store.slide_window(ctx);
                ctx.locked = false;
            } else if (op == 1) {
                reclaim(1 + rng() % (3 * kChunk8));
            } else if (op == 2 && !ctx.chunks.empty()) {
                const auto idx = ctx.chunks[rng() % ctx.chunks.size()].key.index;
                const auto* c = ctx.find(idx);
                if (!c->in_memory()) {
                    const auto bytes = store.chunk_bytes(*c);
                    if (bytes > store.ledger().free()) reclaim(bytes - store.ledger().free());
                    store.fault(ctx, idx);
                    EXPECT_EQ(*ctx.find(idx)->payload, evicted.at({id, idx}));
                }
            } else if (op == 3 && !ctx.chunks.empty()) {
                auto& c = ctx.chunks[rng() % ctx.chunks.size()];
                if (c.in_memory() && c.token_count == 16) store.lower_bitwidth(ctx, c.key.index, rng() % 2 ? 4 : 2);
            }
        } catch (const Error& e) {
            ctx.locked = false;
            EXPECT_EQ(e.code(), Errc::out_of_memory) << e.what();
        }
        ASSERT_LE(store.ledger().used(), budget);
        std::size_t held = 0;
        for (CtxId cid : store.context_ids()) {
            for (const auto& c : store.context(cid).chunks) {
                if (c.in_memory()) held += store.chunk_bytes(c);
                if (c.on_disk()) {
                    const auto file = read_file(store.swap_path(c.key));
                    ASSERT_TRUE(swapfile::crc_matches(file));
                    if (c.in_memory()) {
                        EXPECT_EQ(swapfile::decode(file).payload, *c.payload);
                    }
                }
            }
        }
        EXPECT_EQ(held, store.ledger().used());
    }
}
