// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <mutex>
#include <random>
#include <thread>

#include "llmctx/error.hpp"
#include "llmctx/pipeline.hpp"

using namespace llmctx;
using namespace llmctx::pipeline;
namespace fs = std::filesystem;

namespace {

fs::path tmp_root() {
    if (const char* env = std::getenv("LLMCTX_TEST_TMP")) return env;
    return fs::temp_directory_path() / "llmctx-tests";
}

struct Best {
    double delay = 1e300;
    std::vector<std::size_t> recompute;
};

// Every allocation of up to three classes, scored from scratch.
Best oracle(const CostModel& cost, const std::vector<ChunkClass>& classes) {
    Best best;
    std::vector<std::size_t> x(classes.size(), 0);
    std::function<void(std::size_t)> walk = [&](std::size_t w) {
        if (w == classes.size()) {
            std::size_t n = 0;
            double bytes = 0.0;
            for (std::size_t i = 0; i < classes.size(); ++i) {
                n += x[i];
                bytes += static_cast<double>((classes[i].count - x[i]) * classes[i].bytes);
            }
            const double re = n == 0 ? 0.0 : cost.re.a + cost.re.b * static_cast<double>(n);
            const double io = bytes == 0.0 ? 0.0 : cost.io.a + cost.io.b * bytes;
            const double d = std::max(re, io);
            if (d < best.delay) best = {d, x};
            return;
        }
        for (std::size_t k = 0; k <= classes[w].count; ++k) {
            x[w] = k;
            walk(w + 1);
        }
    };
    walk(0);
    return best;
}

std::vector<ChunkClass> classes_of(std::size_t a, std::size_t b, std::size_t c, std::size_t base = 1000000) {
    return {{1.0, base, a}, {0.5, base / 2, b}, {0.25, base / 4, c}};
}

}  // namespace

TEST(Fit, ExactLineAndNormalEquations) {
    std::vector<std::pair<double, double>> exact;
    for (double x : {1.0, 2.0, 4.0, 8.0}) exact.emplace_back(x, 0.1 * x);
    const auto f = fit_linear(exact);
    EXPECT_NEAR(f.b, 0.1, 1e-9);
    EXPECT_NEAR(f.a, 0.0, 1e-9);
    EXPECT_NEAR(f.r2, 1.0, 1e-12);

    const std::vector<std::pair<double, double>> noisy = {{1, 0.31}, {2, 0.38}, {3, 0.62}, {5, 0.93}};
    // Cramer's rule on the 2x2 normal equations.
    double n = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (auto [x, y] : noisy) {
        n += 1;
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    const double det = n * sxx - sx * sx;
    const double a = (sy * sxx - sx * sxy) / det;
    const double b = (n * sxy - sx * sy) / det;
    const auto g = fit_linear(noisy);
    EXPECT_NEAR(g.a, a, 1e-12);
    EXPECT_NEAR(g.b, b, 1e-12);
    EXPECT_LT(g.r2, 1.0);
    EXPECT_GT(g.r2, 0.9);

    try {
        fit_linear(std::vector<std::pair<double, double>>{{2, 1}, {2, 2}, {2, 3}, {2, 4}});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::profiling);
    }
    EXPECT_THROW(fit_linear(std::vector<std::pair<double, double>>{{1, 1}, {2, 2}, {3, 3}}), Error);
}

TEST(Profile, SyntheticTimerRoundTripsThroughJson) {
    SyntheticTimer exact(CostModel::linear(0.0, 0.1, 0.002, 1e-8));
    const std::vector<std::size_t> re = {1, 2, 4, 8};
    const std::vector<std::size_t> io = {4096, 8192, 16384, 65536};
    auto m = profile(exact, re, io);
    EXPECT_NEAR(m.re.b, 0.1, 1e-9);
    EXPECT_NEAR(m.io.b, 1e-8, 1e-15);
    EXPECT_NEAR(m.io.a, 0.002, 1e-9);
    EXPECT_FALSE(m.timestamp.empty());

    SyntheticTimer noisy(CostModel::linear(0.0, 0.1, 0.002, 1e-8), 0.05, 7);
    const auto n = profile(noisy, re, io);
    EXPECT_NEAR(n.re.b, 0.1, 0.02);
    EXPECT_LE(n.re.r2, 1.0);

    fs::create_directories(tmp_root());
    const auto path = tmp_root() / "profile.json";
    save_profile(m, path);
    const auto back = load_profile(path);
    EXPECT_EQ(back.re.a, m.re.a);
    EXPECT_EQ(back.re.b, m.re.b);
    EXPECT_EQ(back.io.b, m.io.b);
    EXPECT_EQ(back.re.points, m.re.points);
    EXPECT_EQ(back.timestamp, m.timestamp);
    EXPECT_THROW(load_profile(tmp_root() / "absent.json"), Error);

    SyntheticTimer flat(CostModel::linear(0.5, 0.0, 0.0, 1e-8));
    EXPECT_THROW(profile(flat, re, io), Error);
}

TEST(Plan, WorkedInstance) {
    const auto cost = CostModel::linear(0.0, 0.1, 0.0, 0.01 / 1e6);
    const auto classes = classes_of(8, 8, 16);
    const auto truth = oracle(cost, classes);
    EXPECT_NEAR(truth.delay, 0.15, 1e-12);
    EXPECT_EQ(truth.recompute, (std::vector<std::size_t>{1, 0, 0}));

    const auto p = plan(cost, classes);
    EXPECT_EQ(p.recompute, truth.recompute);
    EXPECT_NEAR(p.delay, 0.15, 1e-12);
    EXPECT_NEAR(p.t_re, 0.1, 1e-12);
    EXPECT_EQ(p.io_bytes, 15000000u);
    EXPECT_EQ(plan_lp(cost, classes).recompute, truth.recompute);
}

TEST(Plan, LimitCases) {
    const auto classes = classes_of(8, 8, 16);
    const auto no_accel = CostModel::linear(0.0, 1e9, 0.0, 1e-8);
    const auto p = plan(no_accel, classes);
    EXPECT_EQ(p.total_recompute(), 0u);
    EXPECT_DOUBLE_EQ(p.delay, no_accel.t_io(16e6));

    const auto empty = plan(no_accel, std::vector<ChunkClass>{});
    EXPECT_EQ(empty.delay, 0.0);
    EXPECT_TRUE(empty.recompute.empty());
    const auto zero = plan(no_accel, classes_of(0, 0, 0));
    EXPECT_EQ(zero.delay, 0.0);
    EXPECT_EQ(zero.io_bytes, 0u);

    EXPECT_THROW(evaluate(no_accel, classes, std::vector<std::size_t>{9, 0, 0}), Error);
    EXPECT_THROW(evaluate(no_accel, classes, std::vector<std::size_t>{1}), Error);
}

TEST(Plan, MatchesExhaustiveSearchUpTo64Chunks) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    int instances = 0;
    for (int rep = 0; rep < 400; ++rep) {
        const std::size_t a = rng() % 25;
        const std::size_t b = rng() % 25;
        const std::size_t c = rng() % (65 - a - b > 24 ? 25 : 65 - a - b);
        const auto classes = classes_of(a, b, c, 4096 * (1 + rng() % 64));
        const auto cost = CostModel::linear(0.05 * u(rng), 0.001 + 0.2 * u(rng), 0.02 * u(rng), 1e-9 + 1e-7 * u(rng));
        const auto truth = oracle(cost, classes);
        const auto p = plan(cost, classes);
        ASSERT_EQ(p.delay, truth.delay) << a << " " << b << " " << c;
        EXPECT_EQ(evaluate(cost, classes, p.recompute).delay, p.delay);
        // The sweep and the relaxation agree with the grid on these sizes too.
        EXPECT_EQ(plan_sweep(cost, classes).delay, truth.delay);
        EXPECT_EQ(plan_lp(cost, classes).delay, truth.delay);
        ++instances;
    }
    EXPECT_EQ(instances, 400);
}

TEST(Plan, DelayIsMonotone) {
    std::mt19937_64 rng(3);
    for (int rep = 0; rep < 100; ++rep) {
        const double b_io = 1e-8 * (1 + rng() % 10);
        const auto cost = CostModel::linear(0.01, 0.05, 0.001, b_io);
        const auto costlier = CostModel::linear(0.01, 0.05, 0.001, 2 * b_io);
        const std::size_t a = rng() % 10, b = rng() % 10, c = rng() % 10;
        const double d = plan(cost, classes_of(a, b, c)).delay;
        EXPECT_LE(d, plan(cost, classes_of(a + 1, b, c)).delay);
        EXPECT_LE(d, plan(cost, classes_of(a, b, c + 1)).delay);
        EXPECT_LE(d, plan(costlier, classes_of(a, b, c)).delay);
    }
}

TEST(Plan, LargeGridsUseTheSweep) {
    const auto cost = CostModel::linear(0.0, 0.01, 0.0, 1e-8);
    const auto classes = classes_of(100, 100, 100, 65536);
    const auto p = plan(cost, classes);
    EXPECT_EQ(p.delay, plan_sweep(cost, classes).delay);
    EXPECT_LE(p.delay, plan_exhaustive(cost, classes).delay + 1e-12);
}

TEST(Overlap, ComputeWaitsForItsLayer) {
    using namespace std::chrono;
    const auto t0 = steady_clock::now();
    std::mutex m;
    std::vector<double> read_done(6), compute_start(6);
    auto now = [&] { return duration<double>(steady_clock::now() - t0).count(); };
    OverlapCallbacks cb;
    cb.read_layer = [&](std::size_t l) {
        std::this_thread::sleep_for(milliseconds(25));
        std::lock_guard g(m);
        read_done[l] = now();
        return std::size_t{100};
    };
    cb.recompute_layer = [&](std::size_t l) {
        {
            std::lock_guard g(m);
            compute_start[l] = now();
        }
        std::this_thread::sleep_for(milliseconds(25));
    };
    const auto r = execute_overlapped(6, cb);
    EXPECT_EQ(r.bytes_read, 600u);
    for (std::size_t l = 0; l < 6; ++l) EXPECT_GE(compute_start[l], read_done[l]);
    // Serial would be 0.30 s; overlapped is about 0.175 s.
    EXPECT_LT(r.wall_seconds, 0.27);
    EXPECT_GE(r.wall_seconds, 0.15);
}

TEST(Overlap, SingleLanesAndErrors) {
    using namespace std::chrono;
    OverlapCallbacks io_only;
    io_only.read_layer = [](std::size_t) {
        std::this_thread::sleep_for(milliseconds(10));
        return std::size_t{1};
    };
    const auto r = execute_overlapped(4, io_only);
    EXPECT_EQ(r.bytes_read, 4u);
    EXPECT_GE(r.wall_seconds, 0.04);
    EXPECT_LT(r.wall_seconds, 0.04 * 1.5 + 0.02);

    OverlapCallbacks broken;
    broken.read_layer = [](std::size_t l) -> std::size_t {
        if (l == 1) raise(Errc::io, "disk gone");
        return 1;
    };
    std::size_t computed = 0;
    broken.recompute_layer = [&](std::size_t) { ++computed; };
    EXPECT_THROW(execute_overlapped(3, broken), Error);
    EXPECT_LE(computed, 1u);
}

class PipelineLoad : public ::testing::Test {
protected:
    void SetUp() override {
        dir = tmp_root() / ("pipeline-" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir);
    }
    tinylm::Model model{tinylm::Config{}};
    fs::path dir;
};

TEST_F(PipelineLoad, PlannedMixedLoadIsExact) {
    chunkstore::StoreOptions o;
    o.budget_bytes = 1 << 22;
    o.base_bitwidth = quant::kRawBitwidth;
    o.swap_dir = dir;
    chunkstore::ChunkStore store(model, o);
    auto& ctx = store.create_context(1);
    std::mt19937_64 rng(5);
    for (int i = 0; i < 64; ++i) ctx.tokens.push_back(static_cast<tinylm::TokenId>(1 + rng() % 255));
    const auto f = tinylm::forward_full(model, ctx.tokens);
    ctx.density.update(f.attention);
    store.commit(ctx, f.kv, 0);
    const auto truth = store.assemble_kv(ctx);

    std::vector<chunkstore::ChunkKey> all;
    for (const auto& c : ctx.chunks) all.push_back(c.key);
    store.reclaim(store.working_set_bytes(ctx), all);

    const auto classes = missing_classes(store, ctx);
    ASSERT_EQ(classes.size(), 1u);
    EXPECT_EQ(classes[0].count, 4u);
    // Recompute and I/O priced so that two of each is best.
    const double bytes = static_cast<double>(classes[0].bytes);
    const auto cost = CostModel::linear(0.0, 1.0, 0.0, 1.0 / bytes);
    const auto p = plan(cost, classes);
    EXPECT_EQ(p.total_recompute(), 2u);
    const auto a = assign(store, ctx, p);
    EXPECT_EQ(a.recompute.size(), 2u);
    EXPECT_EQ(a.io.size(), 2u);

    const auto report = load_overlapped(store, ctx, a);
    EXPECT_EQ(report.chunks_read, 2u);
    EXPECT_EQ(report.chunks_recomputed, 2u);
    EXPECT_FALSE(report.degraded);
    std::size_t payload = 0;
    for (auto i : a.io) payload += ctx.chunks[i].payload->packed.size();
    EXPECT_EQ(report.payload_bytes_read, payload);
    EXPECT_LE(store.assemble_kv(ctx).max_abs_diff(truth), 1e-4f);
    EXPECT_TRUE(missing_classes(store, ctx).empty());
}

TEST_F(PipelineLoad, LiveProfileIsSane) {
    pipeline::LiveTarget target(model, 16, dir, 2);
    const std::vector<std::size_t> re = {1, 2, 4, 8};
    const std::vector<std::size_t> io = {1 << 16, 1 << 18, 1 << 20, 1 << 21};
    const auto m = profile(target, re, io);
    EXPECT_GT(m.re.b, 0.0);
    EXPECT_GT(m.io.b, 0.0);
}
