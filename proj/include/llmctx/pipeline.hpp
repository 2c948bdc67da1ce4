// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

// Swap/recompute pipeline: linear cost profiles, the recompute-vs-I/O split
// planner, and the two-lane per-layer executor used while loading a context.

#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "llmctx/chunkstore.hpp"

namespace llmctx::pipeline {

struct LinearFit {
    double a = 0.0;  // intercept
    double b = 0.0;  // slope
    double r2 = 1.0;
    std::vector<std::pair<double, double>> points;  // (x, seconds)
};

/// Ordinary least squares. Needs at least 4 points with at least two distinct
/// x values; throws Errc::profiling otherwise.
LinearFit fit_linear(std::span<const std::pair<double, double>> points);

struct CostModel {
    LinearFit re;  // seconds per x recomputed chunks
    LinearFit io;  // seconds per m bytes read
    std::size_t chunk_tokens = 16;
    std::string timestamp;

    /// Both are 0 for an empty workload.
    double t_re(double chunks) const noexcept { return chunks <= 0.0 ? 0.0 : re.a + re.b * chunks; }
    double t_io(double bytes) const noexcept { return bytes <= 0.0 ? 0.0 : io.a + io.b * bytes; }

    static CostModel linear(double a_re, double b_re, double a_io, double b_io);
};

/// Source of timing measurements for profile().
class ProfileTarget {
public:
    virtual ~ProfileTarget() = default;
    virtual double time_recompute(std::size_t chunks) = 0;
    virtual double time_io(std::size_t bytes) = 0;
};

/// Returns the times of a known cost model plus optional seeded noise.
class SyntheticTimer : public ProfileTarget {
public:
    explicit SyntheticTimer(CostModel truth, double noise = 0.0, std::uint64_t seed = 0);
    double time_recompute(std::size_t chunks) override;
    double time_io(std::size_t bytes) override;

private:
    CostModel truth_;
    double noise_;
    std::uint64_t state_;
    double jitter();
};

/// Measures the toy model's recompute and real file reads.
class LiveTarget : public ProfileTarget {
public:
    LiveTarget(const tinylm::Model& model, std::size_t chunk_tokens, std::filesystem::path scratch_dir,
               int repeats = 3);
    double time_recompute(std::size_t chunks) override;
    double time_io(std::size_t bytes) override;

private:
    const tinylm::Model* model_;
    std::size_t chunk_tokens_;
    std::filesystem::path scratch_;
    int repeats_;
};

CostModel profile(ProfileTarget& target, std::span<const std::size_t> recompute_points,
                  std::span<const std::size_t> io_points);

void save_profile(const CostModel& model, const std::filesystem::path& path);
CostModel load_profile(const std::filesystem::path& path);

/// Chunks of one compression class awaiting load.
struct ChunkClass {
    double ratio = 1.0;
    std::size_t bytes = 0;  // bytes of one chunk of this class
    std::size_t count = 0;
};

struct PipelinePlan {
    std::vector<ChunkClass> classes;
    std::vector<std::size_t> recompute;  // per class, same order as classes
    double t_re = 0.0;
    double t_io = 0.0;
    double delay = 0.0;
    std::size_t io_bytes = 0;

    std::size_t total_recompute() const noexcept;
};

/// Evaluates one allocation.
PipelinePlan evaluate(const CostModel& cost, std::span<const ChunkClass> classes,
                      std::span<const std::size_t> recompute);
/// Optimal split. Ties go to fewer recomputed chunks, then to recomputing
/// heavier classes. Searches the whole grid when it has at most 10^4 points;
/// otherwise sweeps the recompute total, filling the heaviest class first.
PipelinePlan plan(const CostModel& cost, std::span<const ChunkClass> classes);
PipelinePlan plan_exhaustive(const CostModel& cost, std::span<const ChunkClass> classes);
PipelinePlan plan_sweep(const CostModel& cost, std::span<const ChunkClass> classes);
/// Continuous relaxation solved at the T_re / T_IO crossing, then rounded.
PipelinePlan plan_lp(const CostModel& cost, std::span<const ChunkClass> classes);

struct OverlapCallbacks {
    std::function<std::size_t(std::size_t layer)> read_layer;  // returns bytes read
    std::function<void(std::size_t layer)> recompute_layer;
};

struct OverlapReport {
    double wall_seconds = 0.0;
    std::size_t bytes_read = 0;
};

/// Runs reads on a dedicated I/O thread and recompute on the calling thread.
/// recompute_layer(l) starts only after read_layer(l) returned; read_layer(l+1)
/// may run while recompute_layer(l) does.
OverlapReport execute_overlapped(std::size_t layers, const OverlapCallbacks& callbacks);

/// Groups a context's missing chunks by bitwidth, heaviest class first.
std::vector<ChunkClass> missing_classes(const chunkstore::ChunkStore& store,
                                        const chunkstore::ContextState& ctx);
/// Picks concrete chunks for a plan built from missing_classes().
chunkstore::LoadAssignment assign(const chunkstore::ChunkStore& store, const chunkstore::ContextState& ctx,
                                  const PipelinePlan& plan);
/// Loads a context through a LoadSession with the two lanes overlapped.
chunkstore::LoadReport load_overlapped(chunkstore::ChunkStore& store, chunkstore::ContextState& ctx,
                                       const chunkstore::LoadAssignment& assignment);

}  // namespace llmctx::pipeline
