// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

// Trace replay against a cost model. Each policy is a combination of chunk
// precision, eviction granularity and order, write-back timing, pipelined
// loading and working-set locking; the baselines and the ablations of the
// full design are all points in that space.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "llmctx/pipeline.hpp"
#include "llmctx/tracegen.hpp"

namespace llmctx::simulator {

/// Simulated hardware and model magnitudes (a 7B-class model by default).
struct SimCost {
    double recompute_per_token = 22.92 / 4096.0;  // seconds
    double decode_per_token = 0.05;               // seconds
    double kv_bytes_per_token = 524288.0;         // at 16-bit
    double io_bytes_per_second = 1024.0 * 1024.0 * 1024.0;
    double io_op_overhead = 1e-4;  // seconds per read or write operation
    std::size_t window = 4096;     // tokens

    /// Planner view of these costs for a given chunk size.
    pipeline::CostModel cost_model(std::size_t chunk_tokens) const;
    /// Adopts recompute and I/O slopes from a profile.
    static SimCost from_profile(const pipeline::CostModel& profile);
};

struct Policy {
    std::string name;
    int new_bits = 16;          // precision of freshly written chunks
    bool mixed = false;         // density-driven mixed bitwidths
    bool chunk_granular = true; // false: whole contexts move
    bool kill = false;          // evicted contexts are discarded, not written
    bool lctru = false;         // class-aware eviction order
    bool aot = false;           // background write-back when a call returns
    bool pipeline = false;      // recompute part of the load in parallel
    bool lock = true;           // the running context is never a victim
};

/// llms, llms-minus-{compression,pipeline,lifecycle}, lmk, swap, vllm-s, vllm-sq.
Policy policy_by_name(const std::string& name);
std::vector<std::string> policy_names();

struct ReplayOptions {
    std::string policy = "llms";
    double budget_bytes = 3.0 * 1024 * 1024 * 1024;
    std::size_t chunk_tokens = 16;
    double ratio_global = 0.5;
    SimCost cost;
    std::uint64_t seed = 0;  // synthetic chunk densities
};

struct EventMetrics {
    std::size_t index = 0;
    double time = 0.0;
    std::uint64_t ctx_id = 0;
    double switch_latency = 0.0;  // arrival to all chunks resident
    double queue_wait = 0.0;
    double write_seconds = 0.0;   // synchronous write-back on the switch path
    double load_seconds = 0.0;
    std::size_t bytes_read = 0;
    std::size_t bytes_written = 0;  // synchronous and background
    std::size_t recomputed_chunks = 0;
    std::size_t evicted_chunks = 0;
    std::size_t faults = 0;
    std::size_t context_tokens = 0;
};

struct ReplayMetrics {
    std::string policy;
    std::vector<EventMetrics> events;
    double mean = 0.0;
    double p50 = 0.0;
    double p95 = 0.0;
    double max = 0.0;
    std::size_t faults = 0;
    std::size_t bytes_read = 0;
    std::size_t bytes_written = 0;
    std::size_t recomputed_chunks = 0;
    std::size_t dirty_at_return = 0;  // dirty chunks left when calls returned
};

ReplayMetrics replay(const std::vector<tracegen::TraceEvent>& trace, const ReplayOptions& options);

/// Per-event rows, a blank line, then metric,value summary rows.
void write_csv(const ReplayMetrics& metrics, std::ostream& out);

struct SweepPoint {
    std::size_t chunk_tokens = 0;
    double mean_latency = 0.0;
};

std::vector<SweepPoint> sweep_chunk_size(const std::vector<tracegen::TraceEvent>& trace,
                                         const std::vector<std::size_t>& sizes, ReplayOptions options);
void write_sweep_csv(const std::vector<SweepPoint>& points, std::ostream& out);

/// Trace used for the chunk-size sweep: many short contexts with small
/// growth per call, so eviction granularity matters. Pair it with
/// kSweepBudgetBytes.
tracegen::TraceConfig sweep_trace_config(std::uint64_t seed = 7);
inline constexpr double kSweepBudgetBytes = 256.0 * 1024 * 1024;

/// One hour of calls every 20 s on average across six contexts with the
/// default growth ranges. With kStandardBudgetBytes the combined working set
/// does not fit but any single one does.
tracegen::TraceConfig standard_trace_config(std::uint64_t seed = 1);
inline constexpr double kStandardBudgetBytes = 2560.0 * 1024 * 1024;

/// Largest context count in [1, max_contexts] whose generated trace keeps the
/// mean switching latency within `latency_limit` seconds.
std::size_t max_active_contexts(tracegen::TraceConfig config, const ReplayOptions& options,
                                double latency_limit, std::size_t max_contexts);

}  // namespace llmctx::simulator
