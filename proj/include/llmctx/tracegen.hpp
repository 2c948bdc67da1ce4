// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic context-switching traces: Poisson arrivals with Random, Markov or
// Gaussian context selection, stored as JSON lines.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace llmctx::tracegen {

enum class Pattern { Random, Markov, Gaussian };

Pattern parse_pattern(const std::string& name);
std::string to_string(Pattern pattern);

struct TraceEvent {
    double time = 0.0;  // seconds since trace start
    std::uint64_t ctx_id = 0;
    std::string prompt;
    std::string ground_truth;

    friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

using DeltaRange = std::pair<std::size_t, std::size_t>;  // inclusive token counts

/// The six default per-context growth ranges, assigned round-robin.
std::vector<DeltaRange> default_delta_ranges();

struct TraceConfig {
    Pattern pattern = Pattern::Random;
    double rate = 1.0 / 300.0;  // events per second
    double duration = 3600.0;   // seconds; ignored when max_events > 0
    std::size_t max_events = 0;
    std::size_t contexts = 4;
    std::vector<DeltaRange> delta_ranges;  // per context; empty = defaults
    double markov_boost = 0.5;  // extra probability mass on repeating the last context
    std::uint64_t seed = 0;

    void validate() const;
    DeltaRange range_of(std::size_t ctx) const;
};

/// Selection weights of the Gaussian pattern: normal pdf of each context's
/// mean delta, centred on the midpoint of all ranges with a quarter-range sigma.
std::vector<double> gaussian_weights(const TraceConfig& config);

std::vector<TraceEvent> generate(const TraceConfig& config);

void write_jsonl(const std::vector<TraceEvent>& events, std::ostream& out);
std::vector<TraceEvent> read_jsonl(std::istream& in);
void save_trace(const std::vector<TraceEvent>& events, const std::string& path);
std::vector<TraceEvent> load_trace(const std::string& path);

/// Byte-level tokenizer shared by the simulator and the service.
std::vector<std::int32_t> tokenize(const std::string& text);
std::string detokenize(const std::vector<std::int32_t>& tokens);

}  // namespace llmctx::tracegen
