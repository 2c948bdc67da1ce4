// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

// Compression tolerance: attention-derived information density per chunk and
// the rank-band plan that assigns each chunk a compression ratio.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "llmctx/tinylm.hpp"

namespace llmctx::tolerance {

/// Running column sums of attention scores for one context.
///
/// A token's density is the mean of its column over the defined (causally
/// unmasked) entries of every layer and head: the column of position t over
/// R rows has L * H * (R - t) entries.
class DensityLedger {
public:
    DensityLedger() = default;
    DensityLedger(std::size_t layers, std::size_t heads, std::size_t first_position = 0);

    /// Adds every row of a batch attention matrix. The matrix must start at
    /// the ledger's next position (or the ledger must be empty).
    void update(const tinylm::AttentionMatrix& attention);
    /// Adds one new row per (layer, head) for the token at `row_position`.
    /// Each row must have one entry per tracked position up to and including
    /// `row_position`.
    void update(std::size_t row_position, std::span<const std::vector<float>> rows);

    /// Forgets the oldest `tokens` positions (sliding window).
    void drop_front(std::size_t tokens);

    std::size_t first_position() const noexcept { return first_position_; }
    std::size_t size() const noexcept { return column_sums_.size(); }
    std::size_t next_position() const noexcept { return first_position_ + size(); }

    double token_density(std::size_t position) const;
    /// D_i for consecutive chunks of `chunk_tokens` starting at first_position();
    /// a trailing partial chunk is included only when `include_partial`.
    std::vector<double> chunk_densities(std::size_t chunk_tokens, bool include_partial = true) const;

private:
    std::size_t layers_ = 0;
    std::size_t heads_ = 0;
    std::size_t first_position_ = 0;
    std::vector<double> column_sums_;
    std::vector<std::size_t> defined_counts_;
};

/// Default compression levels {8/8, 4/8, 2/8}.
std::vector<double> default_ratios();

struct CompressionPlan {
    std::vector<double> ratios;        // descending: least compressed first
    std::vector<std::size_t> counts;   // chunks per band, same order as ratios
    std::vector<double> thresholds;    // sigma_0 = 100 > sigma_1 > ... > sigma_W = 0
    double ratio_global = 1.0;
    double realized_ratio = 1.0;
    double objective = 0.0;            // sum_w (1 / ratio_w) * sum_{band w} D_i
    std::vector<std::size_t> band_of_chunk;  // input order
    std::vector<double> rank_of_chunk;       // percent in (0, 100], 100 = densest

    double ratio_of_chunk(std::size_t i) const { return ratios[band_of_chunk[i]]; }
};

/// Rank percentiles, 100 = densest. Ties rank the lower index lower.
std::vector<double> density_ranks(std::span<const double> densities);

/// Exhaustive search over band counts maximizing the weighted density sum,
/// subject to the average ratio matching `ratio_global` as closely as the
/// chunk count allows. Denser chunks always land in less-compressed bands.
CompressionPlan solve_thresholds(std::span<const double> densities, std::span<const double> ratios,
                                 double ratio_global);

/// Band index for a rank: the unique w with sigma_{w+1} < rank <= sigma_w.
std::size_t assign_band(const CompressionPlan& plan, double rank);
inline double assign_ratio(const CompressionPlan& plan, double rank) {
    return plan.ratios[assign_band(plan, rank)];
}

}  // namespace llmctx::tolerance
