// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

#include "llmctx/tolerance.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>

#include "llmctx/error.hpp"

namespace llmctx::tolerance {

DensityLedger::DensityLedger(std::size_t layers, std::size_t heads, std::size_t first_position)
    : layers_(layers), heads_(heads), first_position_(first_position) {}

void DensityLedger::update(const tinylm::AttentionMatrix& attention) {
    if (attention.layers != layers_ || attention.heads != heads_) {
        raise(Errc::consistency, "attention matrix shape does not match the ledger");
    }
    if (size() == 0 && column_sums_.empty()) first_position_ = attention.first_position;
    if (attention.first_position != next_position()) {
        raise(Errc::consistency, "attention matrix does not continue the ledger");
    }
    const std::size_t base = size();
    column_sums_.resize(base + attention.rows, 0.0);
    defined_counts_.resize(base + attention.rows, 0);
    for (std::size_t l = 0; l < layers_; ++l) {
        for (std::size_t h = 0; h < heads_; ++h) {
            for (std::size_t r = 0; r < attention.rows; ++r) {
                for (std::size_t c = 0; c <= r; ++c) {
                    column_sums_[base + c] += attention.at(l, h, r, c);
                    ++defined_counts_[base + c];
                }
            }
        }
    }
}

void DensityLedger::update(std::size_t row_position, std::span<const std::vector<float>> rows) {
    if (rows.size() != layers_ * heads_) {
        raise(Errc::consistency, "expected one attention row per layer and head");
    }
    if (row_position < first_position_ || row_position > next_position()) {
        raise(Errc::consistency, "attention row for an untracked position");
    }
    const std::size_t width = row_position - first_position_ + 1;
    for (const auto& row : rows) {
        if (row.size() != width) {
            raise(Errc::consistency, "attention row has " + std::to_string(row.size()) +
                                         " entries, expected " + std::to_string(width));
        }
    }
    if (row_position == next_position()) {
        column_sums_.push_back(0.0);
        defined_counts_.push_back(0);
    }
    for (const auto& row : rows) {
        for (std::size_t c = 0; c < width; ++c) {
            column_sums_[c] += row[c];
            ++defined_counts_[c];
        }
    }
}

void DensityLedger::drop_front(std::size_t tokens) {
    tokens = std::min(tokens, size());
    column_sums_.erase(column_sums_.begin(), column_sums_.begin() + static_cast<std::ptrdiff_t>(tokens));
    defined_counts_.erase(defined_counts_.begin(),
                          defined_counts_.begin() + static_cast<std::ptrdiff_t>(tokens));
    first_position_ += tokens;
}

double DensityLedger::token_density(std::size_t position) const {
    if (position < first_position_ || position >= next_position()) {
        raise(Errc::argument, "position " + std::to_string(position) + " is not tracked");
    }
    const std::size_t i = position - first_position_;
    return defined_counts_[i] == 0 ? 0.0 : column_sums_[i] / static_cast<double>(defined_counts_[i]);
}

std::vector<double> DensityLedger::chunk_densities(std::size_t chunk_tokens,
                                                   bool include_partial) const {
    if (chunk_tokens == 0) raise(Errc::argument, "chunk size must be positive");
    std::vector<double> out;
    for (std::size_t start = 0; start < size(); start += chunk_tokens) {
        const std::size_t end = std::min(size(), start + chunk_tokens);
        if (end - start < chunk_tokens && !include_partial) break;
        double sum = 0.0;
        for (std::size_t i = start; i < end; ++i) sum += token_density(first_position_ + i);
        out.push_back(sum / static_cast<double>(end - start));
    }
    return out;
}

std::vector<double> default_ratios() { return {1.0, 0.5, 0.25}; }

std::vector<double> density_ranks(std::span<const double> densities) {
    const std::size_t n = densities.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    // Ascending density; on ties the lower (older) index sorts first and so
    // ranks lower.
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return densities[a] < densities[b]; });
    std::vector<double> ranks(n);
    for (std::size_t pos = 0; pos < n; ++pos) {
        ranks[order[pos]] = 100.0 * static_cast<double>(pos + 1) / static_cast<double>(n);
    }
    return ranks;
}

CompressionPlan solve_thresholds(std::span<const double> densities, std::span<const double> ratios,
                                 double ratio_global) {
    const std::size_t n = densities.size();
    if (n == 0) raise(Errc::planning, "no chunks to plan");
    if (ratios.empty()) raise(Errc::planning, "no compression ratios given");
    std::vector<double> levels(ratios.begin(), ratios.end());
    std::sort(levels.begin(), levels.end(), std::greater<>());
    for (double r : levels) {
        if (!(r > 0.0) || r > 1.0) raise(Errc::planning, "ratios must lie in (0, 1]");
    }
    if (std::adjacent_find(levels.begin(), levels.end()) != levels.end()) {
        raise(Errc::planning, "ratios must be distinct");
    }
    const double lo = levels.back();
    const double hi = levels.front();
    if (!(ratio_global >= lo && ratio_global <= hi)) {
        std::ostringstream msg;
        msg << "global ratio " << ratio_global << " is outside the attainable interval [" << lo
            << ", " << hi << "]";
        raise(Errc::planning, msg.str());
    }

    // Densest first; prefix[k] = sum of the k densest.
    std::vector<double> sorted(densities.begin(), densities.end());
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    std::vector<double> prefix(n + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + sorted[i];

    const std::size_t w_count = levels.size();
    const double target = ratio_global * static_cast<double>(n);
    std::vector<std::size_t> counts(w_count, 0), best_counts;
    double best_dev = std::numeric_limits<double>::infinity();
    double best_obj = -std::numeric_limits<double>::infinity();
    constexpr double kDevTol = 1e-9;

    // Enumerate compositions of n into w_count bands, denser bands first.
    std::function<void(std::size_t, std::size_t, double, double)> walk =
        [&](std::size_t band, std::size_t used, double mass, double obj) {
            if (band + 1 == w_count) {
                counts[band] = n - used;
                const double m = mass + levels[band] * static_cast<double>(counts[band]);
                const double o = obj + (prefix[n] - prefix[used]) / levels[band];
                const double dev = std::abs(m - target);
                if (dev < best_dev - kDevTol || (dev <= best_dev + kDevTol && o > best_obj)) {
                    best_dev = std::min(best_dev, dev);
                    best_obj = o;
                    best_counts = counts;
                }
                return;
            }
            for (std::size_t c = n - used + 1; c-- > 0;) {
                counts[band] = c;
                walk(band + 1, used + c, mass + levels[band] * static_cast<double>(c),
                     obj + (prefix[used + c] - prefix[used]) / levels[band]);
            }
        };
    walk(0, 0, 0.0, 0.0);

    CompressionPlan plan;
    plan.ratios = levels;
    plan.counts = best_counts;
    plan.ratio_global = ratio_global;
    plan.objective = best_obj;
    double mass = 0.0;
    for (std::size_t w = 0; w < w_count; ++w) mass += levels[w] * static_cast<double>(best_counts[w]);
    plan.realized_ratio = mass / static_cast<double>(n);

    plan.thresholds.resize(w_count + 1);
    std::size_t above = 0;
    plan.thresholds[0] = 100.0;
    for (std::size_t w = 0; w < w_count; ++w) {
        above += best_counts[w];
        plan.thresholds[w + 1] = 100.0 * static_cast<double>(n - above) / static_cast<double>(n);
    }

    plan.rank_of_chunk = density_ranks(densities);
    plan.band_of_chunk.resize(n);
    for (std::size_t i = 0; i < n; ++i) plan.band_of_chunk[i] = assign_band(plan, plan.rank_of_chunk[i]);
    return plan;
}

std::size_t assign_band(const CompressionPlan& plan, double rank) {
    if (!(rank > 0.0 && rank <= 100.0)) {
        raise(Errc::argument, "rank must lie in (0, 100]");
    }
    for (std::size_t w = 0; w + 1 < plan.thresholds.size(); ++w) {
        if (plan.thresholds[w + 1] < rank && rank <= plan.thresholds[w]) return w;
    }
    return plan.ratios.size() - 1;
}

}  // namespace llmctx::tolerance
