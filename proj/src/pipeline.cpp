// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

#include "llmctx/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <ctime>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "llmctx/error.hpp"

namespace llmctx::pipeline {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream out;
    out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return out.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Fitting and profiling

LinearFit fit_linear(std::span<const std::pair<double, double>> points) {
    if (points.size() < 4) {
        raise(Errc::profiling, "need at least 4 profiling points, got " + std::to_string(points.size()));
    }
    const double n = static_cast<double>(points.size());
    double mx = 0.0;
    double my = 0.0;
    for (const auto& [x, y] : points) {
        mx += x;
        my += y;
    }
    mx /= n;
    my /= n;
    double sxx = 0.0;
    double sxy = 0.0;
    double syy = 0.0;
    for (const auto& [x, y] : points) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if (!(sxx > 0.0)) raise(Errc::profiling, "profiling points share a single x value");
    LinearFit fit;
    fit.b = sxy / sxx;
    fit.a = my - fit.b * mx;
    double sse = 0.0;
    for (const auto& [x, y] : points) {
        const double r = y - (fit.a + fit.b * x);
        sse += r * r;
    }
    fit.r2 = syy > 0.0 ? 1.0 - sse / syy : (sse == 0.0 ? 1.0 : 0.0);
    fit.points.assign(points.begin(), points.end());
    return fit;
}

CostModel CostModel::linear(double a_re, double b_re, double a_io, double b_io) {
    CostModel m;
    m.re.a = a_re;
    m.re.b = b_re;
    m.io.a = a_io;
    m.io.b = b_io;
    return m;
}

SyntheticTimer::SyntheticTimer(CostModel truth, double noise, std::uint64_t seed)
    : truth_(std::move(truth)), noise_(noise), state_(seed) {}

double SyntheticTimer::jitter() {
    if (noise_ == 0.0) return 0.0;
    std::mt19937_64 gen(state_++);
    return std::uniform_real_distribution<double>(-noise_, noise_)(gen);
}

double SyntheticTimer::time_recompute(std::size_t chunks) {
    return truth_.t_re(static_cast<double>(chunks)) + jitter();
}

double SyntheticTimer::time_io(std::size_t bytes) {
    return truth_.t_io(static_cast<double>(bytes)) + jitter();
}

LiveTarget::LiveTarget(const tinylm::Model& model, std::size_t chunk_tokens, std::filesystem::path scratch_dir,
                       int repeats)
    : model_(&model), chunk_tokens_(chunk_tokens), scratch_(std::move(scratch_dir)), repeats_(std::max(1, repeats)) {
    std::filesystem::create_directories(scratch_);
}

double LiveTarget::time_recompute(std::size_t chunks) {
    if (chunks == 0) return 0.0;
    const std::size_t n = chunks * chunk_tokens_;
    if (n > model_->config().max_seq) raise(Errc::length, "profiling point exceeds the model window");
    std::vector<tinylm::TokenId> tokens(n);
    for (std::size_t i = 0; i < n; ++i) {
        tokens[i] = static_cast<tinylm::TokenId>((i * 31 + 7) % model_->config().vocab);
    }
    const auto cfg = model_->config();
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0; r < repeats_; ++r) {
        tinylm::KvTensor kv(cfg.layers, cfg.heads, cfg.head_dim, n, 0);
        std::vector<std::size_t> rows(n);
        std::iota(rows.begin(), rows.end(), 0);
        const auto start = Clock::now();
        tinylm::RowRecomputer rec(*model_, kv, rows, tokens);
        rec.run_all();
        best = std::min(best, seconds_since(start));
    }
    return best;
}

double LiveTarget::time_io(std::size_t bytes) {
    if (bytes == 0) return 0.0;
    const auto path = scratch_ / ("profile-" + std::to_string(bytes) + ".bin");
    {
        std::vector<char> data(bytes);
        for (std::size_t i = 0; i < bytes; ++i) data[i] = static_cast<char>(i * 131);
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(data.data(), static_cast<std::streamsize>(bytes));
        if (!out) raise(Errc::io, "cannot write profiling file " + path.string());
    }
    double best = std::numeric_limits<double>::infinity();
    std::vector<char> buffer(bytes);
    for (int r = 0; r < repeats_; ++r) {
        const auto start = Clock::now();
        std::ifstream in(path, std::ios::binary);
        in.read(buffer.data(), static_cast<std::streamsize>(bytes));
        if (static_cast<std::size_t>(in.gcount()) != bytes) raise(Errc::io, "short read while profiling");
        best = std::min(best, seconds_since(start));
    }
    std::error_code ec;
    std::filesystem::remove(path, ec);
    return best;
}

CostModel profile(ProfileTarget& target, std::span<const std::size_t> recompute_points,
                  std::span<const std::size_t> io_points) {
    std::vector<std::pair<double, double>> re;
    std::vector<std::pair<double, double>> io;
    for (std::size_t x : recompute_points) re.emplace_back(static_cast<double>(x), target.time_recompute(x));
    for (std::size_t m : io_points) io.emplace_back(static_cast<double>(m), target.time_io(m));
    CostModel model;
    model.re = fit_linear(re);
    model.io = fit_linear(io);
    if (!(model.re.b > 0.0)) raise(Errc::profiling, "recompute cost does not grow with the chunk count");
    if (!(model.io.b > 0.0)) raise(Errc::profiling, "I/O cost does not grow with the byte count");
    model.timestamp = utc_timestamp();
    return model;
}

void save_profile(const CostModel& model, const std::filesystem::path& path) {
    nlohmann::json j;
    j["a_re"] = model.re.a;
    j["b_re"] = model.re.b;
    j["r2_re"] = model.re.r2;
    j["points_re"] = model.re.points;
    j["a_io"] = model.io.a;
    j["b_io"] = model.io.b;
    j["r2_io"] = model.io.r2;
    j["points_io"] = model.io.points;
    j["chunk_tokens"] = model.chunk_tokens;
    j["timestamp"] = model.timestamp;
    std::ofstream out(path);
    out << j.dump(2) << '\n';
    if (!out) raise(Errc::io, "cannot write profile " + path.string());
}

CostModel load_profile(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) raise(Errc::not_found, "cannot open profile " + path.string());
    try {
        const auto j = nlohmann::json::parse(in);
        CostModel m;
        m.re.a = j.at("a_re").get<double>();
        m.re.b = j.at("b_re").get<double>();
        m.io.a = j.at("a_io").get<double>();
        m.io.b = j.at("b_io").get<double>();
        m.re.r2 = j.value("r2_re", 1.0);
        m.io.r2 = j.value("r2_io", 1.0);
        if (j.contains("points_re")) m.re.points = j["points_re"].get<std::vector<std::pair<double, double>>>();
        if (j.contains("points_io")) m.io.points = j["points_io"].get<std::vector<std::pair<double, double>>>();
        m.chunk_tokens = j.value("chunk_tokens", std::size_t{16});
        m.timestamp = j.value("timestamp", std::string{});
        return m;
    } catch (const nlohmann::json::exception& e) {
        raise(Errc::format, "malformed profile " + path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Planning

std::size_t PipelinePlan::total_recompute() const noexcept {
    return std::accumulate(recompute.begin(), recompute.end(), std::size_t{0});
}

PipelinePlan evaluate(const CostModel& cost, std::span<const ChunkClass> classes,
                      std::span<const std::size_t> recompute) {
    if (recompute.size() != classes.size()) raise(Errc::argument, "one recompute count per class expected");
    PipelinePlan p;
    p.classes.assign(classes.begin(), classes.end());
    p.recompute.assign(recompute.begin(), recompute.end());
    std::size_t x = 0;
    for (std::size_t w = 0; w < classes.size(); ++w) {
        if (recompute[w] > classes[w].count) raise(Errc::argument, "recompute count exceeds the class size");
        x += recompute[w];
        p.io_bytes += (classes[w].count - recompute[w]) * classes[w].bytes;
    }
    p.t_re = cost.t_re(static_cast<double>(x));
    p.t_io = cost.t_io(static_cast<double>(p.io_bytes));
    p.delay = std::max(p.t_re, p.t_io);
    return p;
}

namespace {

// Class indices heaviest first; ties keep input order.
std::vector<std::size_t> heavy_order(std::span<const ChunkClass> classes) {
    std::vector<std::size_t> order(classes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return classes[a].bytes > classes[b].bytes; });
    return order;
}

bool better(const PipelinePlan& a, const PipelinePlan& b, const std::vector<std::size_t>& heavy) {
    const double eps = 1e-12 * std::max({1.0, std::abs(a.delay), std::abs(b.delay)});
    if (a.delay < b.delay - eps) return true;
    if (a.delay > b.delay + eps) return false;
    const std::size_t xa = a.total_recompute();
    const std::size_t xb = b.total_recompute();
    if (xa != xb) return xa < xb;
    for (std::size_t w : heavy) {
        if (a.recompute[w] != b.recompute[w]) return a.recompute[w] > b.recompute[w];
    }
    return false;
}

std::vector<std::size_t> fill_heaviest(std::span<const ChunkClass> classes, const std::vector<std::size_t>& heavy,
                                       std::size_t k) {
    std::vector<std::size_t> x(classes.size(), 0);
    for (std::size_t w : heavy) {
        const std::size_t take = std::min(k, classes[w].count);
        x[w] = take;
        k -= take;
    }
    return x;
}

}  // namespace

PipelinePlan plan_exhaustive(const CostModel& cost, std::span<const ChunkClass> classes) {
    const auto heavy = heavy_order(classes);
    std::vector<std::size_t> x(classes.size(), 0);
    PipelinePlan best = evaluate(cost, classes, x);
    std::function<void(std::size_t)> walk = [&](std::size_t w) {
        if (w == classes.size()) {
            auto p = evaluate(cost, classes, x);
            if (better(p, best, heavy)) best = std::move(p);
            return;
        }
        for (std::size_t c = 0; c <= classes[w].count; ++c) {
            x[w] = c;
            walk(w + 1);
        }
        x[w] = 0;
    };
    walk(0);
    return best;
}

PipelinePlan plan_sweep(const CostModel& cost, std::span<const ChunkClass> classes) {
    const auto heavy = heavy_order(classes);
    std::size_t total = 0;
    for (const auto& c : classes) total += c.count;
    PipelinePlan best = evaluate(cost, classes, fill_heaviest(classes, heavy, 0));
    for (std::size_t k = 1; k <= total; ++k) {
        auto p = evaluate(cost, classes, fill_heaviest(classes, heavy, k));
        if (better(p, best, heavy)) best = std::move(p);
    }
    return best;
}

PipelinePlan plan(const CostModel& cost, std::span<const ChunkClass> classes) {
    double grid = 1.0;
    for (const auto& c : classes) grid *= static_cast<double>(c.count + 1);
    return grid <= 1e4 ? plan_exhaustive(cost, classes) : plan_sweep(cost, classes);
}

PipelinePlan plan_lp(const CostModel& cost, std::span<const ChunkClass> classes) {
    const auto heavy = heavy_order(classes);
    std::size_t total = 0;
    double m = 0.0;
    for (const auto& c : classes) {
        total += c.count;
        m += static_cast<double>(c.count * c.bytes);
    }
    // Bytes taken off the I/O lane by recomputing X chunks, fractionally.
    auto removed = [&](double x) {
        double r = 0.0;
        for (std::size_t w : heavy) {
            const double take = std::min(x, static_cast<double>(classes[w].count));
            r += take * static_cast<double>(classes[w].bytes);
            x -= take;
            if (x <= 0.0) break;
        }
        return r;
    };
    auto gap = [&](double x) {
        return (cost.re.a + cost.re.b * x) - (cost.io.a + cost.io.b * (m - removed(x)));
    };
    double lo = 0.0;
    double hi = static_cast<double>(total);
    double x_star = 0.0;
    if (total == 0 || gap(0.0) >= 0.0) {
        x_star = 0.0;
    } else if (gap(hi) <= 0.0) {
        x_star = hi;
    } else {
        for (int i = 0; i < 200; ++i) {
            const double mid = 0.5 * (lo + hi);
            (gap(mid) < 0.0 ? lo : hi) = mid;
        }
        x_star = 0.5 * (lo + hi);
    }
    const auto down = static_cast<std::size_t>(std::floor(x_star));
    const std::size_t up = std::min(total, down + 1);
    PipelinePlan a = evaluate(cost, classes, fill_heaviest(classes, heavy, down));
    PipelinePlan b = evaluate(cost, classes, fill_heaviest(classes, heavy, up));
    return better(b, a, heavy) ? b : a;
}

// ---------------------------------------------------------------------------
// Execution

OverlapReport execute_overlapped(std::size_t layers, const OverlapCallbacks& callbacks) {
    OverlapReport report;
    const auto start = Clock::now();
    std::mutex mutex;
    std::condition_variable cv;
    std::size_t ready = 0;
    bool io_failed = false;
    std::exception_ptr io_error;

    std::thread io([&] {
        try {
            for (std::size_t l = 0; l < layers; ++l) {
                const std::size_t bytes = callbacks.read_layer ? callbacks.read_layer(l) : 0;
                std::lock_guard lock(mutex);
                report.bytes_read += bytes;
                ready = l + 1;
                cv.notify_all();
            }
        } catch (...) {
            std::lock_guard lock(mutex);
            io_error = std::current_exception();
            io_failed = true;
            cv.notify_all();
        }
    });

    try {
        for (std::size_t l = 0; l < layers; ++l) {
            {
                std::unique_lock lock(mutex);
                cv.wait(lock, [&] { return ready > l || io_failed; });
                if (io_failed) break;
            }
            if (callbacks.recompute_layer) callbacks.recompute_layer(l);
        }
    } catch (...) {
        io.join();
        throw;
    }
    io.join();
    if (io_error) std::rethrow_exception(io_error);
    report.wall_seconds = seconds_since(start);
    return report;
}

std::vector<ChunkClass> missing_classes(const chunkstore::ChunkStore& store, const chunkstore::ContextState& ctx) {
    std::map<std::pair<int, std::size_t>, std::size_t, std::greater<>> groups;  // (bits, bytes) -> count
    for (const auto& c : ctx.chunks) {
        if (!c.in_memory()) ++groups[{c.bitwidth, store.chunk_bytes(c)}];
    }
    std::vector<ChunkClass> out;
    for (const auto& [key, count] : groups) out.push_back({key.first / 8.0, key.second, count});
    std::stable_sort(out.begin(), out.end(), [](const ChunkClass& a, const ChunkClass& b) { return a.bytes > b.bytes; });
    return out;
}

chunkstore::LoadAssignment assign(const chunkstore::ChunkStore& store, const chunkstore::ContextState& ctx,
                                  const PipelinePlan& plan) {
    chunkstore::LoadAssignment a;
    std::vector<std::size_t> left = plan.recompute;
    for (const auto& c : ctx.chunks) {
        if (c.in_memory()) continue;
        const std::size_t bytes = store.chunk_bytes(c);
        const double ratio = c.bitwidth / 8.0;
        bool rebuilt = false;
        for (std::size_t w = 0; w < plan.classes.size(); ++w) {
            if (plan.classes[w].bytes == bytes && plan.classes[w].ratio == ratio && left[w] > 0) {
                --left[w];
                rebuilt = true;
                break;
            }
        }
        (rebuilt ? a.recompute : a.io).push_back(c.key.index);
    }
    return a;
}

chunkstore::LoadReport load_overlapped(chunkstore::ChunkStore& store, chunkstore::ContextState& ctx,
                                       const chunkstore::LoadAssignment& assignment) {
    const auto start = Clock::now();
    chunkstore::LoadSession session(store, ctx, assignment);
    if (!assignment.empty()) {
        OverlapCallbacks cb;
        if (!assignment.io.empty()) cb.read_layer = [&](std::size_t l) { return session.read_layer(l); };
        if (!assignment.recompute.empty()) cb.recompute_layer = [&](std::size_t l) { session.recompute_layer(l); };
        execute_overlapped(session.layers(), cb);
    }
    auto report = session.finish();
    report.wall_seconds = seconds_since(start);
    return report;
}

}  // namespace llmctx::pipeline
