// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

#include "llmctx/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <tuple>

#include "llmctx/error.hpp"
#include "llmctx/tolerance.hpp"

namespace llmctx::simulator {

pipeline::CostModel SimCost::cost_model(std::size_t chunk_tokens) const {
    auto m = pipeline::CostModel::linear(0.0, recompute_per_token * static_cast<double>(chunk_tokens),
                                         io_op_overhead, 1.0 / io_bytes_per_second);
    m.chunk_tokens = chunk_tokens;
    return m;
}

SimCost SimCost::from_profile(const pipeline::CostModel& profile) {
    if (!(profile.re.b > 0.0) || !(profile.io.b > 0.0) || profile.chunk_tokens == 0) {
        raise(Errc::argument, "profile needs positive slopes and a chunk size");
    }
    SimCost c;
    c.recompute_per_token = profile.re.b / static_cast<double>(profile.chunk_tokens);
    c.io_bytes_per_second = 1.0 / profile.io.b;
    c.io_op_overhead = std::max(0.0, profile.io.a);
    return c;
}

std::vector<std::string> policy_names() {
    return {"llms", "llms-minus-compression", "llms-minus-pipeline", "llms-minus-lifecycle",
            "lmk",  "swap",                   "vllm-s",              "vllm-sq"};
}

Policy policy_by_name(const std::string& name) {
    Policy llms{name, 8, true, true, false, true, true, true, true};
    if (name == "llms") return llms;
    if (name == "llms-minus-compression") {
        llms.mixed = false;
        return llms;
    }
    if (name == "llms-minus-pipeline") {
        llms.pipeline = false;
        return llms;
    }
    if (name == "llms-minus-lifecycle") {
        llms.lctru = false;
        llms.aot = false;
        llms.lock = false;
        return llms;
    }
    if (name == "lmk") return {name, 16, false, false, true, false, false, false, true};
    if (name == "swap") return {name, 16, false, false, false, false, false, false, true};
    if (name == "vllm-s") return {name, 16, false, true, false, false, false, false, true};
    if (name == "vllm-sq") return {name, 8, false, true, false, false, false, false, true};
    raise(Errc::argument, "unknown policy '" + name + "'");
}

namespace {

struct SimChunk {
    std::size_t index = 0;
    std::size_t tokens = 0;
    int bits = 16;
    bool resident = false;
    bool on_disk = false;
    bool dirty = false;
    bool lost = false;  // discarded; only recompute can restore it
    std::uint64_t last_access = 0;
};

struct SimContext {
    std::uint64_t id = 0;
    std::size_t first_pos = 0;
    std::vector<SimChunk> chunks;
    std::uint64_t last_used = 0;

    std::size_t length() const {
        std::size_t n = 0;
        for (const auto& c : chunks) n += c.tokens;
        return n;
    }
};

std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

double chunk_density(std::uint64_t seed, std::uint64_t ctx, std::size_t index) {
    const std::uint64_t h = mix(mix(mix(seed) ^ ctx) ^ index);
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double percentile(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
    return v[std::min(v.size() - 1, rank == 0 ? 0 : rank - 1)];
}

class Replayer {
public:
    Replayer(const ReplayOptions& options) : opt_(options), policy_(policy_by_name(options.policy)) {
        if (opt_.chunk_tokens == 0) raise(Errc::argument, "chunk size must be positive");
        if (!(opt_.budget_bytes > 0.0)) raise(Errc::argument, "memory budget must be positive");
        cost_model_ = opt_.cost.cost_model(opt_.chunk_tokens);
    }

    ReplayMetrics run(const std::vector<tracegen::TraceEvent>& trace) {
        ReplayMetrics out;
        out.policy = policy_.name;
        for (std::size_t i = 0; i < trace.size(); ++i) out.events.push_back(step(i, trace[i], out));
        std::vector<double> lat;
        for (const auto& e : out.events) {
            lat.push_back(e.switch_latency);
            out.faults += e.faults;
            out.bytes_read += e.bytes_read;
            out.bytes_written += e.bytes_written;
            out.recomputed_chunks += e.recomputed_chunks;
        }
        if (!lat.empty()) {
            double sum = 0.0;
            for (double v : lat) sum += v;
            out.mean = sum / static_cast<double>(lat.size());
            out.p50 = percentile(lat, 0.5);
            out.p95 = percentile(lat, 0.95);
            out.max = *std::max_element(lat.begin(), lat.end());
        }
        return out;
    }

private:
    double bytes_of(std::size_t tokens, int bits) const {
        return std::floor(static_cast<double>(tokens) * opt_.cost.kv_bytes_per_token * bits / 16.0);
    }
    double bytes_of(const SimChunk& c) const { return bytes_of(c.tokens, c.bits); }

    double io_time(double bytes, std::size_t ops) const {
        return static_cast<double>(ops) * opt_.cost.io_op_overhead + bytes / opt_.cost.io_bytes_per_second;
    }

    // Runs one disk operation no earlier than `at`; returns its end time.
    double disk_op(double at, double bytes, std::size_t ops) {
        const double begin = std::max(at, disk_free_);
        disk_free_ = begin + io_time(bytes, ops);
        return disk_free_;
    }

    void drop_front(SimContext& ctx, std::size_t target_end) {
        const std::size_t t = opt_.chunk_tokens;
        while (!ctx.chunks.empty() && ctx.chunks.front().tokens == t &&
               target_end - ctx.first_pos >= opt_.cost.window + t) {
            if (ctx.chunks.front().resident) used_ -= bytes_of(ctx.chunks.front());
            ctx.chunks.erase(ctx.chunks.begin());
            ctx.first_pos += t;
        }
    }

    // Frees `to_free` bytes; returns the time the switch path is done writing.
    double evict(SimContext& own, double to_free, double now, EventMetrics& m) {
        if (to_free <= 0.0) return now;
        double freed = 0.0;
        double cursor = now;
        if (!policy_.chunk_granular) {
            std::vector<SimContext*> order;
            for (auto& [id, c] : contexts_) {
                if (&c != &own) order.push_back(&c);
            }
            std::sort(order.begin(), order.end(), [](const SimContext* a, const SimContext* b) {
                return std::tie(a->last_used, a->id) < std::tie(b->last_used, b->id);
            });
            for (SimContext* victim : order) {
                if (freed >= to_free) break;
                double bytes = 0.0;
                std::size_t count = 0;
                for (auto& c : victim->chunks) {
                    if (!c.resident) continue;
                    bytes += bytes_of(c);
                    ++count;
                }
                if (count == 0) continue;
                if (!policy_.kill) {
                    // Whole-context swap writes everything it holds.
                    cursor = disk_op(cursor, bytes, 1);
                    m.bytes_written += static_cast<std::size_t>(bytes);
                }
                for (auto& c : victim->chunks) {
                    if (!c.resident) continue;
                    c.resident = false;
                    c.dirty = false;
                    c.on_disk = !policy_.kill;
                    c.lost = policy_.kill;
                }
                used_ -= bytes;
                freed += bytes;
                m.evicted_chunks += count;
            }
        } else {
            using Key = std::tuple<int, std::uint64_t, std::uint64_t, std::size_t>;
            std::vector<std::pair<Key, SimChunk*>> order;
            for (auto& [id, c] : contexts_) {
                if (&c == &own && policy_.lock) continue;
                for (auto& ch : c.chunks) {
                    if (!ch.resident) continue;
                    order.push_back({Key{policy_.lctru ? -ch.bits : 0, ch.last_access, id, ch.index}, &ch});
                }
            }
            std::sort(order.begin(), order.end(),
                      [](const auto& a, const auto& b) { return a.first < b.first; });
            for (auto& [key, ch] : order) {
                if (freed >= to_free) break;
                const double bytes = bytes_of(*ch);
                const bool mine = std::get<2>(key) == own.id;
                if (ch->dirty || !ch->on_disk) {
                    cursor = disk_op(cursor, bytes, 1);
                    m.bytes_written += static_cast<std::size_t>(bytes);
                    ch->dirty = false;
                    ch->on_disk = true;
                }
                ++m.evicted_chunks;
                if (mine) {
                    // The running context needs it back at once: a fault that
                    // frees nothing.
                    cursor = disk_op(cursor, bytes, 1);
                    m.bytes_read += static_cast<std::size_t>(bytes);
                    ++m.faults;
                    continue;
                }
                ch->resident = false;
                used_ -= bytes;
                freed += bytes;
            }
        }
        if (freed < to_free) {
            raise(Errc::argument, "memory budget cannot hold the working set of context " + std::to_string(own.id));
        }
        return cursor;
    }

    EventMetrics step(std::size_t i, const tracegen::TraceEvent& ev, ReplayMetrics& totals) {
        const std::size_t t = opt_.chunk_tokens;
        EventMetrics m;
        m.index = i;
        m.time = ev.time;
        m.ctx_id = ev.ctx_id;
        const double start = std::max(ev.time, engine_free_);
        m.queue_wait = start - ev.time;

        SimContext& ctx = contexts_[ev.ctx_id];
        ctx.id = ev.ctx_id;
        const std::size_t grow = ev.prompt.size() + ev.ground_truth.size();
        const std::size_t old_end = ctx.first_pos + ctx.length();
        const std::size_t new_end = old_end + grow;
        drop_front(ctx, new_end);

        // Bytes the context holds once the call has committed its tokens.
        double own_resident = 0.0;
        double after = 0.0;
        for (const auto& c : ctx.chunks) {
            if (c.resident) own_resident += bytes_of(c);
            if (c.tokens < t) continue;
            after += bytes_of(c);
        }
        const std::size_t tail_start = ctx.chunks.empty() || ctx.chunks.back().tokens == t
                                           ? old_end
                                           : ctx.chunks.back().index * t;
        after += bytes_of(new_end - std::max(tail_start, ctx.first_pos), policy_.new_bits);
        const double to_free = used_ - own_resident + after - opt_.budget_bytes;
        const double after_evict = evict(ctx, to_free, start, m);
        m.write_seconds = after_evict - start;

        // Load.
        double lost_tokens = 0.0;
        std::vector<SimChunk*> on_disk;
        for (auto& c : ctx.chunks) {
            if (c.resident) continue;
            if (c.lost || !c.on_disk) {
                lost_tokens += static_cast<double>(c.tokens);
                ++m.recomputed_chunks;
            } else {
                on_disk.push_back(&c);
            }
        }
        std::vector<std::size_t> rebuild(on_disk.size(), 0);
        if (policy_.pipeline && !on_disk.empty()) {
            std::map<std::pair<double, std::size_t>, std::vector<std::size_t>, std::greater<>> groups;
            for (std::size_t k = 0; k < on_disk.size(); ++k) {
                groups[{bytes_of(*on_disk[k]), on_disk[k]->tokens}].push_back(k);
            }
            std::vector<pipeline::ChunkClass> classes;
            for (const auto& [key, members] : groups) {
                classes.push_back({key.first, static_cast<std::size_t>(key.first), members.size()});
            }
            const auto plan = pipeline::plan(cost_model_, classes);
            std::size_t w = 0;
            for (const auto& [key, members] : groups) {
                for (std::size_t j = 0; j < plan.recompute[w]; ++j) rebuild[members[j]] = 1;
                ++w;
            }
        }
        double io_bytes = 0.0;
        std::size_t io_chunks = 0;
        double re_tokens = lost_tokens;
        for (std::size_t k = 0; k < on_disk.size(); ++k) {
            if (rebuild[k] != 0) {
                re_tokens += static_cast<double>(on_disk[k]->tokens);
                ++m.recomputed_chunks;
            } else {
                io_bytes += bytes_of(*on_disk[k]);
                ++io_chunks;
            }
        }
        double io_end = after_evict;
        if (io_chunks > 0) {
            io_end = disk_op(after_evict, io_bytes, policy_.chunk_granular ? io_chunks : 1);
            m.bytes_read += static_cast<std::size_t>(io_bytes);
        }
        const double re_end = after_evict + re_tokens * opt_.cost.recompute_per_token;
        const double resident_at = std::max(io_end, re_end);
        m.load_seconds = resident_at - after_evict;
        m.switch_latency = resident_at - ev.time;
        for (auto& c : ctx.chunks) {
            if (c.resident) continue;
            c.resident = true;
            if (c.lost) {
                // Rebuilt from text; the discarded copy never reached disk.
                c.lost = false;
                c.on_disk = false;
                c.dirty = true;
            }
            used_ += bytes_of(c);
        }

        // Inference.
        engine_free_ = resident_at + static_cast<double>(ev.prompt.size()) * opt_.cost.recompute_per_token +
                       static_cast<double>(ev.ground_truth.size()) * opt_.cost.decode_per_token;

        // Commit new tokens: the tail chunk is rewritten, new chunks appended.
        std::size_t pos = old_end;
        if (!ctx.chunks.empty() && ctx.chunks.back().tokens < t) {
            SimChunk& tail = ctx.chunks.back();
            used_ -= bytes_of(tail);
            const std::size_t add = std::min(t - tail.tokens, new_end - pos);
            tail.tokens += add;
            tail.bits = policy_.new_bits;
            tail.dirty = true;
            tail.on_disk = false;
            used_ += bytes_of(tail);
            pos += add;
        }
        while (pos < new_end) {
            SimChunk c;
            c.index = pos / t;
            c.tokens = std::min(t - pos % t, new_end - pos);
            c.bits = policy_.new_bits;
            c.resident = true;
            c.dirty = true;
            ctx.chunks.push_back(c);
            used_ += bytes_of(c);
            pos += c.tokens;
        }
        drop_front(ctx, new_end);

        if (policy_.mixed) requantize(ctx);

        if (policy_.aot) {
            double bytes = 0.0;
            std::size_t ops = 0;
            for (auto& c : ctx.chunks) {
                if (!c.resident || !c.dirty) continue;
                bytes += bytes_of(c);
                ++ops;
                c.dirty = false;
                c.on_disk = true;
            }
            if (ops > 0) {
                disk_op(engine_free_, bytes, ops);
                m.bytes_written += static_cast<std::size_t>(bytes);
            }
        }
        for (auto& c : ctx.chunks) {
            if (c.dirty) ++totals.dirty_at_return;
            c.last_access = i + 1;
        }
        ctx.last_used = i + 1;
        m.context_tokens = ctx.length();
        return m;
    }

    void requantize(SimContext& ctx) {
        const std::size_t t = opt_.chunk_tokens;
        std::vector<double> densities;
        std::vector<SimChunk*> full;
        for (auto& c : ctx.chunks) {
            if (c.tokens != t) continue;
            densities.push_back(chunk_density(opt_.seed, ctx.id, c.index));
            full.push_back(&c);
        }
        if (densities.empty()) return;
        const auto ratios = tolerance::default_ratios();
        const auto plan = tolerance::solve_thresholds(densities, ratios, opt_.ratio_global);
        for (std::size_t k = 0; k < full.size(); ++k) {
            const int target = static_cast<int>(std::lround(8.0 * plan.ratio_of_chunk(k)));
            SimChunk& c = *full[k];
            if (target >= c.bits) continue;
            used_ -= bytes_of(c);
            c.bits = target;
            c.dirty = true;
            c.on_disk = false;
            used_ += bytes_of(c);
        }
    }

    ReplayOptions opt_;
    Policy policy_;
    pipeline::CostModel cost_model_;
    std::map<std::uint64_t, SimContext> contexts_;
    double used_ = 0.0;
    double engine_free_ = 0.0;
    double disk_free_ = 0.0;
};

}  // namespace

ReplayMetrics replay(const std::vector<tracegen::TraceEvent>& trace, const ReplayOptions& options) {
    return Replayer(options).run(trace);
}

void write_csv(const ReplayMetrics& metrics, std::ostream& out) {
    const auto flags = out.flags();
    const auto precision = out.precision();
    out.precision(9);
    out << "index,time,ctx_id,switch_latency,queue_wait,write_seconds,load_seconds,bytes_read,"
           "bytes_written,recomputed_chunks,evicted_chunks,faults,context_tokens\n";
    for (const auto& e : metrics.events) {
        out << e.index << ',' << e.time << ',' << e.ctx_id << ',' << e.switch_latency << ',' << e.queue_wait << ','
            << e.write_seconds << ',' << e.load_seconds << ',' << e.bytes_read << ',' << e.bytes_written << ','
            << e.recomputed_chunks << ',' << e.evicted_chunks << ',' << e.faults << ',' << e.context_tokens << '\n';
    }
    out << "\nmetric,value\n";
    out << "policy," << metrics.policy << '\n';
    out << "events," << metrics.events.size() << '\n';
    out << "mean_switch_latency," << metrics.mean << '\n';
    out << "p50_switch_latency," << metrics.p50 << '\n';
    out << "p95_switch_latency," << metrics.p95 << '\n';
    out << "max_switch_latency," << metrics.max << '\n';
    out << "faults," << metrics.faults << '\n';
    out << "bytes_read," << metrics.bytes_read << '\n';
    out << "bytes_written," << metrics.bytes_written << '\n';
    out << "recomputed_chunks," << metrics.recomputed_chunks << '\n';
    out << "dirty_at_return," << metrics.dirty_at_return << '\n';
    out.flags(flags);
    out.precision(precision);
}

std::vector<SweepPoint> sweep_chunk_size(const std::vector<tracegen::TraceEvent>& trace,
                                         const std::vector<std::size_t>& sizes, ReplayOptions options) {
    static const std::vector<std::size_t> allowed{1, 2, 4, 8, 16, 32, 64, 128};
    std::vector<SweepPoint> out;
    for (std::size_t s : sizes) {
        if (std::find(allowed.begin(), allowed.end(), s) == allowed.end()) {
            raise(Errc::argument, "chunk size " + std::to_string(s) + " is not a power of two in [1, 128]");
        }
        options.chunk_tokens = s;
        out.push_back({s, replay(trace, options).mean});
    }
    return out;
}

void write_sweep_csv(const std::vector<SweepPoint>& points, std::ostream& out) {
    const auto precision = out.precision();
    out.precision(9);
    out << "chunk_tokens,mean_switch_latency\n";
    for (const auto& p : points) out << p.chunk_tokens << ',' << p.mean_latency << '\n';
    out.precision(precision);
}

tracegen::TraceConfig sweep_trace_config(std::uint64_t seed) {
    tracegen::TraceConfig c;
    c.pattern = tracegen::Pattern::Random;
    c.rate = 1.0 / 20.0;
    c.duration = 3600.0;
    c.contexts = 24;
    c.delta_ranges = {{10, 100}};
    c.seed = seed;
    return c;
}

tracegen::TraceConfig standard_trace_config(std::uint64_t seed) {
    tracegen::TraceConfig c;
    c.pattern = tracegen::Pattern::Random;
    c.rate = 1.0 / 20.0;
    c.duration = 3600.0;
    c.contexts = 6;
    c.seed = seed;
    return c;
}

std::size_t max_active_contexts(tracegen::TraceConfig config, const ReplayOptions& options, double latency_limit,
                                std::size_t max_contexts) {
    std::size_t best = 0;
    for (std::size_t n = 1; n <= max_contexts; ++n) {
        config.contexts = n;
        try {
            if (replay(tracegen::generate(config), options).mean <= latency_limit) best = n;
        } catch (const Error& e) {
            if (e.code() != Errc::argument) throw;
        }
    }
    return best;
}

}  // namespace llmctx::simulator
