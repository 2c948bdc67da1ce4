// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

// llmctx command-line tool: trace generation, simulation, profiling, the
// socket service and a line-oriented client.

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "llmctx/error.hpp"
#include "llmctx/pipeline.hpp"
#include "llmctx/service.hpp"
#include "llmctx/simulator.hpp"
#include "llmctx/tracegen.hpp"

namespace fs = std::filesystem;
using namespace llmctx;

namespace {

constexpr double kMiB = 1024.0 * 1024.0;

volatile std::sig_atomic_t g_stop = 0;

void on_signal(int) { g_stop = 1; }

fs::path swap_dir() {
    if (const char* env = std::getenv("LLMS_SWAP_DIR"); env != nullptr && *env != '\0') return env;
    return fs::temp_directory_path() / "llmctx-swap";
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            out.push_back(std::stoul(item));
        } catch (const std::exception&) {
            raise(Errc::argument, "bad chunk size '" + item + "'");
        }
    }
    if (out.empty()) raise(Errc::argument, "no chunk sizes given");
    return out;
}

// Writes to `path`, or stdout when it is empty or "-".
template <typename F>
void with_output(const std::string& path, F&& write) {
    if (path.empty() || path == "-") {
        write(std::cout);
        return;
    }
    std::ofstream out(path);
    if (!out) raise(Errc::io, "cannot write " + path);
    write(out);
}

void write_live_csv(const service::LiveMetrics& m, std::ostream& out) {
    out << "index,ctx_id,switch_latency,decode_seconds,faults,generated\n";
    for (const auto& e : m.events) {
        out << e.index << ',' << e.ctx_id << ',' << e.switch_latency << ',' << e.decode_seconds << ',' << e.faults
            << ',' << e.generated << '\n';
    }
    out << "\nmetric,value\n";
    out << "policy," << m.policy << '\n';
    out << "events," << m.events.size() << '\n';
    out << "mean_switch_latency," << m.mean << '\n';
    out << "p95_switch_latency," << m.p95 << '\n';
    out << "faults," << m.faults << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"llmctx: chunked KV-cache memory management for LLM contexts"};
    app.require_subcommand(1);

    // trace-gen
    auto* gen = app.add_subcommand("trace-gen", "Generate a synthetic call trace (JSONL)");
    const auto standard = simulator::standard_trace_config();
    std::string pattern = "random";
    double rate = standard.rate;
    double hours = standard.duration / 3600.0;
    std::size_t contexts = standard.contexts;
    std::uint64_t seed = standard.seed;
    std::string gen_out;
    gen->add_option("--pattern", pattern, "random, markov or gaussian")->capture_default_str();
    gen->add_option("--rate", rate, "calls per second")->capture_default_str();
    gen->add_option("--hours", hours, "trace length")->capture_default_str();
    gen->add_option("--contexts", contexts, "number of contexts")->capture_default_str();
    gen->add_option("--seed", seed)->capture_default_str();
    gen->add_option("--out", gen_out, "output file (default stdout)");

    // simulate
    auto* sim = app.add_subcommand("simulate", "Replay a trace under one policy");
    std::string trace_path;
    std::string policy = "llms";
    double budget_mb = simulator::kStandardBudgetBytes / kMiB;
    std::size_t chunk_tokens = 16;
    double ratio_global = 0.5;
    std::string cost = "default";
    std::string sim_out;
    sim->add_option("--trace", trace_path, "trace JSONL")->required();
    sim->add_option("--policy", policy, "llms, llms-minus-{compression,pipeline,lifecycle}, vllm-sq, vllm-s, swap, lmk")
        ->capture_default_str();
    sim->add_option("--mem-budget-mb", budget_mb)->capture_default_str();
    sim->add_option("--chunk-tokens", chunk_tokens)->capture_default_str();
    sim->add_option("--ratio-global", ratio_global)->capture_default_str();
    sim->add_option("--cost", cost, "default, live, or a profile JSON")->capture_default_str();
    sim->add_option("--out", sim_out, "CSV output (default stdout)");

    // profile
    auto* prof = app.add_subcommand("profile", "Measure recompute and read costs of the toy model");
    std::string prof_out = "model.json";
    std::size_t prof_chunk = 16;
    prof->add_option("--out", prof_out)->capture_default_str();
    prof->add_option("--chunk-tokens", prof_chunk)->capture_default_str();

    // serve
    auto* serve = app.add_subcommand("serve", "Run the context service on a Unix socket");
    std::string socket_path = "llmctx.sock";
    double serve_budget_mb = 64.0;
    std::size_t max_contexts = 8;
    std::string serve_profile;
    std::size_t serve_chunk = 16;
    serve->add_option("--socket", socket_path)->capture_default_str();
    serve->add_option("--mem-budget-mb", serve_budget_mb)->capture_default_str();
    serve->add_option("--max-contexts", max_contexts, "contexts per client")->capture_default_str();
    serve->add_option("--chunk-tokens", serve_chunk)->capture_default_str();
    serve->add_option("--profile", serve_profile, "planner costs from `profile`");

    // sweep-chunk-size
    auto* sweep = app.add_subcommand("sweep-chunk-size", "Mean latency of llms across chunk sizes");
    std::string sweep_trace;
    std::string sizes = "1,2,4,8,16,32,64,128";
    double sweep_budget_mb = simulator::kSweepBudgetBytes / kMiB;
    double io_overhead = simulator::SimCost{}.io_op_overhead;
    std::string sweep_out;
    sweep->add_option("--trace", sweep_trace, "trace JSONL (default: the built-in sweep trace)");
    sweep->add_option("--sizes", sizes)->capture_default_str();
    sweep->add_option("--mem-budget-mb", sweep_budget_mb)->capture_default_str();
    sweep->add_option("--io-overhead", io_overhead, "seconds per I/O operation")->capture_default_str();
    sweep->add_option("--out", sweep_out, "CSV output (default stdout)");

    // max-contexts
    auto* maxc = app.add_subcommand("max-contexts", "Largest context count meeting a latency limit");
    double limit = 1.0;
    std::size_t max_n = 64;
    std::string maxc_policy = "llms";
    double maxc_budget_mb = simulator::kStandardBudgetBytes / kMiB;
    double maxc_rate = 1.0 / 20.0;
    std::uint64_t maxc_seed = 1;
    maxc->add_option("--latency-limit", limit, "seconds")->capture_default_str();
    maxc->add_option("--max", max_n)->capture_default_str();
    maxc->add_option("--policy", maxc_policy)->capture_default_str();
    maxc->add_option("--mem-budget-mb", maxc_budget_mb)->capture_default_str();
    maxc->add_option("--rate", maxc_rate)->capture_default_str();
    maxc->add_option("--seed", maxc_seed)->capture_default_str();

    // client
    auto* client = app.add_subcommand("client", "Send JSON requests from stdin, print replies");
    std::string client_socket = "llmctx.sock";
    client->add_option("--socket", client_socket)->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            tracegen::TraceConfig config;
            config.pattern = tracegen::parse_pattern(pattern);
            config.rate = rate;
            config.duration = hours * 3600.0;
            config.contexts = contexts;
            config.seed = seed;
            const auto events = tracegen::generate(config);
            with_output(gen_out, [&](std::ostream& out) { tracegen::write_jsonl(events, out); });
            std::cerr << "wrote " << events.size() << " events\n";
        } else if (*sim) {
            const auto trace = tracegen::load_trace(trace_path);
            if (cost == "live") {
                service::EngineOptions options;
                options.budget_bytes = static_cast<std::size_t>(budget_mb * kMiB);
                options.chunk_tokens = chunk_tokens;
                options.ratio_global = ratio_global;
                options.swap_dir = swap_dir();
                const auto m = service::replay_live(trace, policy, options);
                with_output(sim_out, [&](std::ostream& out) { write_live_csv(m, out); });
                std::cerr << policy << ": mean switch latency " << m.mean << " s over " << m.events.size()
                          << " calls\n";
            } else {
                simulator::ReplayOptions options;
                options.policy = policy;
                options.budget_bytes = budget_mb * kMiB;
                options.chunk_tokens = chunk_tokens;
                options.ratio_global = ratio_global;
                if (cost != "default") options.cost = simulator::SimCost::from_profile(pipeline::load_profile(cost));
                const auto m = simulator::replay(trace, options);
                with_output(sim_out, [&](std::ostream& out) { simulator::write_csv(m, out); });
                std::cerr << policy << ": mean switch latency " << m.mean << " s over " << m.events.size()
                          << " calls, " << m.faults << " faults\n";
            }
        } else if (*prof) {
            tinylm::Model model(tinylm::Config{});
            const fs::path scratch = swap_dir() / "profile";
            pipeline::LiveTarget target(model, prof_chunk, scratch);
            const std::vector<std::size_t> re_points = {1, 2, 4, 6, 8, 12};
            std::vector<std::size_t> io_points;
            const std::size_t chunk_bytes = prof_chunk * 2 * model.config().layers * model.config().hidden();
            for (std::size_t k : {1, 2, 4, 8, 16, 32}) io_points.push_back(k * chunk_bytes);
            auto fitted = pipeline::profile(target, re_points, io_points);
            fitted.chunk_tokens = prof_chunk;
            pipeline::save_profile(fitted, prof_out);
            std::error_code ec;
            fs::remove_all(scratch, ec);
            std::cout << "recompute: " << fitted.re.a << " + " << fitted.re.b << " s/chunk (r2 " << fitted.re.r2
                      << ")\nio: " << fitted.io.a << " + " << fitted.io.b << " s/byte (r2 " << fitted.io.r2 << ")\n";
        } else if (*serve) {
            service::EngineOptions options;
            options.budget_bytes = static_cast<std::size_t>(serve_budget_mb * kMiB);
            options.chunk_tokens = serve_chunk;
            options.swap_dir = swap_dir();
            if (!serve_profile.empty()) options.cost = pipeline::load_profile(serve_profile);
            service::Engine engine(options);
            service::Server server(engine, {socket_path, max_contexts});
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            server.start();
            std::cerr << "listening on " << socket_path << '\n';
            while (g_stop == 0) std::this_thread::sleep_for(std::chrono::milliseconds(50));
            server.stop();
        } else if (*sweep) {
            const auto trace = sweep_trace.empty() ? tracegen::generate(simulator::sweep_trace_config())
                                                   : tracegen::load_trace(sweep_trace);
            simulator::ReplayOptions options;
            options.budget_bytes = sweep_budget_mb * kMiB;
            options.cost.io_op_overhead = io_overhead;
            const auto points = simulator::sweep_chunk_size(trace, parse_sizes(sizes), options);
            with_output(sweep_out, [&](std::ostream& out) { simulator::write_sweep_csv(points, out); });
        } else if (*maxc) {
            auto config = simulator::sweep_trace_config(maxc_seed);
            config.rate = maxc_rate;
            config.delta_ranges.clear();
            simulator::ReplayOptions options;
            options.policy = maxc_policy;
            options.budget_bytes = maxc_budget_mb * kMiB;
            std::cout << simulator::max_active_contexts(config, options, limit, max_n) << '\n';
        } else if (*client) {
            service::Client conn(client_socket);
            std::string line;
            while (std::getline(std::cin, line)) {
                if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
                std::cout << conn.request(nlohmann::json::parse(line)).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << std::endl;
            }
        }
    } catch (const Error& e) {
        std::cerr << "error (" << to_string(e.code()) << "): " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
