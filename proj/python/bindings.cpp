// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "llmctx/error.hpp"
#include "llmctx/pipeline.hpp"
#include "llmctx/quant.hpp"
#include "llmctx/service.hpp"
#include "llmctx/simulator.hpp"
#include "llmctx/tolerance.hpp"
#include "llmctx/tracegen.hpp"

namespace py = pybind11;
using namespace llmctx;

namespace {

py::dict event_dict(const tracegen::TraceEvent& e) {
    py::dict d;
    d["time"] = e.time;
    d["ctx_id"] = e.ctx_id;
    d["prompt"] = e.prompt;
    d["ground_truth"] = e.ground_truth;
    return d;
}

std::vector<tracegen::TraceEvent> events_from(const py::iterable& items) {
    std::vector<tracegen::TraceEvent> out;
    for (const auto& item : items) {
        const auto d = item.cast<py::dict>();
        tracegen::TraceEvent e;
        e.time = d["time"].cast<double>();
        e.ctx_id = d["ctx_id"].cast<std::uint64_t>();
        e.prompt = d["prompt"].cast<std::string>();
        e.ground_truth = d.contains("ground_truth") ? d["ground_truth"].cast<std::string>() : std::string{};
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Context memory management for on-device LLM services.";

    py::register_exception<Error>(m, "Error");

    m.def("default_ratios", &tolerance::default_ratios);
    m.def(
        "solve_thresholds",
        [](const std::vector<double>& densities, double ratio_global, std::optional<std::vector<double>> ratios) {
            const auto r = ratios ? *ratios : tolerance::default_ratios();
            const auto plan = tolerance::solve_thresholds(densities, r, ratio_global);
            std::vector<double> per_chunk;
            for (std::size_t i = 0; i < densities.size(); ++i) per_chunk.push_back(plan.ratio_of_chunk(i));
            py::dict d;
            d["counts"] = plan.counts;
            d["thresholds"] = plan.thresholds;
            d["objective"] = plan.objective;
            d["realized_ratio"] = plan.realized_ratio;
            d["chunk_ratios"] = per_chunk;
            return d;
        },
        py::arg("densities"), py::arg("ratio_global") = 0.5, py::arg("ratios") = py::none());

    m.def(
        "quantize_roundtrip",
        [](const std::vector<float>& values, int bits) {
            // Keys carry the values; the value half of the tensor stays zero.
            const quant::ChunkShape shape{1, 1, 1, values.size()};
            quant::ChunkTensor t{shape, std::vector<float>(shape.elements(), 0.0f)};
            for (std::size_t i = 0; i < values.size(); ++i) t.data[shape.element(0, 0, i, 0)] = values[i];
            const auto q = quant::quantize(t, bits);
            const auto full = quant::dequantize(q).data;
            std::vector<float> back(values.size());
            for (std::size_t i = 0; i < values.size(); ++i) back[i] = full[shape.element(0, 0, i, 0)];
            return py::make_tuple(back, q.scales[0]);
        },
        py::arg("values"), py::arg("bits"), "Quantizes one channel and returns (values, scale).");

    m.def(
        "plan_pipeline",
        [](double a_re, double b_re, double a_io, double b_io, const std::vector<std::tuple<double, std::size_t, std::size_t>>& classes) {
            std::vector<pipeline::ChunkClass> cls;
            for (const auto& [ratio, bytes, count] : classes) cls.push_back({ratio, bytes, count});
            const auto p = pipeline::plan(pipeline::CostModel::linear(a_re, b_re, a_io, b_io), cls);
            py::dict d;
            d["recompute"] = p.recompute;
            d["delay"] = p.delay;
            d["t_re"] = p.t_re;
            d["t_io"] = p.t_io;
            d["io_bytes"] = p.io_bytes;
            return d;
        },
        py::arg("a_re"), py::arg("b_re"), py::arg("a_io"), py::arg("b_io"), py::arg("classes"),
        "classes: list of (ratio, bytes per chunk, count).");

    m.def(
        "generate_trace",
        [](const std::string& pattern, double rate, double duration, std::size_t contexts, std::uint64_t seed,
           std::size_t max_events) {
            tracegen::TraceConfig c;
            c.pattern = tracegen::parse_pattern(pattern);
            c.rate = rate;
            c.duration = duration;
            c.contexts = contexts;
            c.seed = seed;
            c.max_events = max_events;
            py::list out;
            for (const auto& e : tracegen::generate(c)) out.append(event_dict(e));
            return out;
        },
        py::arg("pattern") = "random", py::arg("rate") = 1.0 / 300.0, py::arg("duration") = 3600.0,
        py::arg("contexts") = 4, py::arg("seed") = 0, py::arg("max_events") = 0);

    m.def(
        "replay",
        [](const py::iterable& trace, const std::string& policy, double budget_mb, std::size_t chunk_tokens,
           double ratio_global) {
            simulator::ReplayOptions o;
            o.policy = policy;
            o.budget_bytes = budget_mb * 1024.0 * 1024.0;
            o.chunk_tokens = chunk_tokens;
            o.ratio_global = ratio_global;
            const auto r = simulator::replay(events_from(trace), o);
            py::dict d;
            d["policy"] = r.policy;
            d["mean"] = r.mean;
            d["p50"] = r.p50;
            d["p95"] = r.p95;
            d["max"] = r.max;
            d["faults"] = r.faults;
            d["bytes_read"] = r.bytes_read;
            d["bytes_written"] = r.bytes_written;
            d["dirty_at_return"] = r.dirty_at_return;
            std::vector<double> latency;
            for (const auto& e : r.events) latency.push_back(e.switch_latency);
            d["latency"] = latency;
            return d;
        },
        py::arg("trace"), py::arg("policy") = "llms", py::arg("budget_mb") = 2560.0, py::arg("chunk_tokens") = 16,
        py::arg("ratio_global") = 0.5);
    m.def("policy_names", &simulator::policy_names);

    py::class_<service::CallResult>(m, "CallResult")
        .def_readonly("tokens", &service::CallResult::tokens)
        .def_readonly("switch_latency", &service::CallResult::switch_latency)
        .def_readonly("decode_seconds", &service::CallResult::decode_seconds)
        .def_readonly("faults", &service::CallResult::faults)
        .def_property_readonly("text", [](const service::CallResult& r) {
            return py::bytes(tracegen::detokenize(r.tokens));
        });

    py::class_<service::Engine>(m, "Engine")
        .def(py::init([](const std::filesystem::path& swap_dir, double budget_mb, std::size_t max_new_tokens,
                         bool quantize) {
                 service::EngineOptions o;
                 o.swap_dir = swap_dir;
                 o.budget_bytes = static_cast<std::size_t>(budget_mb * 1024.0 * 1024.0);
                 o.max_new_tokens = max_new_tokens;
                 o.quantize = quantize;
                 return std::make_unique<service::Engine>(o);
             }),
             py::arg("swap_dir"), py::arg("budget_mb") = 64.0, py::arg("max_new_tokens") = 16,
             py::arg("quantize") = true)
        .def("new_ctx", &service::Engine::new_ctx, py::arg("system_prompt") = "")
        .def("call", &service::Engine::call, py::arg("ctx_id"), py::arg("prompt"), py::arg("max_new") = 0)
        .def("del_ctx", &service::Engine::del_ctx)
        .def("has_ctx", &service::Engine::has_ctx)
        .def("used_bytes", [](service::Engine& e) { return e.store().ledger().used(); });
}
