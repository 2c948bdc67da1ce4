// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

#include "llmctx/tracegen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>

#include <nlohmann/json.hpp>

#include "llmctx/error.hpp"

namespace llmctx::tracegen {

Pattern parse_pattern(const std::string& name) {
    if (name == "random") return Pattern::Random;
    if (name == "markov") return Pattern::Markov;
    if (name == "gaussian") return Pattern::Gaussian;
    raise(Errc::argument, "unknown pattern '" + name + "' (expected random, markov or gaussian)");
}

std::string to_string(Pattern pattern) {
    switch (pattern) {
        case Pattern::Random: return "random";
        case Pattern::Markov: return "markov";
        case Pattern::Gaussian: return "gaussian";
    }
    return "random";
}

std::vector<DeltaRange> default_delta_ranges() {
    return {{200, 500}, {1000, 2000}, {100, 300}, {500, 1000}, {100, 500}, {10, 100}};
}

void TraceConfig::validate() const {
    if (!(rate > 0.0) || !std::isfinite(rate)) raise(Errc::argument, "calling rate must be positive");
    if (max_events == 0 && !(duration > 0.0)) raise(Errc::argument, "duration must be positive");
    if (contexts == 0) raise(Errc::argument, "need at least one context");
    if (!(markov_boost >= 0.0 && markov_boost <= 1.0)) raise(Errc::argument, "markov boost must lie in [0, 1]");
    for (const auto& [lo, hi] : delta_ranges) {
        if (lo == 0 || hi < lo) raise(Errc::argument, "delta ranges must be positive and ordered");
    }
}

DeltaRange TraceConfig::range_of(std::size_t ctx) const {
    const auto ranges = delta_ranges.empty() ? default_delta_ranges() : delta_ranges;
    return ranges[ctx % ranges.size()];
}

std::vector<double> gaussian_weights(const TraceConfig& config) {
    std::size_t lo = SIZE_MAX;
    std::size_t hi = 0;
    for (std::size_t c = 0; c < config.contexts; ++c) {
        lo = std::min(lo, config.range_of(c).first);
        hi = std::max(hi, config.range_of(c).second);
    }
    const double mu = 0.5 * static_cast<double>(lo + hi);
    const double sigma = std::max(1.0, 0.25 * static_cast<double>(hi - lo));
    std::vector<double> w(config.contexts);
    for (std::size_t c = 0; c < config.contexts; ++c) {
        const auto [a, b] = config.range_of(c);
        const double z = (0.5 * static_cast<double>(a + b) - mu) / sigma;
        w[c] = std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * M_PI));
    }
    return w;
}

namespace {

std::string synth_text(std::mt19937_64& rng, std::size_t length) {
    static constexpr char kAlphabet[] = "abcdefghijklmnopqrstuvwxyz     ";
    std::uniform_int_distribution<std::size_t> pick(0, sizeof(kAlphabet) - 2);
    std::string s(length, ' ');
    for (auto& ch : s) ch = kAlphabet[pick(rng)];
    if (!s.empty()) s.front() = kAlphabet[pick(rng) % 26];
    return s;
}

}  // namespace

std::vector<TraceEvent> generate(const TraceConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    std::exponential_distribution<double> gap(config.rate);
    std::uniform_int_distribution<std::size_t> uniform(0, config.contexts - 1);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    const auto weights = gaussian_weights(config);
    std::discrete_distribution<std::size_t> gaussian(weights.begin(), weights.end());

    std::vector<TraceEvent> events;
    double t = 0.0;
    std::size_t previous = uniform(rng);
    for (std::size_t i = 0;; ++i) {
        if (config.max_events > 0 && i >= config.max_events) break;
        t += gap(rng);
        if (config.max_events == 0 && t > config.duration) break;
        std::size_t ctx = 0;
        switch (config.pattern) {
            case Pattern::Random: ctx = uniform(rng); break;
            case Pattern::Markov: ctx = coin(rng) < config.markov_boost ? previous : uniform(rng); break;
            case Pattern::Gaussian: ctx = gaussian(rng); break;
        }
        previous = ctx;
        const auto [lo, hi] = config.range_of(ctx);
        const std::size_t delta = std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
        const std::size_t answer = std::max<std::size_t>(1, delta / 8);
        const std::size_t prompt = std::max<std::size_t>(1, delta - std::min(delta, answer));
        TraceEvent ev;
        ev.time = t;
        ev.ctx_id = ctx;
        ev.prompt = synth_text(rng, prompt);
        ev.ground_truth = synth_text(rng, answer);
        events.push_back(std::move(ev));
    }
    return events;
}

void write_jsonl(const std::vector<TraceEvent>& events, std::ostream& out) {
    for (const auto& ev : events) {
        nlohmann::json j;
        j["time"] = ev.time;
        j["ctx_id"] = ev.ctx_id;
        j["prompt"] = ev.prompt;
        j["ground_truth"] = ev.ground_truth;
        out << j.dump() << '\n';
    }
}

std::vector<TraceEvent> read_jsonl(std::istream& in) {
    std::vector<TraceEvent> events;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            TraceEvent ev;
            ev.time = j.at("time").get<double>();
            ev.ctx_id = j.at("ctx_id").get<std::uint64_t>();
            ev.prompt = j.at("prompt").get<std::string>();
            ev.ground_truth = j.value("ground_truth", std::string{});
            if (!events.empty() && ev.time < events.back().time) {
                raise(Errc::format, "trace times must be non-decreasing (line " + std::to_string(lineno) + ")");
            }
            events.push_back(std::move(ev));
        } catch (const nlohmann::json::exception& e) {
            raise(Errc::format, "bad trace line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return events;
}

void save_trace(const std::vector<TraceEvent>& events, const std::string& path) {
    std::ofstream out(path);
    if (!out) raise(Errc::io, "cannot write " + path);
    write_jsonl(events, out);
}

std::vector<TraceEvent> load_trace(const std::string& path) {
    std::ifstream in(path);
    if (!in) raise(Errc::not_found, "cannot open trace " + path);
    return read_jsonl(in);
}

std::vector<std::int32_t> tokenize(const std::string& text) {
    std::vector<std::int32_t> out(text.size());
    std::transform(text.begin(), text.end(), out.begin(),
                   [](char c) { return static_cast<std::int32_t>(static_cast<unsigned char>(c)); });
    return out;
}

std::string detokenize(const std::vector<std::int32_t>& tokens) {
    std::string s;
    s.reserve(tokens.size());
    for (auto t : tokens) s.push_back(static_cast<char>(t & 0xff));
    return s;
}

}  // namespace llmctx::tracegen
