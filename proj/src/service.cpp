// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

#include "llmctx/service.hpp"

#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>

#include <nlohmann/json.hpp>

#include "llmctx/error.hpp"
#include "llmctx/quant.hpp"
#include "llmctx/tolerance.hpp"

namespace llmctx::service {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void add_load(chunkstore::LoadReport& total, const chunkstore::LoadReport& part) {
    total.payload_bytes_read += part.payload_bytes_read;
    total.file_bytes_read += part.file_bytes_read;
    total.chunks_read += part.chunks_read;
    total.chunks_recomputed += part.chunks_recomputed;
    total.fallbacks.insert(total.fallbacks.end(), part.fallbacks.begin(), part.fallbacks.end());
    total.degraded = total.degraded || part.degraded;
    total.wall_seconds += part.wall_seconds;
}

class Unlock {
public:
    Unlock(lifecycle::Manager& manager, chunkstore::ContextState& ctx) : manager_(manager), ctx_(ctx) {}
    ~Unlock() { manager_.unlock(ctx_); }
    Unlock(const Unlock&) = delete;
    Unlock& operator=(const Unlock&) = delete;

private:
    lifecycle::Manager& manager_;
    chunkstore::ContextState& ctx_;
};

}  // namespace

EngineOptions options_for_policy(const std::string& policy, EngineOptions base) {
    auto baseline = [&](bool quantize) {
        base.quantize = quantize;
        base.compression = false;
        base.pipeline = false;
        base.lifecycle = {.lctru = false, .aot = false, .lock = true};
    };
    if (policy == "llms") {
    } else if (policy == "llms-minus-compression") {
        base.compression = false;
    } else if (policy == "llms-minus-pipeline") {
        base.pipeline = false;
    } else if (policy == "llms-minus-lifecycle") {
        base.lifecycle = {.lctru = false, .aot = false, .lock = false};
    } else if (policy == "vllm-sq") {
        baseline(true);
    } else if (policy == "vllm-s") {
        baseline(false);
    } else if (policy == "swap") {
        baseline(false);
        base.lifecycle.whole_context = true;
    } else if (policy == "lmk") {
        baseline(false);
        base.lifecycle.whole_context = true;
        base.lifecycle.discard = true;
    } else {
        raise(Errc::argument, "unknown policy '" + policy + "'");
    }
    return base;
}

Engine::Engine(EngineOptions options) : options_(std::move(options)) {
    if (options_.ratios.empty()) options_.ratios = tolerance::default_ratios();
    if (options_.max_prompt_tokens == 0) raise(Errc::argument, "prompt limit must be positive");
    auto config = options_.model;
    config.max_seq = options_.window + options_.chunk_tokens + options_.max_prompt_tokens + options_.max_new_tokens;
    model_ = std::make_unique<tinylm::Model>(config);

    chunkstore::StoreOptions store;
    store.budget_bytes = options_.budget_bytes;
    store.chunk_tokens = options_.chunk_tokens;
    store.base_bitwidth = options_.quantize ? 8 : quant::kRawBitwidth;
    store.swap_dir = options_.swap_dir;
    store.max_window = options_.window;
    store_ = std::make_unique<chunkstore::ChunkStore>(*model_, store);
    manager_ = std::make_unique<lifecycle::Manager>(*store_, options_.lifecycle);

    if (options_.cost) {
        cost_ = *options_.cost;
    } else {
        cost_ = pipeline::CostModel::linear(0.0, 5e-4, 1e-4, 1e-9);
    }
    cost_.chunk_tokens = options_.chunk_tokens;
}

CtxId Engine::new_ctx(const std::string& system_prompt) {
    const auto tokens = tracegen::tokenize(system_prompt);
    if (tokens.size() > options_.max_prompt_tokens) {
        raise(Errc::length, "system prompt has " + std::to_string(tokens.size()) + " tokens, limit is " +
                                std::to_string(options_.max_prompt_tokens));
    }
    const CtxId id = next_id_++;
    auto& ctx = store_->create_context(id);
    if (tokens.empty()) return id;
    try {
        ctx.clock = manager_->tick();
        manager_->lock(ctx);
        Unlock guard(*manager_, ctx);
        const auto& cfg = model_->config();
        tinylm::KvTensor kv(cfg.layers, cfg.heads, cfg.head_dim, 0, ctx.first_position);
        std::vector<float> logits;
        prefill(ctx, kv, tokens, logits);
        store_kv(ctx, kv, ctx.first_position);
        store_->slide_window(ctx);
        replan(ctx);
        manager_->aot_swapout(ctx);
        manager_->touch(ctx, ctx.clock);
        manager_->sync(ctx);
    } catch (...) {
        manager_->forget(id);
        store_->delete_context(id);
        throw;
    }
    return id;
}

CallResult Engine::call(CtxId id, const std::string& prompt, std::size_t max_new) {
    return call_tokens(id, tracegen::tokenize(prompt), max_new);
}

CallResult Engine::call_tokens(CtxId id, const std::vector<TokenId>& prompt, std::size_t max_new) {
    const auto t0 = Clock::now();
    auto& ctx = store_->context(id);
    if (prompt.size() > options_.max_prompt_tokens) {
        raise(Errc::length, "prompt has " + std::to_string(prompt.size()) + " tokens, limit is " +
                                std::to_string(options_.max_prompt_tokens));
    }
    CallResult result;
    const std::uint64_t now = manager_->tick();
    ctx.clock = now;
    manager_->lock(ctx);
    Unlock guard(*manager_, ctx);

    // Bring every chunk in. Without a lock, room made for one chunk may
    // evict another of our own, so go around until nothing is missing.
    for (std::size_t round = 0;; ++round) {
        auto missing = store_->missing_chunks(ctx);
        if (missing.empty()) break;
        if (round > ctx.chunks.size() + 2) raise(Errc::busy, "working set does not stay resident");
        std::size_t need = 0;
        for (auto idx : missing) need += store_->chunk_bytes(*ctx.find(idx));
        const auto reclaimed = manager_->make_room(need);
        result.evicted_chunks += reclaimed.evicted.size();
        for (const auto& key : reclaimed.evicted) {
            if (key.ctx == id) ++result.faults;
        }
        missing = store_->missing_chunks(ctx);
        need = 0;
        for (auto idx : missing) need += store_->chunk_bytes(*ctx.find(idx));
        if (need > store_->ledger().free()) continue;
        chunkstore::LoadAssignment assignment;
        if (options_.pipeline) {
            const auto classes = pipeline::missing_classes(*store_, ctx);
            assignment = pipeline::assign(*store_, ctx, pipeline::plan(cost_, classes));
            add_load(result.load, pipeline::load_overlapped(*store_, ctx, assignment));
        } else {
            assignment.io = missing;
            add_load(result.load, store_->load(ctx, assignment));
        }
    }
    manager_->sync(ctx);
    result.switch_latency = seconds_since(t0);

    auto kv = store_->assemble_kv(ctx);
    const std::size_t stored_end = kv.first_position + kv.length;
    std::vector<float> logits;
    if (ctx.kv_length() < ctx.tokens.size()) {
        // The cache was discarded; rebuilding it from the text is part of the switch.
        const auto t_rebuild = Clock::now();
        std::vector<TokenId> text(ctx.tokens.begin() + static_cast<std::ptrdiff_t>(ctx.kv_length()), ctx.tokens.end());
        ctx.tokens.resize(ctx.kv_length());
        prefill(ctx, kv, text, logits);
        result.switch_latency += seconds_since(t_rebuild);
    }

    const auto t1 = Clock::now();
    prefill(ctx, kv, prompt, logits);
    const std::size_t cap = max_new == 0 ? options_.max_new_tokens : std::min(max_new, options_.max_new_tokens);
    for (std::size_t step = 0; step < cap && !logits.empty(); ++step) {
        const TokenId next = tinylm::argmax(logits);
        if (next == options_.end_token) break;
        result.tokens.push_back(next);
        prefill(ctx, kv, {next}, logits);
        if (decode_hook_) {
            decode_hook_(id, step);
            restore_missing(ctx, kv, result.faults);
        }
    }
    result.decode_seconds = seconds_since(t1);

    store_kv(ctx, kv, stored_end);
    store_->slide_window(ctx);
    replan(ctx);
    result.aot = manager_->aot_swapout(ctx);
    manager_->touch(ctx, now);
    manager_->sync(ctx);
    return result;
}

bool Engine::del_ctx(CtxId id) {
    if (!store_->has_context(id)) return false;
    manager_->forget(id);
    store_->delete_context(id);
    return true;
}

void Engine::force_evict(CtxId id, std::uint32_t index) {
    auto& ctx = store_->context(id);
    store_->evict_now(ctx, index);
    manager_->queue().erase({id, index});
}

void Engine::prefill(chunkstore::ContextState& ctx, tinylm::KvTensor& kv, const std::vector<TokenId>& tokens,
                     std::vector<float>& logits) {
    for (TokenId token : tokens) {
        auto step = tinylm::forward_step(*model_, kv, token);
        ctx.tokens.push_back(token);
        ctx.density.update(kv.first_position + kv.length - 1, step.attention_rows);
        logits = std::move(step.logits);
    }
}

void Engine::restore_missing(chunkstore::ContextState& ctx, tinylm::KvTensor& kv, std::size_t& faults) {
    const auto missing = store_->missing_chunks(ctx);
    for (auto idx : missing) {
        const auto* c = ctx.find(idx);
        manager_->make_room(store_->chunk_bytes(*c));
        if (store_->fault(ctx, idx)) ++faults;
    }
    for (auto idx : missing) {
        const auto* c = ctx.find(idx);
        if (c->in_memory()) {
            chunkstore::insert_rows(kv, c->token_start - kv.first_position, quant::dequantize(*c->payload));
        }
    }
    manager_->sync(ctx);
}

void Engine::store_kv(chunkstore::ContextState& ctx, const tinylm::KvTensor& kv, std::size_t from_position) {
    const std::size_t t = options_.chunk_tokens;
    for (std::size_t round = 0;; ++round) {
        if (round > ctx.chunks.size() + 2) raise(Errc::busy, "no room to store the new cache rows");
        // The partial tail chunk is rewritten, so it has to be resident.
        if (auto* tail = ctx.find(static_cast<std::uint32_t>(from_position / t)); tail != nullptr && !tail->in_memory()) {
            manager_->make_room(store_->chunk_bytes(*tail));
            store_->fault(ctx, tail->key.index);
        }
        const std::size_t need = store_->commit_bytes_needed(ctx, kv);
        if (need <= store_->ledger().free()) break;
        manager_->make_room(need);
    }
    store_->commit(ctx, kv, from_position);
    manager_->sync(ctx);
}

void Engine::replan(chunkstore::ContextState& ctx) {
    if (!options_.compression || !options_.quantize) return;  // raw contexts stay raw
    const auto densities = ctx.density.chunk_densities(options_.chunk_tokens, false);
    std::size_t full = 0;
    while (full < ctx.chunks.size() && full < densities.size() &&
           ctx.chunks[full].token_count == options_.chunk_tokens) {
        ++full;
    }
    if (full == 0) return;
    const std::span<const double> d(densities.data(), full);
    const auto plan = tolerance::solve_thresholds(d, options_.ratios, options_.ratio_global);
    for (std::size_t k = 0; k < full; ++k) {
        auto& c = ctx.chunks[k];
        c.density = densities[k];
        const int bits = static_cast<int>(std::lround(8.0 * plan.ratio_of_chunk(k)));
        if (bits < c.bitwidth) store_->lower_bitwidth(ctx, c.key.index, bits);
    }
    manager_->sync(ctx);
}

// ---------------------------------------------------------------------------
// Socket server

namespace {

nlohmann::json error_reply(Errc code, const std::string& message) {
    return {{"ok", false}, {"error", message}, {"code", std::string(to_string(code))}};
}

bool send_all(int fd, const std::string& data) {
    std::size_t sent = 0;
    while (sent < data.size()) {
        const ssize_t n = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            return false;
        }
        sent += static_cast<std::size_t>(n);
    }
    return true;
}

sockaddr_un socket_address(const std::filesystem::path& path) {
    sockaddr_un addr{};
    addr.sun_family = AF_UNIX;
    const std::string s = path.string();
    if (s.size() >= sizeof(addr.sun_path)) raise(Errc::argument, "socket path too long: " + s);
    std::memcpy(addr.sun_path, s.c_str(), s.size() + 1);
    return addr;
}

}  // namespace

Server::Server(Engine& engine, ServerOptions options) : engine_(engine), options_(std::move(options)) {}

Server::~Server() { stop(); }

void Server::start() {
    const auto addr = socket_address(options_.socket_path);
    std::error_code ec;
    std::filesystem::remove(options_.socket_path, ec);
    listen_fd_ = ::socket(AF_UNIX, SOCK_STREAM, 0);
    if (listen_fd_ < 0) raise(Errc::io, std::string("socket: ") + std::strerror(errno));
    if (::bind(listen_fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) != 0 ||
        ::listen(listen_fd_, 16) != 0) {
        const std::string why = std::strerror(errno);
        ::close(listen_fd_);
        listen_fd_ = -1;
        raise(Errc::io, "cannot listen on " + options_.socket_path.string() + ": " + why);
    }
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
}

void Server::stop() {
    if (!running_.exchange(false)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    listen_fd_ = -1;
    if (acceptor_.joinable()) acceptor_.join();
    {
        std::lock_guard<std::mutex> lock(state_mutex_);
        for (int fd : connections_) ::shutdown(fd, SHUT_RDWR);
    }
    for (auto& w : workers_) {
        if (w.joinable()) w.join();
    }
    workers_.clear();
    std::error_code ec;
    std::filesystem::remove(options_.socket_path, ec);
}

void Server::wait() {
    while (running_) std::this_thread::sleep_for(std::chrono::milliseconds(50));
}

void Server::accept_loop() {
    while (running_) {
        const int fd = ::accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) {
            if (errno == EINTR) continue;
            break;
        }
        std::lock_guard<std::mutex> lock(state_mutex_);
        if (!running_) {
            ::close(fd);
            break;
        }
        connections_.push_back(fd);
        workers_.emplace_back([this, fd] { serve_connection(fd); });
    }
}

void Server::serve_connection(int fd) {
    Session session;
    std::string buffer;
    char chunk[4096];
    for (;;) {
        const ssize_t n = ::recv(fd, chunk, sizeof(chunk), 0);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) break;
        buffer.append(chunk, static_cast<std::size_t>(n));
        std::size_t pos;
        bool open = true;
        while (open && (pos = buffer.find('\n')) != std::string::npos) {
            const std::string line = buffer.substr(0, pos);
            buffer.erase(0, pos + 1);
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            open = send_all(fd, handle(session, line) + "\n");
        }
        if (!open) break;
    }
    std::lock_guard<std::mutex> lock(state_mutex_);
    connections_.erase(std::remove(connections_.begin(), connections_.end(), fd), connections_.end());
    ::close(fd);
}

std::string Server::handle(Session& session, const std::string& line) {
    nlohmann::json reply;
    try {
        const auto request = nlohmann::json::parse(line);
        if (!request.is_object()) raise(Errc::format, "request must be a JSON object");
        reply = dispatch(session, request);
    } catch (const nlohmann::json::exception& e) {
        reply = error_reply(Errc::format, e.what());
    } catch (const Error& e) {
        reply = error_reply(e.code(), e.what());
    } catch (const std::exception& e) {
        reply = error_reply(Errc::context, e.what());
    }
    return reply.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

nlohmann::json Server::dispatch(Session& session, const nlohmann::json& request) {
    const std::string op = request.at("op").get<std::string>();
    if (session.client.empty() || op == "bind") {
        std::lock_guard<std::mutex> lock(state_mutex_);
        if (op == "bind" && request.contains("client")) {
            session.client = request["client"].get<std::string>();
        } else if (session.client.empty()) {
            session.client = "client-" + std::to_string(next_client_++);
        }
    }
    if (op == "bind") return {{"ok", true}, {"client", session.client}};

    if (op == "new_ctx") {
        const std::string system = request.value("system_prompt", std::string{});
        {
            std::lock_guard<std::mutex> lock(state_mutex_);
            if (active_[session.client] >= options_.max_contexts) {
                raise(Errc::quota, "client " + session.client + " already holds " +
                                       std::to_string(options_.max_contexts) + " contexts");
            }
            ++active_[session.client];  // reserve before the slow prefill
        }
        CtxId id = 0;
        try {
            std::lock_guard<std::mutex> lock(engine_mutex_);
            id = engine_.new_ctx(system);
        } catch (...) {
            std::lock_guard<std::mutex> lock(state_mutex_);
            --active_[session.client];
            throw;
        }
        {
            std::lock_guard<std::mutex> lock(state_mutex_);
            owner_[id] = session.client;
        }
        session.owned.push_back(id);
        return {{"ok", true}, {"ctx_id", id}};
    }

    if (op == "call") {
        const CtxId id = request.at("ctx_id").get<CtxId>();
        const std::string prompt = request.value("prompt", std::string{});
        CallResult r;
        {
            std::lock_guard<std::mutex> lock(engine_mutex_);
            r = engine_.call(id, prompt);
        }
        return {{"ok", true},
                {"ctx_id", id},
                {"tokens", r.tokens},
                {"text", tracegen::detokenize(r.tokens)},
                {"switch_latency_ms", r.switch_latency * 1e3},
                {"decode_ms", r.decode_seconds * 1e3}};
    }

    if (op == "del_ctx") {
        const CtxId id = request.at("ctx_id").get<CtxId>();
        bool existed = false;
        {
            std::lock_guard<std::mutex> lock(engine_mutex_);
            existed = engine_.del_ctx(id);
        }
        nlohmann::json reply = {{"ok", true}, {"ctx_id", id}};
        if (existed) {
            std::lock_guard<std::mutex> lock(state_mutex_);
            if (auto it = owner_.find(id); it != owner_.end()) {
                --active_[it->second];
                owner_.erase(it);
            }
        } else {
            reply["warning"] = "context " + std::to_string(id) + " was already deleted";
        }
        std::erase(session.owned, id);
        return reply;
    }

    raise(Errc::argument, "unknown op '" + op + "'");
}

Client::Client(const std::filesystem::path& socket_path) {
    const auto addr = socket_address(socket_path);
    fd_ = ::socket(AF_UNIX, SOCK_STREAM, 0);
    if (fd_ < 0) raise(Errc::io, std::string("socket: ") + std::strerror(errno));
    if (::connect(fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) != 0) {
        const std::string why = std::strerror(errno);
        ::close(fd_);
        fd_ = -1;
        raise(Errc::io, "cannot connect to " + socket_path.string() + ": " + why);
    }
}

Client::~Client() {
    if (fd_ >= 0) ::close(fd_);
}

nlohmann::json Client::request(const nlohmann::json& message) {
    const auto text = message.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
    if (!send_all(fd_, text + "\n")) raise(Errc::io, "connection closed");
    char chunk[4096];
    std::size_t pos;
    while ((pos = buffer_.find('\n')) == std::string::npos) {
        const ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) raise(Errc::io, "connection closed");
        buffer_.append(chunk, static_cast<std::size_t>(n));
    }
    const std::string line = buffer_.substr(0, pos);
    buffer_.erase(0, pos + 1);
    return nlohmann::json::parse(line);
}

// ---------------------------------------------------------------------------
// Live replay

LiveMetrics replay_live(const std::vector<tracegen::TraceEvent>& trace, const std::string& policy,
                        EngineOptions options) {
    options = options_for_policy(policy, std::move(options));
    options.swap_dir /= policy;
    Engine engine(options);
    LiveMetrics metrics;
    metrics.policy = policy;
    std::map<std::uint64_t, CtxId> ids;
    for (std::size_t i = 0; i < trace.size(); ++i) {
        const auto& ev = trace[i];
        auto it = ids.find(ev.ctx_id);
        if (it == ids.end()) it = ids.emplace(ev.ctx_id, engine.new_ctx()).first;
        auto prompt = tracegen::tokenize(ev.prompt);
        if (prompt.size() > options.max_prompt_tokens) prompt.resize(options.max_prompt_tokens);
        const std::size_t answer = std::max<std::size_t>(1, ev.ground_truth.size());
        const auto r = engine.call_tokens(it->second, prompt, answer);
        LiveEvent e;
        e.index = i;
        e.ctx_id = ev.ctx_id;
        e.switch_latency = r.switch_latency;
        e.decode_seconds = r.decode_seconds;
        e.faults = r.faults;
        e.generated = r.tokens.size();
        metrics.faults += r.faults;
        metrics.events.push_back(e);
    }
    for (const auto& [trace_id, id] : ids) engine.del_ctx(id);
    if (!metrics.events.empty()) {
        std::vector<double> lat;
        for (const auto& e : metrics.events) lat.push_back(e.switch_latency);
        double sum = 0.0;
        for (double v : lat) sum += v;
        metrics.mean = sum / static_cast<double>(lat.size());
        std::sort(lat.begin(), lat.end());
        const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(lat.size())));
        metrics.p95 = lat[std::max<std::size_t>(rank, 1) - 1];
    }
    return metrics;
}

}  // namespace llmctx::service
