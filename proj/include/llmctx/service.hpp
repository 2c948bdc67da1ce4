// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

// The context service: an inference engine over tinylm that keeps every
// context's KV cache in the chunk store, and a Unix-socket front end that
// speaks newline-delimited JSON.

#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "llmctx/chunkstore.hpp"
#include "llmctx/lifecycle.hpp"
#include "llmctx/pipeline.hpp"
#include "llmctx/tinylm.hpp"
#include "llmctx/tracegen.hpp"

namespace llmctx::service {

using chunkstore::CtxId;
using tinylm::TokenId;

struct EngineOptions {
    tinylm::Config model;             // max_seq is derived from the fields below
    std::size_t budget_bytes = 64u << 20;
    std::size_t chunk_tokens = 16;
    std::size_t window = 256;         // sliding-window length in tokens
    std::size_t max_prompt_tokens = 256;
    std::size_t max_new_tokens = 16;
    TokenId end_token = 0;
    bool quantize = true;             // false stores raw floats
    bool compression = true;          // density-driven mixed bitwidths; needs quantize
    bool pipeline = true;             // split loads between disk and recompute
    std::vector<double> ratios;       // empty = default ratios
    double ratio_global = 0.5;
    lifecycle::Policy lifecycle;
    std::filesystem::path swap_dir = "llmctx-swap";
    std::optional<pipeline::CostModel> cost;  // planner costs; a fixed guess when empty
};

/// Engine settings for a simulator policy name, for live replay.
EngineOptions options_for_policy(const std::string& policy, EngineOptions base = {});

struct CallResult {
    std::vector<TokenId> tokens;
    double switch_latency = 0.0;  // seconds from call entry to the cache being ready
    double decode_seconds = 0.0;
    std::size_t faults = 0;
    std::size_t evicted_chunks = 0;
    chunkstore::LoadReport load;
    lifecycle::AotReport aot;
};

class Engine {
public:
    explicit Engine(EngineOptions options);

    const EngineOptions& options() const noexcept { return options_; }
    const tinylm::Model& model() const noexcept { return *model_; }
    chunkstore::ChunkStore& store() noexcept { return *store_; }
    lifecycle::Manager& lifecycle() noexcept { return *manager_; }

    /// Creates a context, prefilling the system prompt when one is given.
    CtxId new_ctx(const std::string& system_prompt = {});
    /// `max_new` of 0 uses the configured token cap.
    CallResult call(CtxId id, const std::string& prompt, std::size_t max_new = 0);
    CallResult call_tokens(CtxId id, const std::vector<TokenId>& prompt, std::size_t max_new = 0);
    /// Returns false when the context did not exist.
    bool del_ctx(CtxId id);
    bool has_ctx(CtxId id) const { return store_->has_context(id); }

    /// Evicts one chunk even if its context is locked.
    void force_evict(CtxId id, std::uint32_t index);
    /// Called after every decode step with (ctx, step); tests use it to
    /// evict chunks in the middle of generation.
    void set_decode_hook(std::function<void(CtxId, std::size_t)> hook) { decode_hook_ = std::move(hook); }

private:
    void prefill(chunkstore::ContextState& ctx, tinylm::KvTensor& kv, const std::vector<TokenId>& tokens,
                 std::vector<float>& logits);
    void restore_missing(chunkstore::ContextState& ctx, tinylm::KvTensor& kv, std::size_t& faults);
    void store_kv(chunkstore::ContextState& ctx, const tinylm::KvTensor& kv, std::size_t from_position);
    void replan(chunkstore::ContextState& ctx);

    EngineOptions options_;
    std::unique_ptr<tinylm::Model> model_;
    std::unique_ptr<chunkstore::ChunkStore> store_;
    std::unique_ptr<lifecycle::Manager> manager_;
    pipeline::CostModel cost_;
    CtxId next_id_ = 1;
    std::function<void(CtxId, std::size_t)> decode_hook_;
};

struct ServerOptions {
    std::filesystem::path socket_path;
    std::size_t max_contexts = 8;  // per client
};

/// Per-connection protocol state.
struct Session {
    std::string client;
    std::vector<CtxId> owned;
};

class Server {
public:
    Server(Engine& engine, ServerOptions options);
    ~Server();
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    /// Binds and listens, then accepts connections on a background thread.
    void start();
    /// Closes the listener and every connection, then joins all threads.
    void stop();
    /// Blocks until stop() is called from another thread or a signal handler.
    void wait();

    /// Handles one request line and returns the response line (no newline).
    std::string handle(Session& session, const std::string& line);

private:
    nlohmann::json dispatch(Session& session, const nlohmann::json& request);
    void accept_loop();
    void serve_connection(int fd);

    Engine& engine_;
    ServerOptions options_;
    std::mutex engine_mutex_;
    std::mutex state_mutex_;
    std::map<std::string, std::size_t> active_;  // contexts per client
    std::map<CtxId, std::string> owner_;
    std::size_t next_client_ = 1;
    int listen_fd_ = -1;
    std::atomic<bool> running_{false};
    std::thread acceptor_;
    std::vector<std::thread> workers_;
    std::vector<int> connections_;
};

/// Minimal blocking client for the socket protocol.
class Client {
public:
    explicit Client(const std::filesystem::path& socket_path);
    ~Client();
    Client(const Client&) = delete;
    Client& operator=(const Client&) = delete;

    nlohmann::json request(const nlohmann::json& message);

private:
    int fd_ = -1;
    std::string buffer_;
};

struct LiveEvent {
    std::size_t index = 0;
    std::uint64_t ctx_id = 0;
    double switch_latency = 0.0;
    double decode_seconds = 0.0;
    std::size_t faults = 0;
    std::size_t generated = 0;
};

struct LiveMetrics {
    std::string policy;
    std::vector<LiveEvent> events;
    double mean = 0.0;
    double p95 = 0.0;
    std::size_t faults = 0;
};

/// Replays a trace through a real engine back to back (arrival times are
/// ignored). Prompts are cut to the engine's prompt limit and the answer
/// length caps decoding.
LiveMetrics replay_live(const std::vector<tracegen::TraceEvent>& trace, const std::string& policy,
                        EngineOptions options);

}  // namespace llmctx::service
