// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

#include "llmctx/error.hpp"

namespace llmctx {

std::string_view to_string(Errc code) noexcept {
    switch (code) {
        case Errc::length: return "length";
        case Errc::window: return "window";
        case Errc::consistency: return "consistency";
        case Errc::numeric: return "numeric";
        case Errc::format: return "format";
        case Errc::argument: return "argument";
        case Errc::planning: return "planning";
        case Errc::profiling: return "profiling";
        case Errc::out_of_memory: return "out_of_memory";
        case Errc::context: return "context";
        case Errc::quota: return "quota";
        case Errc::not_found: return "not_found";
        case Errc::busy: return "busy";
        case Errc::io: return "io";
    }
    return "unknown";
}

}  // namespace llmctx
