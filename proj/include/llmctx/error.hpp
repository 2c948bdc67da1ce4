// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace llmctx {

enum class Errc {
    length,       // sequence longer than the model window
    window,       // cache full, caller must slide
    consistency,  // mismatched shapes, overlapping spans, bad rows
    numeric,      // non-finite values
    format,       // malformed payload or swap file
    argument,     // invalid argument
    planning,     // infeasible compression target
    profiling,    // degenerate profiling points
    out_of_memory,
    context,      // unrecoverable context state
    quota,
    not_found,
    busy,
    io,
};

std::string_view to_string(Errc code) noexcept;

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace llmctx
