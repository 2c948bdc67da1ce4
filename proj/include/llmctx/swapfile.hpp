// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

// On-disk format of one swapped chunk (all integers little-endian):
//
//   offset  size  field
//   0       4     magic "LLMC"
//   4       2     version (1)
//   6       8     ctx_id
//   14      4     chunk_index
//   18      4     token_start
//   22      2     token_count
//   24      1     bitwidth (2, 4, 8, or 32 for raw f32)
//   25      2     layers
//   27      2     heads
//   29      2     head_dim
//   31      4*C   per-channel scale (f32), C = layers * 2 * heads * head_dim
//   ..      4*C   per-channel zero point (f32)
//   ..      P     packed payload
//   ..      4     CRC32 of every preceding byte
//
// Both the channel arrays and the payload are layer-major, so the bytes
// belonging to one layer form a contiguous slice of each section.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "llmctx/quant.hpp"

namespace llmctx::swapfile {

inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 31;
inline constexpr std::size_t kCrcBytes = 4;

struct SwapRecord {
    std::uint64_t ctx_id = 0;
    std::uint32_t chunk_index = 0;
    std::uint32_t token_start = 0;
    quant::QuantizedChunkPayload payload;  // payload.shape.tokens is the token count

    friend bool operator==(const SwapRecord&, const SwapRecord&) = default;
};

struct Header {
    std::uint64_t ctx_id = 0;
    std::uint32_t chunk_index = 0;
    std::uint32_t token_start = 0;
    int bitwidth = 0;
    quant::ChunkShape shape;
};

/// Byte ranges of one layer inside a file.
struct LayerSlices {
    std::size_t scales_offset = 0;
    std::size_t zeros_offset = 0;
    std::size_t channel_bytes = 0;  // size of each of the two channel slices
    std::size_t payload_offset = 0;
    std::size_t payload_bytes = 0;
};

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode(const SwapRecord& record);
/// Throws Errc::format on truncation, bad magic/version, or CRC mismatch.
SwapRecord decode(std::span<const std::uint8_t> bytes);

/// Parses only the fixed header (no CRC check).
Header decode_header(std::span<const std::uint8_t> bytes);
std::size_t file_size(const Header& header);
LayerSlices layer_slices(const Header& header, std::size_t layer);
/// Verifies the trailing CRC of a complete file image.
bool crc_matches(std::span<const std::uint8_t> file);

}  // namespace llmctx::swapfile
