// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

#include "llmctx/quant.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>

#include "llmctx/error.hpp"

namespace llmctx::quant {

namespace {

void require_code_bits(int bits) {
    if (!is_code_bitwidth(bits)) {
        raise(Errc::argument, "bitwidth " + std::to_string(bits) + " is not one of {8, 4, 2}");
    }
}

unsigned max_code(int bits) { return (1u << bits) - 1u; }

}  // namespace

bool is_code_bitwidth(int bits) noexcept { return bits == 8 || bits == 4 || bits == 2; }

bool is_storage_bitwidth(int bits) noexcept { return is_code_bitwidth(bits) || bits == kRawBitwidth; }

std::size_t payload_bytes(const ChunkShape& shape, int bits) {
    if (!is_storage_bitwidth(bits)) {
        raise(Errc::argument, "unsupported bitwidth " + std::to_string(bits));
    }
    return (shape.elements() * static_cast<std::size_t>(bits) + 7) / 8;
}

std::size_t metadata_bytes(const ChunkShape& shape) noexcept {
    return 2 * shape.channels() * sizeof(float);
}

std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, int bits) {
    require_code_bits(bits);
    if (bits == 8) return {codes.begin(), codes.end()};
    const std::size_t per_byte = 8 / static_cast<std::size_t>(bits);
    std::vector<std::uint8_t> out((codes.size() + per_byte - 1) / per_byte, 0);
    const unsigned mask = max_code(bits);
    for (std::size_t i = 0; i < codes.size(); ++i) {
        out[i / per_byte] |=
            static_cast<std::uint8_t>((codes[i] & mask) << ((i % per_byte) * bits));
    }
    return out;
}

std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> packed, int bits,
                                       std::size_t count) {
    require_code_bits(bits);
    const std::size_t per_byte = 8 / static_cast<std::size_t>(bits);
    if (packed.size() < (count + per_byte - 1) / per_byte) {
        raise(Errc::format, "packed code buffer is truncated");
    }
    std::vector<std::uint8_t> codes(count);
    if (bits == 8) {
        std::copy_n(packed.begin(), count, codes.begin());
        return codes;
    }
    const unsigned mask = max_code(bits);
    for (std::size_t i = 0; i < count; ++i) {
        codes[i] = static_cast<std::uint8_t>((packed[i / per_byte] >> ((i % per_byte) * bits)) & mask);
    }
    return codes;
}

QuantizedChunkPayload quantize(const ChunkTensor& chunk, int bits) {
    require_code_bits(bits);
    const ChunkShape& shape = chunk.shape;
    if (shape.elements() == 0 || chunk.data.size() != shape.elements()) {
        raise(Errc::argument, "chunk tensor is empty or does not match its shape");
    }
    for (float v : chunk.data) {
        if (!std::isfinite(v)) raise(Errc::numeric, "chunk contains a non-finite value");
    }

    QuantizedChunkPayload out;
    out.shape = shape;
    out.bitwidth = bits;
    out.scales.resize(shape.channels());
    out.zero_points.resize(shape.channels());
    std::vector<std::uint8_t> codes(shape.elements());
    const double levels = static_cast<double>(max_code(bits));
    const std::size_t hidden = shape.hidden();

    for (std::size_t layer = 0; layer < shape.layers; ++layer) {
        for (std::size_t kv = 0; kv < 2; ++kv) {
            for (std::size_t hd = 0; hd < hidden; ++hd) {
                float lo = std::numeric_limits<float>::infinity();
                float hi = -lo;
                for (std::size_t t = 0; t < shape.tokens; ++t) {
                    const float v = chunk.data[shape.element(layer, kv, t, hd)];
                    lo = std::min(lo, v);
                    hi = std::max(hi, v);
                }
                float scale = 1.0f;
                if (hi > lo) {
                    scale = static_cast<float>((static_cast<double>(hi) - lo) / levels);
                    if (!(scale > 0.0f)) scale = std::numeric_limits<float>::denorm_min();
                }
                const std::size_t c = shape.channel(layer, kv, hd);
                out.scales[c] = scale;
                out.zero_points[c] = lo;
                for (std::size_t t = 0; t < shape.tokens; ++t) {
                    const std::size_t e = shape.element(layer, kv, t, hd);
                    // nearbyint under the default rounding mode: ties to even.
                    double q = std::nearbyint((static_cast<double>(chunk.data[e]) - lo) / scale);
                    q = std::clamp(q, 0.0, levels);
                    codes[e] = static_cast<std::uint8_t>(q);
                }
            }
        }
    }
    out.packed = pack_codes(codes, bits);
    return out;
}

QuantizedChunkPayload store_raw(const ChunkTensor& chunk) {
    const ChunkShape& shape = chunk.shape;
    if (shape.elements() == 0 || chunk.data.size() != shape.elements()) {
        raise(Errc::argument, "chunk tensor is empty or does not match its shape");
    }
    QuantizedChunkPayload out;
    out.shape = shape;
    out.bitwidth = kRawBitwidth;
    out.scales.assign(shape.channels(), 1.0f);
    out.zero_points.assign(shape.channels(), 0.0f);
    out.packed.resize(shape.elements() * sizeof(float));
    for (std::size_t i = 0; i < chunk.data.size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(chunk.data[i]);
        for (std::size_t b = 0; b < 4; ++b) {
            out.packed[i * 4 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
        }
    }
    return out;
}

void validate(const QuantizedChunkPayload& payload) {
    const ChunkShape& shape = payload.shape;
    if (!is_storage_bitwidth(payload.bitwidth)) {
        raise(Errc::format, "payload bitwidth " + std::to_string(payload.bitwidth) + " is invalid");
    }
    if (shape.elements() == 0) raise(Errc::format, "payload describes an empty chunk");
    if (payload.scales.size() != shape.channels() || payload.zero_points.size() != shape.channels()) {
        raise(Errc::format, "per-channel metadata does not match the chunk shape");
    }
    const std::size_t expected = payload_bytes(shape, payload.bitwidth);
    if (payload.packed.size() < expected) raise(Errc::format, "payload is truncated");
    if (payload.packed.size() > expected) raise(Errc::format, "payload has trailing bytes");
    if (payload.bitwidth == kRawBitwidth) return;
    for (std::size_t c = 0; c < shape.channels(); ++c) {
        if (!std::isfinite(payload.scales[c]) || !(payload.scales[c] > 0.0f) ||
            !std::isfinite(payload.zero_points[c])) {
            raise(Errc::format, "channel " + std::to_string(c) + " has an invalid scale");
        }
    }
    // Slots past the last element must decode to code 0; anything else is a
    // code outside the chunk.
    const std::size_t used_bits = shape.elements() * static_cast<std::size_t>(payload.bitwidth);
    if (used_bits % 8 != 0) {
        const auto spare = static_cast<unsigned>(payload.packed.back() >> (used_bits % 8));
        if (spare != 0) raise(Errc::format, "packed payload has a code beyond the chunk");
    }
}

std::vector<std::uint8_t> codes_of(const QuantizedChunkPayload& payload) {
    validate(payload);
    if (payload.bitwidth == kRawBitwidth) raise(Errc::argument, "raw payloads carry no codes");
    return unpack_codes(payload.packed, payload.bitwidth, payload.shape.elements());
}

ChunkTensor dequantize(const QuantizedChunkPayload& payload) {
    validate(payload);
    const ChunkShape& shape = payload.shape;
    ChunkTensor out{shape, std::vector<float>(shape.elements())};
    if (payload.bitwidth == kRawBitwidth) {
        for (std::size_t i = 0; i < out.data.size(); ++i) {
            std::uint32_t bits = 0;
            for (std::size_t b = 0; b < 4; ++b) {
                bits |= static_cast<std::uint32_t>(payload.packed[i * 4 + b]) << (8 * b);
            }
            out.data[i] = std::bit_cast<float>(bits);
        }
        return out;
    }
    const auto codes = unpack_codes(payload.packed, payload.bitwidth, shape.elements());
    const unsigned top = max_code(payload.bitwidth);
    const std::size_t hidden = shape.hidden();
    for (std::size_t layer = 0; layer < shape.layers; ++layer) {
        for (std::size_t kv = 0; kv < 2; ++kv) {
            for (std::size_t hd = 0; hd < hidden; ++hd) {
                const std::size_t c = shape.channel(layer, kv, hd);
                const double scale = payload.scales[c];
                const double zero = payload.zero_points[c];
                for (std::size_t t = 0; t < shape.tokens; ++t) {
                    const std::size_t e = shape.element(layer, kv, t, hd);
                    if (codes[e] > top) raise(Errc::format, "code out of range");
                    out.data[e] = static_cast<float>(codes[e] * scale + zero);
                }
            }
        }
    }
    return out;
}

QuantizedChunkPayload requantize(const QuantizedChunkPayload& payload, int lower_bits) {
    require_code_bits(lower_bits);
    if (lower_bits >= payload.bitwidth) {
        raise(Errc::argument, "requantize needs a bitwidth below the current " +
                                  std::to_string(payload.bitwidth));
    }
    return quantize(dequantize(payload), lower_bits);
}

}  // namespace llmctx::quant
