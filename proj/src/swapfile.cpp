// Copyright (C) 2026 The llmctx Authors
// SPDX-License-Identifier: Apache-2.0

#include "llmctx/swapfile.hpp"

#include <zlib.h>

#include <bit>
#include <limits>
#include <string>

#include "llmctx/error.hpp"

namespace llmctx::swapfile {

namespace {

constexpr std::uint8_t kMagic[4] = {'L', 'L', 'M', 'C'};

class Writer {
public:
    explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}

    template <typename T>
    void uint(T v) {
        for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
    void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }

private:
    std::vector<std::uint8_t>& out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

    template <typename T>
    T uint() {
        need(sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(in_[pos_ + i]) << (8 * i));
        pos_ += sizeof(T);
        return v;
    }
    float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
    std::span<const std::uint8_t> bytes(std::size_t n) {
        need(n);
        auto s = in_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n) const {
        if (in_.size() - pos_ < n) raise(Errc::format, "swap file is truncated");
    }
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

template <typename T>
T checked(std::size_t v, const char* what) {
    if (v > std::numeric_limits<T>::max()) {
        raise(Errc::argument, std::string(what) + " does not fit the swap-file field");
    }
    return static_cast<T>(v);
}

}  // namespace

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in bounded pieces.
    constexpr std::size_t kPiece = 1u << 30;
    for (std::size_t off = 0; off < bytes.size(); off += kPiece) {
        const std::size_t n = std::min(kPiece, bytes.size() - off);
        crc = ::crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    }
    return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> encode(const SwapRecord& record) {
    const auto& p = record.payload;
    quant::validate(p);
    std::vector<std::uint8_t> out;
    Header h{record.ctx_id, record.chunk_index, record.token_start, p.bitwidth, p.shape};
    out.reserve(file_size(h));
    Writer w(out);
    w.bytes(kMagic);
    w.uint<std::uint16_t>(kVersion);
    w.uint<std::uint64_t>(record.ctx_id);
    w.uint<std::uint32_t>(record.chunk_index);
    w.uint<std::uint32_t>(record.token_start);
    w.uint<std::uint16_t>(checked<std::uint16_t>(p.shape.tokens, "token count"));
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(p.bitwidth));
    w.uint<std::uint16_t>(checked<std::uint16_t>(p.shape.layers, "layer count"));
    w.uint<std::uint16_t>(checked<std::uint16_t>(p.shape.heads, "head count"));
    w.uint<std::uint16_t>(checked<std::uint16_t>(p.shape.head_dim, "head dim"));
    for (float s : p.scales) w.f32(s);
    for (float z : p.zero_points) w.f32(z);
    w.bytes(p.packed);
    w.uint<std::uint32_t>(crc32(out));
    return out;
}

Header decode_header(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    const auto magic = r.bytes(4);
    if (!std::equal(magic.begin(), magic.end(), kMagic)) raise(Errc::format, "bad swap-file magic");
    const auto version = r.uint<std::uint16_t>();
    if (version != kVersion) {
        raise(Errc::format, "unsupported swap-file version " + std::to_string(version));
    }
    Header h;
    h.ctx_id = r.uint<std::uint64_t>();
    h.chunk_index = r.uint<std::uint32_t>();
    h.token_start = r.uint<std::uint32_t>();
    h.shape.tokens = r.uint<std::uint16_t>();
    h.bitwidth = r.uint<std::uint8_t>();
    h.shape.layers = r.uint<std::uint16_t>();
    h.shape.heads = r.uint<std::uint16_t>();
    h.shape.head_dim = r.uint<std::uint16_t>();
    if (!quant::is_storage_bitwidth(h.bitwidth)) {
        raise(Errc::format, "swap file has invalid bitwidth " + std::to_string(h.bitwidth));
    }
    if (h.shape.elements() == 0) raise(Errc::format, "swap file describes an empty chunk");
    return h;
}

std::size_t file_size(const Header& h) {
    return kHeaderBytes + quant::metadata_bytes(h.shape) + quant::payload_bytes(h.shape, h.bitwidth) +
           kCrcBytes;
}

LayerSlices layer_slices(const Header& h, std::size_t layer) {
    if (layer >= h.shape.layers) raise(Errc::argument, "layer outside the chunk");
    const std::size_t channels_per_layer = 2 * h.shape.hidden();
    const std::size_t channel_bytes = channels_per_layer * sizeof(float);
    const std::size_t all_channels = h.shape.channels() * sizeof(float);
    const std::size_t layer_bits = channels_per_layer * h.shape.tokens * static_cast<std::size_t>(h.bitwidth);
    if (layer_bits % 8 != 0) raise(Errc::format, "layer slice is not byte aligned");
    LayerSlices s;
    s.channel_bytes = channel_bytes;
    s.scales_offset = kHeaderBytes + layer * channel_bytes;
    s.zeros_offset = kHeaderBytes + all_channels + layer * channel_bytes;
    s.payload_bytes = layer_bits / 8;
    s.payload_offset = kHeaderBytes + 2 * all_channels + layer * s.payload_bytes;
    return s;
}

bool crc_matches(std::span<const std::uint8_t> file) {
    if (file.size() < kHeaderBytes + kCrcBytes) return false;
    const auto body = file.first(file.size() - kCrcBytes);
    Reader r(file.subspan(file.size() - kCrcBytes));
    return r.uint<std::uint32_t>() == crc32(body);
}

SwapRecord decode(std::span<const std::uint8_t> bytes) {
    const Header h = decode_header(bytes);
    const std::size_t expected = file_size(h);
    if (bytes.size() < expected) raise(Errc::format, "swap file is truncated");
    if (bytes.size() > expected) raise(Errc::format, "swap file has trailing bytes");
    if (!crc_matches(bytes)) raise(Errc::format, "swap-file CRC mismatch");

    Reader r(bytes.subspan(kHeaderBytes));
    SwapRecord rec;
    rec.ctx_id = h.ctx_id;
    rec.chunk_index = h.chunk_index;
    rec.token_start = h.token_start;
    rec.payload.shape = h.shape;
    rec.payload.bitwidth = h.bitwidth;
    const std::size_t channels = h.shape.channels();
    rec.payload.scales.resize(channels);
    rec.payload.zero_points.resize(channels);
    for (auto& s : rec.payload.scales) s = r.f32();
    for (auto& z : rec.payload.zero_points) z = r.f32();
    const auto packed = r.bytes(quant::payload_bytes(h.shape, h.bitwidth));
    rec.payload.packed.assign(packed.begin(), packed.end());
    quant::validate(rec.payload);
    return rec;
}

}  // namespace llmctx::swapfile
