// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The rvqcomm Authors

#pragma once

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rvqcomm/error.hpp"

namespace rvqcomm::detail {

/// Appends little-endian fields to a byte vector.
class ByteWriter {
public:
    explicit ByteWriter(std::vector<uint8_t>& out) : out_(out) {}

    // resize + copy rather than insert: GCC 11 flags the range insert with a bogus
    // -Wstringop-overflow at -O2.
    void bytes(std::span<const uint8_t> b) {
        const size_t at = out_.size();
        out_.resize(at + b.size());
        std::copy(b.begin(), b.end(), out_.begin() + static_cast<std::ptrdiff_t>(at));
    }
    void u8(uint8_t v) { out_.push_back(v); }
    void u16(uint16_t v) { put(v, 2); }
    void u32(uint32_t v) { put(v, 4); }
    void u64(uint64_t v) { put(v, 8); }
    void f32(double v) { u32(std::bit_cast<uint32_t>(static_cast<float>(v))); }
    void f64(double v) { u64(std::bit_cast<uint64_t>(v)); }

private:
    void put(uint64_t v, int n) {
        for (int i = 0; i < n; ++i) out_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }

    std::vector<uint8_t>& out_;
};

/// Reads little-endian fields; running off the end throws the supplied error type.
template <typename ShortError>
class ByteReader {
public:
    explicit ByteReader(std::span<const uint8_t> in) : in_(in) {}

    size_t offset() const noexcept { return pos_; }
    size_t remaining() const noexcept { return in_.size() - pos_; }

    std::span<const uint8_t> bytes(size_t n) {
        need(n);
        auto s = in_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    uint8_t u8() { return static_cast<uint8_t>(get(1)); }
    uint16_t u16() { return static_cast<uint16_t>(get(2)); }
    uint32_t u32() { return static_cast<uint32_t>(get(4)); }
    uint64_t u64() { return get(8); }
    double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
    double f64() { return std::bit_cast<double>(u64()); }

private:
    void need(size_t n) const {
        if (remaining() < n) {
            throw ShortError("unexpected end of data at byte " + std::to_string(pos_) + " (need " + std::to_string(n) +
                             ", have " + std::to_string(remaining()) + ")");
        }
    }
    uint64_t get(int n) {
        need(static_cast<size_t>(n));
        uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<uint64_t>(in_[pos_ + i]) << (8 * i);
        pos_ += static_cast<size_t>(n);
        return v;
    }

    std::span<const uint8_t> in_;
    size_t pos_ = 0;
};

std::vector<uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const uint8_t> bytes);

}  // namespace rvqcomm::detail
