// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The rvqcomm Authors

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rvqcomm/codec.hpp"

namespace rvqcomm {

// Index payload ("RVQP"). Layout, all multi-byte fields little-endian:
//
//   0  magic "RVQP"     4
//   4  version          u8
//   5  height           u16
//   7  width            u16
//   9  n_q              u8
//  10  log2_K           u8
//  11  codebook_hash    u64
//  19  frame_id         u32
//  23  agent_id         u16
//  25  bitstream        ceil(H*W*n_q*log2_K / 8) bytes, MSB-first, zero padded

inline constexpr std::array<uint8_t, 4> kPayloadMagic = {'R', 'V', 'Q', 'P'};
inline constexpr uint8_t kPayloadVersion = 1;
inline constexpr size_t kPayloadHeaderBytes = 25;

struct PayloadHeader {
    uint8_t version = kPayloadVersion;
    uint16_t height = 0;
    uint16_t width = 0;
    uint8_t stages = 0;
    uint8_t log2_k = 0;
    uint64_t codebook_hash = 0;
    uint32_t frame_id = 0;
    uint16_t agent_id = 0;

    friend bool operator==(const PayloadHeader&, const PayloadHeader&) = default;
};

struct Payload {
    PayloadHeader header;
    std::vector<uint8_t> bitstream;

    size_t wire_bytes() const noexcept { return kPayloadHeaderBytes + bitstream.size(); }

    friend bool operator==(const Payload&, const Payload&) = default;
};

/// H * W * n_q * log2(K). K must be a power of two.
uint64_t payload_size_bits(uint64_t height, uint64_t width, uint64_t stages, uint64_t codebook_size);

/// Bit-packs an index map. Fields not derived from the map come from the caller.
Payload pack(const IndexMap& idx, uint64_t codebook_hash, uint32_t frame_id, uint16_t agent_id);

std::vector<uint8_t> serialize_payload(const Payload& payload);

/// Validates magic, version, header ranges and exact length.
/// Throws ProtocolError / TruncationError.
Payload parse_payload(std::span<const uint8_t> bytes);

/// Decodes the bitstream without checking it against any codebooks.
IndexMap unpack_indices(const Payload& payload);

/// Decodes after verifying the payload was produced against `local`.
/// Throws DesyncError on hash mismatch, CorruptPayloadError on n_q/K mismatch.
IndexMap unpack(const Payload& payload, const CodebookStack& local);

// Codebook bundle ("RVQC"). Header, little-endian:
//
//   0  magic "RVQC"     4
//   4  version          u8
//   5  C                u16
//   7  C_r              u16
//   9  n_q              u8
//  10  K                u16
//  12  groups           u8
//  13  content_hash     u64  (FNV-1a over the parameter section)
//  21  parameters       float32 LE, see docs/wire-format.md

inline constexpr std::array<uint8_t, 4> kBundleMagic = {'R', 'V', 'Q', 'C'};
inline constexpr uint8_t kBundleVersion = 1;
inline constexpr size_t kBundleHeaderBytes = 21;

std::vector<uint8_t> serialize_bundle(const CodecModel& model);

/// Parses a bundle; the result is frozen. Trailing bytes are reported through
/// `consumed` when non-null and rejected otherwise.
CodecModel parse_bundle(std::span<const uint8_t> bytes, size_t* consumed = nullptr);

void save_bundle(const CodecModel& model, const std::string& path);
CodecModel load_bundle(const std::string& path);

}  // namespace rvqcomm
