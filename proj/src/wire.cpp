// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The rvqcomm Authors

#include "rvqcomm/wire.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>

#include "rvqcomm/detail/bytes.hpp"
#include "rvqcomm/error.hpp"

namespace rvqcomm {

namespace detail {

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path + " for reading");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failure on " + path);
    return bytes;
}

void write_file(const std::string& path, std::span<const uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failure on " + path);
}

}  // namespace detail

namespace {

/// MSB-first bit sink.
class BitWriter {
public:
    explicit BitWriter(std::vector<uint8_t>& out) : out_(out) {}

    void put(uint32_t value, unsigned bits) {
        acc_ = (acc_ << bits) | (value & ((1ull << bits) - 1));
        filled_ += bits;
        while (filled_ >= 8) {
            filled_ -= 8;
            out_.push_back(static_cast<uint8_t>(acc_ >> filled_));
        }
    }

    void flush() {
        if (filled_ > 0) out_.push_back(static_cast<uint8_t>(acc_ << (8 - filled_)));
        filled_ = 0;
        acc_ = 0;
    }

private:
    std::vector<uint8_t>& out_;
    uint64_t acc_ = 0;
    unsigned filled_ = 0;
};

class BitReader {
public:
    explicit BitReader(std::span<const uint8_t> in) : in_(in) {}

    uint32_t get(unsigned bits) {
        while (filled_ < bits) {
            acc_ = (acc_ << 8) | in_[pos_++];
            filled_ += 8;
        }
        filled_ -= bits;
        return static_cast<uint32_t>((acc_ >> filled_) & ((1ull << bits) - 1));
    }

private:
    std::span<const uint8_t> in_;
    size_t pos_ = 0;
    uint64_t acc_ = 0;
    unsigned filled_ = 0;
};

uint64_t bitstream_bytes(const PayloadHeader& h) {
    return (payload_size_bits(h.height, h.width, h.stages, 1ull << h.log2_k) + 7) / 8;
}

}  // namespace

uint64_t payload_size_bits(uint64_t height, uint64_t width, uint64_t stages, uint64_t codebook_size) {
    if (!is_power_of_two(codebook_size)) throw ConfigError("codebook size must be a power of two");
    return height * width * stages * log2_exact(codebook_size);
}

Payload pack(const IndexMap& idx, uint64_t codebook_hash, uint32_t frame_id, uint16_t agent_id) {
    if (idx.codebook_size < 2 || idx.codebook_size > 65536 || !is_power_of_two(idx.codebook_size)) {
        throw ConfigError("codebook size must be a power of two in [2, 65536]");
    }
    if (idx.height == 0 || idx.height > UINT16_MAX || idx.width == 0 || idx.width > UINT16_MAX) {
        throw ConfigError("map dimensions must fit in u16");
    }
    if (idx.stages == 0 || idx.stages > UINT8_MAX) throw ConfigError("stage count must fit in u8");
    idx.validate();

    Payload p;
    p.header.height = static_cast<uint16_t>(idx.height);
    p.header.width = static_cast<uint16_t>(idx.width);
    p.header.stages = static_cast<uint8_t>(idx.stages);
    p.header.log2_k = static_cast<uint8_t>(log2_exact(idx.codebook_size));
    p.header.codebook_hash = codebook_hash;
    p.header.frame_id = frame_id;
    p.header.agent_id = agent_id;

    p.bitstream.reserve(bitstream_bytes(p.header));
    BitWriter bw(p.bitstream);
    for (uint16_t k : idx.indices) bw.put(k, p.header.log2_k);
    bw.flush();
    return p;
}

std::vector<uint8_t> serialize_payload(const Payload& payload) {
    std::vector<uint8_t> out;
    out.reserve(payload.wire_bytes());
    detail::ByteWriter w(out);
    w.bytes(kPayloadMagic);
    const auto& h = payload.header;
    w.u8(h.version);
    w.u16(h.height);
    w.u16(h.width);
    w.u8(h.stages);
    w.u8(h.log2_k);
    w.u64(h.codebook_hash);
    w.u32(h.frame_id);
    w.u16(h.agent_id);
    w.bytes(payload.bitstream);
    return out;
}

Payload parse_payload(std::span<const uint8_t> bytes) {
    if (bytes.size() < kPayloadMagic.size() || !std::equal(kPayloadMagic.begin(), kPayloadMagic.end(), bytes.begin())) {
        throw ProtocolError("payload magic mismatch");
    }
    detail::ByteReader<TruncationError> r(bytes);
    r.bytes(kPayloadMagic.size());
    Payload p;
    auto& h = p.header;
    h.version = r.u8();
    if (h.version != kPayloadVersion) throw ProtocolError("unsupported payload version " + std::to_string(h.version));
    h.height = r.u16();
    h.width = r.u16();
    h.stages = r.u8();
    h.log2_k = r.u8();
    h.codebook_hash = r.u64();
    h.frame_id = r.u32();
    h.agent_id = r.u16();
    if (h.log2_k < 1 || h.log2_k > 16) throw ProtocolError("log2_K " + std::to_string(h.log2_k) + " outside [1, 16]");
    if (h.height == 0 || h.width == 0 || h.stages == 0) throw ProtocolError("payload header has a zero dimension");

    const uint64_t expected = bitstream_bytes(h);
    if (r.remaining() != expected) {
        throw TruncationError("payload bitstream is " + std::to_string(r.remaining()) + " bytes, header implies " +
                              std::to_string(expected));
    }
    const auto body = r.bytes(expected);
    p.bitstream.assign(body.begin(), body.end());

    const uint64_t pad = expected * 8 - payload_size_bits(h.height, h.width, h.stages, 1ull << h.log2_k);
    if (pad > 0 && (p.bitstream.back() & ((1u << pad) - 1)) != 0) {
        throw ProtocolError("non-zero padding bits in payload");
    }
    return p;
}

IndexMap unpack_indices(const Payload& payload) {
    const auto& h = payload.header;
    if (h.log2_k < 1 || h.log2_k > 16) throw ProtocolError("log2_K outside [1, 16]");
    if (payload.bitstream.size() != bitstream_bytes(h)) throw TruncationError("bitstream length mismatch");

    IndexMap idx(h.height, h.width, h.stages, size_t{1} << h.log2_k);
    BitReader br(payload.bitstream);
    for (auto& k : idx.indices) k = static_cast<uint16_t>(br.get(h.log2_k));
    return idx;
}

IndexMap unpack(const Payload& payload, const CodebookStack& local) {
    const uint64_t local_hash = local.content_hash();
    if (payload.header.codebook_hash != local_hash) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "codebook desync: payload hash %016llx, local %016llx",
                      static_cast<unsigned long long>(payload.header.codebook_hash),
                      static_cast<unsigned long long>(local_hash));
        throw DesyncError(buf);
    }
    IndexMap idx = unpack_indices(payload);
    if (idx.stages != local.num_stages() || idx.codebook_size != local.codebook_size()) {
        throw CorruptPayloadError("payload n_q/K do not match local codebooks");
    }
    return idx;
}

// ---------------------------------------------------------------------------
// Bundles

namespace {

void write_projection(detail::ByteWriter& w, const ProjectionWeights& p) {
    for (double v : p.weights) w.f32(v);
    for (double v : p.bias) w.f32(v);
}

void write_norm(detail::ByteWriter& w, const GroupNormParams& n) {
    for (double v : n.gain) w.f32(v);
    for (double v : n.shift) w.f32(v);
    w.f32(n.epsilon);
}

ProjectionWeights read_projection(detail::ByteReader<IoError>& r, size_t in, size_t out) {
    auto p = ProjectionWeights::zeros(in, out);
    for (auto& v : p.weights) v = r.f32();
    for (auto& v : p.bias) v = r.f32();
    return p;
}

GroupNormParams read_norm(detail::ByteReader<IoError>& r, size_t channels, size_t groups) {
    auto n = GroupNormParams::plain(channels, groups);
    for (auto& v : n.gain) v = r.f32();
    for (auto& v : n.shift) v = r.f32();
    n.epsilon = r.f32();
    return n;
}

}  // namespace

std::vector<uint8_t> serialize_bundle(const CodecModel& model) {
    model.validate();
    const auto& cfg = model.config;
    if (cfg.channels > UINT16_MAX || cfg.codebook_size > UINT16_MAX || cfg.groups > UINT8_MAX) {
        throw ConfigError("model dimensions exceed bundle header field widths");
    }

    std::vector<uint8_t> params;
    detail::ByteWriter pw(params);
    write_projection(pw, model.reduce_proj);
    write_norm(pw, model.reduce_norm);
    write_projection(pw, model.post_affine);
    write_norm(pw, model.expand_norm);
    write_projection(pw, model.expand_proj);
    for (size_t s = 0; s < model.codebooks.num_stages(); ++s) {
        for (double v : model.codebooks.stage(s).entries()) pw.f32(v);
    }

    std::vector<uint8_t> out;
    out.reserve(kBundleHeaderBytes + params.size());
    detail::ByteWriter w(out);
    w.bytes(kBundleMagic);
    w.u8(kBundleVersion);
    w.u16(static_cast<uint16_t>(cfg.channels));
    w.u16(static_cast<uint16_t>(cfg.reduced_channels()));
    w.u8(static_cast<uint8_t>(cfg.stages));
    w.u16(static_cast<uint16_t>(cfg.codebook_size));
    w.u8(static_cast<uint8_t>(cfg.groups));
    w.u64(fnv1a64(params));
    w.bytes(params);
    return out;
}

CodecModel parse_bundle(std::span<const uint8_t> bytes, size_t* consumed) {
    if (bytes.size() < kBundleMagic.size() || !std::equal(kBundleMagic.begin(), kBundleMagic.end(), bytes.begin())) {
        throw IoError("bundle magic mismatch");
    }
    detail::ByteReader<IoError> r(bytes);
    r.bytes(kBundleMagic.size());
    const uint8_t version = r.u8();
    if (version != kBundleVersion) throw IoError("unsupported bundle version " + std::to_string(version));

    CodecConfig cfg;
    cfg.channels = r.u16();
    const size_t cr = r.u16();
    cfg.stages = r.u8();
    cfg.codebook_size = r.u16();
    cfg.groups = r.u8();
    const uint64_t hash = r.u64();
    if (cr == 0 || cfg.channels % cr != 0) throw IoError("bundle has inconsistent C / C_r");
    cfg.reduction_ratio = cfg.channels / cr;
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw IoError(std::string("bundle header invalid: ") + e.what());
    }

    const size_t param_start = r.offset();
    CodecModel m;
    m.config = cfg;
    m.reduce_proj = read_projection(r, cfg.channels, cr);
    m.reduce_norm = read_norm(r, cr, cfg.groups);
    m.post_affine = read_projection(r, cr, cr);
    m.expand_norm = read_norm(r, cr, cfg.groups);
    m.expand_proj = read_projection(r, cr, cfg.channels);
    m.codebooks = CodebookStack(cfg.stages, cfg.codebook_size, cr);
    std::vector<double> entry(cr);
    for (size_t s = 0; s < cfg.stages; ++s) {
        for (size_t k = 0; k < cfg.codebook_size; ++k) {
            for (auto& v : entry) v = r.f32();
            m.codebooks.stage(s).set_entry(k, entry);
        }
    }
    const size_t param_end = r.offset();
    if (fnv1a64(bytes.subspan(param_start, param_end - param_start)) != hash) {
        throw IoError("bundle content hash mismatch");
    }
    if (consumed != nullptr) {
        *consumed = param_end;
    } else if (r.remaining() != 0) {
        throw IoError("trailing bytes after bundle");
    }

    m.config.epsilon = m.reduce_norm.epsilon;
    m.config.post_affine_bias =
        std::any_of(m.post_affine.bias.begin(), m.post_affine.bias.end(), [](double v) { return v != 0.0; });
    try {
        m.validate();
    } catch (const ConfigError& e) {
        throw IoError(std::string("bundle parameters invalid: ") + e.what());
    }
    m.codebooks_seeded = true;
    m.freeze();
    return m;
}

void save_bundle(const CodecModel& model, const std::string& path) {
    detail::write_file(path, serialize_bundle(model));
}

CodecModel load_bundle(const std::string& path) { return parse_bundle(detail::read_file(path)); }

}  // namespace rvqcomm
