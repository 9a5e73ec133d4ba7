// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The rvqcomm Authors

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "rvqcomm/tensor.hpp"

namespace rvqcomm {

constexpr bool is_power_of_two(uint64_t x) noexcept { return x != 0 && (x & (x - 1)) == 0; }

/// log2 of a power of two. Caller guarantees is_power_of_two(x).
constexpr unsigned log2_exact(uint64_t x) noexcept {
    unsigned n = 0;
    while (x > 1) {
        x >>= 1;
        ++n;
    }
    return n;
}

/// 64-bit FNV-1a.
uint64_t fnv1a64(std::span<const uint8_t> bytes, uint64_t seed = 0xcbf29ce484222325ull) noexcept;

struct CodecConfig {
    size_t channels = 256;
    size_t reduction_ratio = 16;
    size_t stages = 3;
    size_t codebook_size = 64;
    double ema_alpha = 0.8;
    size_t groups = 4;
    bool post_affine_bias = true;
    double epsilon = 1e-5;

    size_t reduced_channels() const noexcept { return channels / reduction_ratio; }
    unsigned index_bits() const noexcept { return log2_exact(codebook_size); }

    /// Throws ConfigError when any invariant is violated.
    void validate() const;
};

/// K x dim table of code vectors for one quantization stage.
///
/// Mutations bump a revision counter so owners can cache derived data (the content hash).
/// A frozen codebook rejects every mutation with StateError.
class Codebook {
public:
    Codebook() = default;
    Codebook(size_t stage, size_t size, size_t dim);

    size_t stage() const noexcept { return stage_; }
    size_t size() const noexcept { return size_; }
    size_t dim() const noexcept { return dim_; }

    std::span<const double> entry(size_t k) const noexcept { return {entries_.data() + k * dim_, dim_}; }
    std::span<const double> entries() const noexcept { return entries_; }
    const std::vector<uint64_t>& usage_counts() const noexcept { return usage_; }

    void set_entry(size_t k, std::span<const double> values);

    /// e_k <- (1 - alpha) e_k + alpha r, and usage_counts[k] += 1.
    void ema_update(size_t k, std::span<const double> residual, double alpha);

    void reset_usage() noexcept;

    /// Rounds entries to float32 precision and blocks further mutation.
    void freeze();
    bool frozen() const noexcept { return frozen_; }
    uint64_t revision() const noexcept { return revision_; }

private:
    void require_mutable() const;

    size_t stage_ = 0;
    size_t size_ = 0;
    size_t dim_ = 0;
    std::vector<double> entries_;
    std::vector<uint64_t> usage_;
    uint64_t revision_ = 0;
    bool frozen_ = false;
};

/// The n_q pre-shared codebooks. All stages share K and the reduced channel count.
class CodebookStack {
public:
    CodebookStack() = default;
    CodebookStack(size_t stages, size_t codebook_size, size_t reduced_channels);

    size_t num_stages() const noexcept { return stages_.size(); }
    size_t codebook_size() const noexcept { return stages_.empty() ? 0 : stages_.front().size(); }
    size_t reduced_channels() const noexcept { return reduced_channels_; }

    const Codebook& stage(size_t i) const { return stages_.at(i); }
    Codebook& stage(size_t i) { return stages_.at(i); }

    /// FNV-1a over every entry serialized as little-endian float32, stage-major.
    /// Cached; recomputed lazily after any mutation.
    uint64_t content_hash() const;

    void freeze();
    bool frozen() const noexcept;

    /// Mutable copy with the same entries (usage counts reset).
    CodebookStack thawed() const;

private:
    std::vector<Codebook> stages_;
    size_t reduced_channels_ = 0;
    mutable uint64_t cached_hash_ = 0;
    mutable uint64_t cached_revision_ = UINT64_MAX;
};

/// Per-pixel code indices, pixels row-major and stages innermost.
struct IndexMap {
    size_t height = 0;
    size_t width = 0;
    size_t stages = 0;
    size_t codebook_size = 0;
    std::vector<uint16_t> indices;

    IndexMap() = default;
    IndexMap(size_t height, size_t width, size_t stages, size_t codebook_size);

    size_t pixels() const noexcept { return height * width; }
    uint16_t at(size_t pixel, size_t stage) const noexcept { return indices[pixel * stages + stage]; }
    uint16_t& at(size_t pixel, size_t stage) noexcept { return indices[pixel * stages + stage]; }

    /// Throws CorruptPayloadError on an out-of-range index or length mismatch.
    void validate() const;

    friend bool operator==(const IndexMap&, const IndexMap&) = default;
};

/// Full sender/receiver parameter set.
struct CodecModel {
    CodecConfig config;
    ProjectionWeights reduce_proj;   // C -> C_r
    GroupNormParams reduce_norm;     // over C_r
    ProjectionWeights post_affine;   // C_r -> C_r
    GroupNormParams expand_norm;     // over C_r
    ProjectionWeights expand_proj;   // C_r -> C
    CodebookStack codebooks;
    bool frozen = false;
    /// False until the trainer has seeded codebooks from data.
    bool codebooks_seeded = false;

    /// Random projections (uniform +-1/sqrt(fan_in); the decoder side starts with small
    /// expand weights and positive biases), plain norms, random codebooks with the stage-0
    /// zero entry reserved at slot 0.
    static CodecModel create(const CodecConfig& config, uint64_t seed);

    void validate() const;

    /// Rounds every parameter to float32 precision and freezes the codebooks.
    void freeze();

    /// Trainable copy of a frozen model.
    CodecModel thawed() const;
};

/// Observer for training-mode quantization. Receives the pre-quantization residual r^(i).
class TrainingHook {
public:
    virtual ~TrainingHook() = default;
    virtual void observe(size_t stage, size_t chosen, std::span<const double> residual) = 0;
};

struct QuantizeResult {
    IndexMap indices;
    /// Mean squared residual norm after each stage, length n_q.
    std::vector<double> residual_energy;
    /// z_q: per-pixel sum of the selected entries (values before any EMA update).
    FeatureMap quantized;
    /// r^(n_q).
    FeatureMap residual;
};

FeatureMap reduce(const CodecModel& model, const FeatureMap& f);

QuantizeResult quantize(const CodebookStack& stack, const FeatureMap& reduced);

/// Training-mode quantize. The hook is only invoked when the stack is not frozen.
QuantizeResult quantize(CodebookStack& stack, const FeatureMap& reduced, TrainingHook* hook);

/// Nearest entry by squared l2 in double precision; lowest index wins ties.
size_t nearest_entry(const Codebook& codebook, std::span<const double> vector) noexcept;

FeatureMap lookup_accumulate(const CodebookStack& stack, const IndexMap& idx);

FeatureMap decompress(const CodecModel& model, const IndexMap& idx);

IndexMap encode(const CodecModel& model, const FeatureMap& f);

double bits_per_pixel(const CodecConfig& config);

/// (32 * C) / bits_per_pixel.
double compression_ratio(const CodecConfig& config);

/// Fraction of pixels assigned to each code at the given stage.
std::vector<double> usage_histogram(const CodebookStack& stack, const IndexMap& idx, size_t stage);

namespace audit {

/// Runtime check of sum_i q^(i) + r^(n_q) == r^(0) on every quantize call.
struct TelescopingStats {
    uint64_t calls = 0;
    uint64_t elements = 0;
    uint64_t violations = 0;
    double max_abs_error = 0.0;
};

inline constexpr double kTelescopingTolerance = 1e-6;

void enable_telescoping_checks(bool enabled);
TelescopingStats telescoping_stats();
void reset_telescoping_stats();

}  // namespace audit

}  // namespace rvqcomm
