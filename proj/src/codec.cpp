// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The rvqcomm Authors

#include "rvqcomm/codec.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <mutex>
#include <string>

#include "rvqcomm/error.hpp"
#include "rvqcomm/rng.hpp"

namespace rvqcomm {

namespace {

constexpr double kExpandInitGain = 0.05;
constexpr double kExpandInitBias = 0.1;
constexpr double kPostInitBias = 1.0;

double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

void round_all(std::vector<double>& values) {
    for (auto& v : values) v = round_to_float(v);
}

std::atomic<bool> g_audit_enabled{false};
std::mutex g_audit_mutex;
audit::TelescopingStats g_audit_stats;

}  // namespace

uint64_t fnv1a64(std::span<const uint8_t> bytes, uint64_t seed) noexcept {
    uint64_t h = seed;
    for (uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

void CodecConfig::validate() const {
    if (channels == 0) throw ConfigError("channels must be positive");
    if (reduction_ratio == 0) throw ConfigError("reduction ratio must be positive");
    if (channels % reduction_ratio != 0) {
        throw ConfigError("channels " + std::to_string(channels) + " not divisible by reduction ratio " +
                          std::to_string(reduction_ratio));
    }
    if (stages == 0 || stages > 255) throw ConfigError("stages must be in [1, 255]");
    if (codebook_size < 2 || !is_power_of_two(codebook_size) || codebook_size > 65536) {
        throw ConfigError("codebook size must be a power of two in [2, 65536], got " + std::to_string(codebook_size));
    }
    if (!(ema_alpha > 0.0 && ema_alpha < 1.0)) throw ConfigError("ema alpha must lie in (0, 1)");
    if (groups == 0 || reduced_channels() % groups != 0) {
        throw ConfigError("groups " + std::to_string(groups) + " must divide reduced channels " +
                          std::to_string(reduced_channels()));
    }
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
}

// ---------------------------------------------------------------------------
// Codebook

Codebook::Codebook(size_t stage, size_t size, size_t dim)
    : stage_(stage), size_(size), dim_(dim), entries_(size * dim, 0.0), usage_(size, 0) {}

void Codebook::require_mutable() const {
    if (frozen_) throw StateError("codebook for stage " + std::to_string(stage_) + " is frozen");
}

void Codebook::set_entry(size_t k, std::span<const double> values) {
    require_mutable();
    if (k >= size_ || values.size() != dim_) throw ConfigError("codebook entry index/dimension out of range");
    std::copy(values.begin(), values.end(), entries_.begin() + static_cast<std::ptrdiff_t>(k * dim_));
    ++revision_;
}

void Codebook::ema_update(size_t k, std::span<const double> residual, double alpha) {
    require_mutable();
    if (k >= size_) throw ConfigError("codebook index " + std::to_string(k) + " out of range");
    if (residual.size() != dim_) throw ConfigError("residual dimension mismatch");
    double* e = entries_.data() + k * dim_;
    const double keep = 1.0 - alpha;
    for (size_t c = 0; c < dim_; ++c) e[c] = keep * e[c] + alpha * residual[c];
    ++usage_[k];
    ++revision_;
}

void Codebook::reset_usage() noexcept { std::fill(usage_.begin(), usage_.end(), 0); }

void Codebook::freeze() {
    if (frozen_) return;
    round_all(entries_);
    ++revision_;
    frozen_ = true;
}

// ---------------------------------------------------------------------------
// CodebookStack

CodebookStack::CodebookStack(size_t stages, size_t codebook_size, size_t reduced_channels)
    : reduced_channels_(reduced_channels) {
    stages_.reserve(stages);
    for (size_t i = 0; i < stages; ++i) stages_.emplace_back(i, codebook_size, reduced_channels);
}

uint64_t CodebookStack::content_hash() const {
    uint64_t revision = 0;
    for (const auto& cb : stages_) revision += cb.revision();
    if (revision == cached_revision_) return cached_hash_;

    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& cb : stages_) {
        for (double v : cb.entries()) {
            const auto bits = std::bit_cast<uint32_t>(static_cast<float>(v));
            const uint8_t bytes[4] = {static_cast<uint8_t>(bits), static_cast<uint8_t>(bits >> 8),
                                      static_cast<uint8_t>(bits >> 16), static_cast<uint8_t>(bits >> 24)};
            h = fnv1a64(bytes, h);
        }
    }
    cached_hash_ = h;
    cached_revision_ = revision;
    return h;
}

void CodebookStack::freeze() {
    for (auto& cb : stages_) cb.freeze();
}

bool CodebookStack::frozen() const noexcept {
    return !stages_.empty() && std::all_of(stages_.begin(), stages_.end(), [](const Codebook& c) { return c.frozen(); });
}

CodebookStack CodebookStack::thawed() const {
    CodebookStack copy(num_stages(), codebook_size(), reduced_channels_);
    for (size_t s = 0; s < num_stages(); ++s) {
        for (size_t k = 0; k < codebook_size(); ++k) copy.stage(s).set_entry(k, stages_[s].entry(k));
    }
    return copy;
}

// ---------------------------------------------------------------------------
// IndexMap

IndexMap::IndexMap(size_t height, size_t width, size_t stages, size_t codebook_size)
    : height(height), width(width), stages(stages), codebook_size(codebook_size), indices(height * width * stages, 0) {}

void IndexMap::validate() const {
    if (indices.size() != height * width * stages) {
        throw CorruptPayloadError("index map length " + std::to_string(indices.size()) + " != H*W*n_q");
    }
    for (size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= codebook_size) {
            throw CorruptPayloadError("index " + std::to_string(indices[i]) + " at position " + std::to_string(i) +
                                      " exceeds codebook size " + std::to_string(codebook_size));
        }
    }
}

// ---------------------------------------------------------------------------
// CodecModel

CodecModel CodecModel::create(const CodecConfig& config, uint64_t seed) {
    config.validate();
    const size_t c = config.channels;
    const size_t cr = config.reduced_channels();
    Rng rng(seed);

    auto random_projection = [&rng](size_t in, size_t out, bool with_bias, double gain = 1.0) {
        auto p = ProjectionWeights::zeros(in, out);
        const double bound = gain / std::sqrt(static_cast<double>(in));
        for (auto& w : p.weights) w = rng.uniform(-bound, bound);
        if (with_bias) {
            for (auto& b : p.bias) b = rng.uniform(-bound, bound);
        }
        return p;
    };

    CodecModel m;
    m.config = config;
    m.reduce_proj = random_projection(c, cr, false);
    m.reduce_norm = GroupNormParams::plain(cr, config.groups, config.epsilon);
    m.post_affine = random_projection(cr, cr, false);
    if (config.post_affine_bias) std::fill(m.post_affine.bias.begin(), m.post_affine.bias.end(), kPostInitBias);
    m.expand_norm = GroupNormParams::plain(cr, config.groups, config.epsilon);
    // Both decoder ReLUs start in their linear region (positive biases, small output weights), so no
    // unit is dead before the reconstruction gradient has shaped the weights.
    m.expand_proj = random_projection(cr, c, false, kExpandInitGain);
    std::fill(m.expand_proj.bias.begin(), m.expand_proj.bias.end(), kExpandInitBias);
    m.codebooks = CodebookStack(config.stages, config.codebook_size, cr);

    std::vector<double> v(cr);
    for (size_t s = 0; s < config.stages; ++s) {
        const double scale = 1.0 / static_cast<double>(s + 1);
        for (size_t k = 0; k < config.codebook_size; ++k) {
            for (auto& x : v) x = (s == 0 && k == 0) ? 0.0 : scale * rng.normal();
            m.codebooks.stage(s).set_entry(k, v);
        }
    }
    return m;
}

void CodecModel::validate() const {
    config.validate();
    const size_t c = config.channels;
    const size_t cr = config.reduced_channels();
    reduce_proj.validate();
    post_affine.validate();
    expand_proj.validate();
    reduce_norm.validate();
    expand_norm.validate();
    if (reduce_proj.in_channels != c || reduce_proj.out_channels != cr || post_affine.in_channels != cr ||
        post_affine.out_channels != cr || expand_proj.in_channels != cr || expand_proj.out_channels != c ||
        reduce_norm.channels != cr || expand_norm.channels != cr) {
        throw ConfigError("codec dimension chain C -> C_r -> C_r -> C is inconsistent");
    }
    if (codebooks.num_stages() != config.stages || codebooks.codebook_size() != config.codebook_size ||
        codebooks.reduced_channels() != cr) {
        throw ConfigError("codebook stack does not match codec config");
    }
    for (size_t st = 0; st < codebooks.num_stages(); ++st) {
        const auto e = codebooks.stage(st).entries();
        if (!std::all_of(e.begin(), e.end(), [](double v) { return std::isfinite(v); })) {
            throw ConfigError("codebook stage " + std::to_string(st) + " has non-finite entries");
        }
    }
}

void CodecModel::freeze() {
    for (auto* p : {&reduce_proj, &post_affine, &expand_proj}) {
        round_all(p->weights);
        round_all(p->bias);
    }
    for (auto* n : {&reduce_norm, &expand_norm}) {
        round_all(n->gain);
        round_all(n->shift);
        n->epsilon = round_to_float(n->epsilon);
    }
    config.epsilon = reduce_norm.epsilon;
    codebooks.freeze();
    frozen = true;
}

CodecModel CodecModel::thawed() const {
    CodecModel copy = *this;
    copy.codebooks = codebooks.thawed();
    copy.frozen = false;
    return copy;
}

// ---------------------------------------------------------------------------
// Operations

FeatureMap reduce(const CodecModel& model, const FeatureMap& f) {
    if (f.channels() != model.config.channels) {
        throw ConfigError("reduce expects " + std::to_string(model.config.channels) + " channels, got " +
                          std::to_string(f.channels()));
    }
    return group_normalize(apply_projection(f, model.reduce_proj), model.reduce_norm);
}

size_t nearest_entry(const Codebook& codebook, std::span<const double> vector) noexcept {
    const size_t dim = codebook.dim();
    const double* e = codebook.entries().data();
    const double* r = vector.data();
    size_t best = 0;
    double best_d = INFINITY;
    for (size_t k = 0; k < codebook.size(); ++k, e += dim) {
        double d = 0.0;
        for (size_t c = 0; c < dim; ++c) {
            const double diff = r[c] - e[c];
            d += diff * diff;
        }
        if (d < best_d) {
            best_d = d;
            best = k;
        }
    }
    return best;
}

namespace {

template <typename Stack>
QuantizeResult quantize_impl(Stack& stack, const FeatureMap& reduced, TrainingHook* hook) {
    const size_t n_q = stack.num_stages();
    const size_t dim = stack.reduced_channels();
    if (n_q == 0) throw ConfigError("codebook stack is empty");
    if (reduced.channels() != dim) {
        throw ConfigError("quantize expects " + std::to_string(dim) + " channels, got " +
                          std::to_string(reduced.channels()));
    }
    if (stack.frozen()) hook = nullptr;

    const bool audit_on = g_audit_enabled.load(std::memory_order_relaxed);
    audit::TelescopingStats local;

    QuantizeResult out{IndexMap(reduced.height(), reduced.width(), n_q, stack.codebook_size()),
                       std::vector<double>(n_q, 0.0), FeatureMap(reduced.height(), reduced.width(), dim),
                       FeatureMap(reduced.height(), reduced.width(), dim)};

    std::vector<double> r(dim);
    std::vector<double> q(dim);
    for (size_t p = 0; p < reduced.pixels(); ++p) {
        const auto r0 = reduced.pixel(p);
        auto zq = out.quantized.pixel(p);
        std::copy(r0.begin(), r0.end(), r.begin());
        for (size_t s = 0; s < n_q; ++s) {
            const Codebook& cb = stack.stage(s);
            const size_t k = nearest_entry(cb, r);
            out.indices.at(p, s) = static_cast<uint16_t>(k);
            const auto e = cb.entry(k);
            std::copy(e.begin(), e.end(), q.begin());
            if (hook != nullptr) hook->observe(s, k, r);
            double energy = 0.0;
            for (size_t c = 0; c < dim; ++c) {
                zq[c] += q[c];
                r[c] -= q[c];
                energy += r[c] * r[c];
            }
            out.residual_energy[s] += energy;
        }
        auto rf = out.residual.pixel(p);
        std::copy(r.begin(), r.end(), rf.begin());
        if (audit_on) {
            for (size_t c = 0; c < dim; ++c) {
                const double err = std::abs(zq[c] + r[c] - r0[c]);
                local.max_abs_error = std::max(local.max_abs_error, err);
                if (!(err <= audit::kTelescopingTolerance)) ++local.violations;
            }
            local.elements += dim;
        }
    }
    for (auto& e : out.residual_energy) e /= static_cast<double>(reduced.pixels());

    if (audit_on) {
        std::lock_guard lock(g_audit_mutex);
        ++g_audit_stats.calls;
        g_audit_stats.elements += local.elements;
        g_audit_stats.violations += local.violations;
        g_audit_stats.max_abs_error = std::max(g_audit_stats.max_abs_error, local.max_abs_error);
    }
    return out;
}

}  // namespace

QuantizeResult quantize(const CodebookStack& stack, const FeatureMap& reduced) {
    return quantize_impl(stack, reduced, nullptr);
}

QuantizeResult quantize(CodebookStack& stack, const FeatureMap& reduced, TrainingHook* hook) {
    return quantize_impl(stack, reduced, hook);
}

FeatureMap lookup_accumulate(const CodebookStack& stack, const IndexMap& idx) {
    if (idx.stages != stack.num_stages() || idx.codebook_size != stack.codebook_size()) {
        throw CorruptPayloadError("index map (n_q=" + std::to_string(idx.stages) + ", K=" +
                                  std::to_string(idx.codebook_size) + ") inconsistent with codebooks (n_q=" +
                                  std::to_string(stack.num_stages()) + ", K=" +
                                  std::to_string(stack.codebook_size()) + ")");
    }
    idx.validate();
    const size_t dim = stack.reduced_channels();
    FeatureMap z(idx.height, idx.width, dim);
    for (size_t p = 0; p < idx.pixels(); ++p) {
        auto out = z.pixel(p);
        for (size_t s = 0; s < idx.stages; ++s) {
            const auto e = stack.stage(s).entry(idx.at(p, s));
            for (size_t c = 0; c < dim; ++c) out[c] += e[c];
        }
    }
    return z;
}

FeatureMap decompress(const CodecModel& model, const IndexMap& idx) {
    const FeatureMap zq = lookup_accumulate(model.codebooks, idx);
    const FeatureMap post = relu(apply_projection(zq, model.post_affine));
    return relu(apply_projection(group_normalize(post, model.expand_norm), model.expand_proj));
}

IndexMap encode(const CodecModel& model, const FeatureMap& f) {
    return quantize(model.codebooks, reduce(model, f)).indices;
}

double bits_per_pixel(const CodecConfig& config) {
    if (!is_power_of_two(config.codebook_size)) throw ConfigError("codebook size must be a power of two");
    return static_cast<double>(config.stages * log2_exact(config.codebook_size));
}

double compression_ratio(const CodecConfig& config) {
    return 32.0 * static_cast<double>(config.channels) / bits_per_pixel(config);
}

std::vector<double> usage_histogram(const CodebookStack& stack, const IndexMap& idx, size_t stage) {
    if (stage >= stack.num_stages() || stage >= idx.stages) {
        throw ConfigError("stage " + std::to_string(stage) + " out of range");
    }
    std::vector<double> hist(stack.codebook_size(), 0.0);
    std::vector<uint64_t> counts(stack.codebook_size(), 0);
    for (size_t p = 0; p < idx.pixels(); ++p) {
        const auto k = idx.at(p, stage);
        if (k >= counts.size()) throw CorruptPayloadError("index out of codebook range");
        ++counts[k];
    }
    const double n = static_cast<double>(idx.pixels());
    for (size_t k = 0; k < counts.size(); ++k) hist[k] = static_cast<double>(counts[k]) / n;
    return hist;
}

namespace audit {

void enable_telescoping_checks(bool enabled) { g_audit_enabled.store(enabled); }

TelescopingStats telescoping_stats() {
    std::lock_guard lock(g_audit_mutex);
    return g_audit_stats;
}

void reset_telescoping_stats() {
    std::lock_guard lock(g_audit_mutex);
    g_audit_stats = {};
}

}  // namespace audit

}  // namespace rvqcomm
