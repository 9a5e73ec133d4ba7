// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The rvqcomm Authors

#include "rvqcomm/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "rvqcomm/detail/bytes.hpp"
#include "rvqcomm/error.hpp"
#include "rvqcomm/rng.hpp"

namespace rvqcomm {

namespace {

constexpr double kBackgroundSigma = 0.02;

double to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

struct ClassProfile {
    std::vector<double> amplitude;  // zero for inactive channels
};

std::vector<ClassProfile> make_profiles(const SceneSpec& spec) {
    Rng rng(spec.profile_seed);
    std::vector<ClassProfile> profiles(spec.n_classes);
    for (auto& prof : profiles) {
        prof.amplitude.assign(spec.channels, 0.0);
        bool any = false;
        for (auto& a : prof.amplitude) {
            if (rng.uniform() >= spec.channel_sparsity) {
                a = rng.uniform(0.6, 1.4);
                any = true;
            }
        }
        if (!any) prof.amplitude[rng.below(spec.channels)] = rng.uniform(0.6, 1.4);
    }
    return profiles;
}

}  // namespace

void SceneSpec::validate() const {
    if (height == 0 || width == 0 || channels == 0) throw ConfigError("scene dimensions must be positive");
    if (!(background_fraction > 0.0 && background_fraction <= 1.0)) {
        throw ConfigError("background fraction must lie in (0, 1]");
    }
    if (!(channel_sparsity >= 0.0 && channel_sparsity < 1.0)) throw ConfigError("channel sparsity must lie in [0, 1)");
    if (!(blob_scale > 0.0)) throw ConfigError("blob scale must be positive");
    if (background_fraction < 1.0 && (n_blobs == 0 || n_classes == 0)) {
        throw ConfigError("foreground requested but no blobs/classes configured");
    }
    const double blob_area = static_cast<double>(n_blobs) * std::numbers::pi * blob_scale * blob_scale;
    if (blob_area > static_cast<double>(height * width)) {
        throw ConfigError("blob area " + std::to_string(blob_area) + " exceeds map area " +
                          std::to_string(height * width));
    }
}

FeatureMap generate_scene(const SceneSpec& spec) {
    spec.validate();
    const size_t n_pixels = spec.height * spec.width;
    const size_t foreground = static_cast<size_t>(std::llround((1.0 - spec.background_fraction) * n_pixels));
    Rng rng(spec.seed);

    FeatureMap map(spec.height, spec.width, spec.channels);
    auto data = map.data();
    for (auto& v : data) v = to_float(std::min(std::abs(rng.normal(0.0, kBackgroundSigma)), kBackgroundCeiling));
    if (foreground == 0) return map;

    struct Blob {
        double y, x;
        size_t cls;
        double gain;
    };
    std::vector<Blob> blobs(spec.n_blobs);
    for (auto& b : blobs) {
        b.y = rng.uniform(0.0, static_cast<double>(spec.height));
        b.x = rng.uniform(0.0, static_cast<double>(spec.width));
        b.cls = rng.below(spec.n_classes);
        b.gain = rng.uniform(0.8, 1.2);
    }

    // Each pixel belongs to its strongest blob; the `foreground` strongest pixels become foreground.
    std::vector<double> strength(n_pixels, 0.0);
    std::vector<size_t> owner(n_pixels, 0);
    const double inv_two_var = 1.0 / (2.0 * spec.blob_scale * spec.blob_scale);
    for (size_t y = 0; y < spec.height; ++y) {
        for (size_t x = 0; x < spec.width; ++x) {
            const size_t p = y * spec.width + x;
            for (size_t b = 0; b < blobs.size(); ++b) {
                const double dy = static_cast<double>(y) + 0.5 - blobs[b].y;
                const double dx = static_cast<double>(x) + 0.5 - blobs[b].x;
                const double s = std::exp(-(dy * dy + dx * dx) * inv_two_var);
                if (s > strength[p]) {
                    strength[p] = s;
                    owner[p] = b;
                }
            }
        }
    }
    std::vector<size_t> order(n_pixels);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return strength[a] > strength[b]; });

    const auto profiles = make_profiles(spec);
    for (size_t i = 0; i < foreground; ++i) {
        const size_t p = order[i];
        const Blob& blob = blobs[owner[p]];
        const auto& amp = profiles[blob.cls].amplitude;
        const double envelope = 0.6 + 0.4 * strength[p];
        auto px = map.pixel(p);
        for (size_t c = 0; c < spec.channels; ++c) {
            if (amp[c] == 0.0) continue;
            const double jitter = std::max(0.5, 1.0 + 0.1 * rng.normal());
            px[c] = to_float(std::max(px[c], amp[c] * blob.gain * envelope * jitter));
        }
    }
    return map;
}

double background_fraction(const FeatureMap& map, double threshold) {
    size_t bg = 0;
    for (size_t p = 0; p < map.pixels(); ++p) {
        const auto px = map.pixel(p);
        double peak = 0.0;
        for (double v : px) peak = std::max(peak, std::abs(v));
        if (peak <= threshold) ++bg;
    }
    return static_cast<double>(bg) / static_cast<double>(map.pixels());
}

// ---------------------------------------------------------------------------
// RVQT

std::vector<uint8_t> serialize_tensor(const FeatureMap& map) {
    if (map.height() > UINT32_MAX || map.width() > UINT32_MAX || map.channels() > UINT32_MAX) {
        throw ConfigError("tensor dimensions exceed u32");
    }
    std::vector<uint8_t> out;
    out.reserve(20 + 4 * map.size());
    detail::ByteWriter w(out);
    w.bytes(kTensorMagic);
    w.u8(1);  // version
    w.u8(1);  // dtype: float32
    w.u16(0);
    w.u32(static_cast<uint32_t>(map.height()));
    w.u32(static_cast<uint32_t>(map.width()));
    w.u32(static_cast<uint32_t>(map.channels()));
    for (double v : map.data()) w.f32(v);
    return out;
}

FeatureMap parse_tensor(std::span<const uint8_t> bytes) {
    if (bytes.size() < 4 || !std::equal(kTensorMagic.begin(), kTensorMagic.end(), bytes.begin())) {
        throw IoError("tensor magic mismatch");
    }
    detail::ByteReader<IoError> r(bytes);
    r.bytes(4);
    const uint8_t version = r.u8();
    const uint8_t dtype = r.u8();
    r.u16();
    if (version != 1) throw IoError("unsupported tensor version " + std::to_string(version));
    if (dtype != 1) throw IoError("unsupported tensor dtype " + std::to_string(dtype));
    const uint64_t h = r.u32();
    const uint64_t w = r.u32();
    const uint64_t c = r.u32();
    if (h == 0 || w == 0 || c == 0) throw IoError("tensor header has a zero dimension");
    const uint64_t count = h * w * c;
    if (r.remaining() != count * 4) {
        throw IoError("tensor size mismatch: header implies " + std::to_string(count * 4) + " data bytes, file has " +
                      std::to_string(r.remaining()));
    }
    std::vector<double> data(count);
    for (auto& v : data) v = r.f32();
    try {
        return FeatureMap(h, w, c, std::move(data));
    } catch (const ConfigError& e) {
        throw IoError(std::string("tensor content invalid: ") + e.what());
    }
}

void save_tensor(const FeatureMap& map, const std::string& path) { detail::write_file(path, serialize_tensor(map)); }

FeatureMap load_tensor(const std::string& path) { return parse_tensor(detail::read_file(path)); }

// ---------------------------------------------------------------------------
// Corpora

SyntheticCorpus::SyntheticCorpus(SceneSpec base, size_t count, uint64_t corpus_seed, bool cache)
    : base_(base), count_(count), corpus_seed_(corpus_seed) {
    base_.validate();
    if (cache) {
        cache_.reserve(count);
        for (size_t i = 0; i < count; ++i) {
            const auto map = generate_scene(spec_for(i));
            cache_.emplace_back(map.data().begin(), map.data().end());
        }
    }
}

SceneSpec SyntheticCorpus::spec_for(size_t i) const {
    SceneSpec s = base_;
    s.seed = Rng::derive(corpus_seed_, i);
    return s;
}

FeatureMap SyntheticCorpus::at(size_t i) const {
    if (i >= count_) throw ConfigError("corpus index out of range");
    if (cache_.empty()) return generate_scene(spec_for(i));
    const auto& c = cache_[i];
    return FeatureMap(base_.height, base_.width, base_.channels, std::vector<double>(c.begin(), c.end()));
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "# path split\n";
    for (const auto& e : entries) out << e.path << ' ' << e.split << '\n';
    if (!out) throw IoError("write failure on " + path);
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path);
    const auto base = std::filesystem::path(path).parent_path();
    std::vector<ManifestEntry> entries;
    std::string line;
    while (std::getline(in, line)) {
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        ManifestEntry e;
        if (!(ls >> e.path)) continue;
        if (!(ls >> e.split)) e.split = "train";
        if (std::filesystem::path(e.path).is_relative()) e.path = (base / e.path).string();
        entries.push_back(std::move(e));
    }
    return entries;
}

}  // namespace rvqcomm
