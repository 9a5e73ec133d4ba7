// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The rvqcomm Authors

#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rvqcomm/tensor.hpp"

namespace rvqcomm {

/// Synthetic BEV-like scene: a dominant low-magnitude background with a few
/// high-magnitude blobs whose activations live in a sparse subset of channels.
struct SceneSpec {
    size_t height = 128;
    size_t width = 128;
    size_t channels = 256;
    double background_fraction = 0.97;
    size_t n_blobs = 12;
    double blob_scale = 4.0;
    /// Fraction of channels that are inactive in a blob class profile.
    double channel_sparsity = 0.75;
    /// Blobs draw their channel profile from this many shared classes.
    size_t n_classes = 3;
    /// Seeds the class profiles; shared across a corpus so classes mean the same thing in every scene.
    uint64_t profile_seed = 0x5EED;
    uint64_t seed = 0;

    void validate() const;
};

/// Background values never exceed this; foreground pixels always have at least one channel above
/// kForegroundFloor. Any threshold between the two separates them.
inline constexpr double kBackgroundCeiling = 0.1;
inline constexpr double kForegroundFloor = 0.14;

/// Values are rounded to float32 precision so scenes survive the RVQT format unchanged.
FeatureMap generate_scene(const SceneSpec& spec);

/// Fraction of pixels whose largest channel magnitude is at or below `threshold`.
double background_fraction(const FeatureMap& map, double threshold);

// RVQT tensor file: 20-byte header (magic "RVQT", u8 version=1, u8 dtype=1 (f32), u16 reserved,
// u32 H, u32 W, u32 C), then H*W*C float32, all little-endian, pixel-major row-major.

inline constexpr std::array<uint8_t, 4> kTensorMagic = {'R', 'V', 'Q', 'T'};

std::vector<uint8_t> serialize_tensor(const FeatureMap& map);
FeatureMap parse_tensor(std::span<const uint8_t> bytes);
void save_tensor(const FeatureMap& map, const std::string& path);
FeatureMap load_tensor(const std::string& path);

/// Random-access sequence of feature maps.
class Corpus {
public:
    virtual ~Corpus() = default;
    virtual size_t size() const = 0;
    virtual FeatureMap at(size_t i) const = 0;
};

class InMemoryCorpus : public Corpus {
public:
    explicit InMemoryCorpus(std::vector<FeatureMap> maps) : maps_(std::move(maps)) {}
    size_t size() const override { return maps_.size(); }
    FeatureMap at(size_t i) const override { return maps_.at(i); }

private:
    std::vector<FeatureMap> maps_;
};

/// Scenes generated from a template spec; scene i uses seed derive(corpus_seed, i).
/// With `cache` set, scenes are generated once and held as float32.
class SyntheticCorpus : public Corpus {
public:
    SyntheticCorpus(SceneSpec base, size_t count, uint64_t corpus_seed, bool cache = false);
    size_t size() const override { return count_; }
    FeatureMap at(size_t i) const override;

    SceneSpec spec_for(size_t i) const;

private:
    SceneSpec base_;
    size_t count_;
    uint64_t corpus_seed_;
    std::vector<std::vector<float>> cache_;
};

/// Tensor files loaded on access.
class FileCorpus : public Corpus {
public:
    explicit FileCorpus(std::vector<std::string> paths) : paths_(std::move(paths)) {}
    size_t size() const override { return paths_.size(); }
    FeatureMap at(size_t i) const override { return load_tensor(paths_.at(i)); }

private:
    std::vector<std::string> paths_;
};

/// Corpus manifest: one "path split" pair per line, '#' starts a comment.
/// Relative paths are resolved against the manifest's directory on read.
struct ManifestEntry {
    std::string path;
    std::string split;
};

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

}  // namespace rvqcomm
