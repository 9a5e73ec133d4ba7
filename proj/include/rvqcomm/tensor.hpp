// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The rvqcomm Authors

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace rvqcomm {

/// Dense H x W x C map, row-major over pixels, channels innermost.
///
/// Every value is finite; the constructors reject NaN/Inf. A 1x1 convolution over
/// this layout is a per-pixel matrix-vector product, which is all the codec needs.
class FeatureMap {
public:
    FeatureMap() = default;

    /// Zero-filled map.
    FeatureMap(size_t height, size_t width, size_t channels);

    FeatureMap(size_t height, size_t width, size_t channels, std::vector<double> data);

    size_t height() const noexcept { return height_; }
    size_t width() const noexcept { return width_; }
    size_t channels() const noexcept { return channels_; }
    size_t pixels() const noexcept { return height_ * width_; }
    size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }

    std::span<const double> pixel(size_t p) const noexcept { return {data_.data() + p * channels_, channels_}; }
    std::span<double> pixel(size_t p) noexcept { return {data_.data() + p * channels_, channels_}; }

    double at(size_t y, size_t x, size_t c) const noexcept { return data_[(y * width_ + x) * channels_ + c]; }
    double& at(size_t y, size_t x, size_t c) noexcept { return data_[(y * width_ + x) * channels_ + c]; }

    bool same_shape(const FeatureMap& other) const noexcept {
        return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
    }

    friend bool operator==(const FeatureMap&, const FeatureMap&) = default;

private:
    size_t height_ = 0;
    size_t width_ = 0;
    size_t channels_ = 0;
    std::vector<double> data_;
};

/// Per-pixel affine map: out = weights * in + bias, weights stored row-major (out x in).
struct ProjectionWeights {
    size_t in_channels = 0;
    size_t out_channels = 0;
    std::vector<double> weights;
    std::vector<double> bias;

    static ProjectionWeights zeros(size_t in_channels, size_t out_channels);
    static ProjectionWeights identity(size_t channels);

    double& w(size_t out, size_t in) noexcept { return weights[out * in_channels + in]; }
    double w(size_t out, size_t in) const noexcept { return weights[out * in_channels + in]; }

    /// Throws ConfigError on inconsistent sizes or non-finite entries.
    void validate() const;

    friend bool operator==(const ProjectionWeights&, const ProjectionWeights&) = default;
};

struct GroupNormParams {
    size_t channels = 0;
    size_t groups = 1;
    std::vector<double> gain;
    std::vector<double> shift;
    double epsilon = 1e-5;

    /// Unit gain, zero shift.
    static GroupNormParams plain(size_t channels, size_t groups, double epsilon = 1e-5);

    size_t channels_per_group() const noexcept { return channels / groups; }

    void validate() const;

    friend bool operator==(const GroupNormParams&, const GroupNormParams&) = default;
};

/// Mean and 1/sqrt(var + eps) per group, computed over all pixels and the group's channels.
struct GroupStats {
    std::vector<double> mean;
    std::vector<double> inv_std;
};

FeatureMap apply_projection(const FeatureMap& map, const ProjectionWeights& w);

GroupStats group_statistics(const FeatureMap& map, size_t groups, double epsilon);

FeatureMap group_normalize(const FeatureMap& map, const GroupNormParams& p);

FeatureMap relu(const FeatureMap& map);

}  // namespace rvqcomm
