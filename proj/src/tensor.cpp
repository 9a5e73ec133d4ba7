// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The rvqcomm Authors

#include "rvqcomm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "rvqcomm/error.hpp"

namespace rvqcomm {

namespace {

bool all_finite(std::span<const double> values) {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace

FeatureMap::FeatureMap(size_t height, size_t width, size_t channels)
    : height_(height), width_(width), channels_(channels), data_(height * width * channels, 0.0) {
    if (height == 0 || width == 0 || channels == 0) {
        throw ConfigError("feature map dimensions must be positive");
    }
}

FeatureMap::FeatureMap(size_t height, size_t width, size_t channels, std::vector<double> data)
    : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
    if (height == 0 || width == 0 || channels == 0) {
        throw ConfigError("feature map dimensions must be positive");
    }
    if (data_.size() != height * width * channels) {
        throw ConfigError("feature map data length " + std::to_string(data_.size()) + " != H*W*C " +
                          std::to_string(height * width * channels));
    }
    if (!all_finite(data_)) {
        throw ConfigError("feature map contains non-finite values");
    }
}

ProjectionWeights ProjectionWeights::zeros(size_t in_channels, size_t out_channels) {
    return {in_channels, out_channels, std::vector<double>(in_channels * out_channels, 0.0),
            std::vector<double>(out_channels, 0.0)};
}

ProjectionWeights ProjectionWeights::identity(size_t channels) {
    auto p = zeros(channels, channels);
    for (size_t i = 0; i < channels; ++i) p.w(i, i) = 1.0;
    return p;
}

void ProjectionWeights::validate() const {
    if (in_channels == 0 || out_channels == 0) throw ConfigError("projection channels must be positive");
    if (weights.size() != in_channels * out_channels || bias.size() != out_channels) {
        throw ConfigError("projection weight/bias sizes inconsistent with " + std::to_string(out_channels) + "x" +
                          std::to_string(in_channels));
    }
    if (!all_finite(weights) || !all_finite(bias)) throw ConfigError("projection has non-finite entries");
}

GroupNormParams GroupNormParams::plain(size_t channels, size_t groups, double epsilon) {
    return {channels, groups, std::vector<double>(channels, 1.0), std::vector<double>(channels, 0.0), epsilon};
}

void GroupNormParams::validate() const {
    if (channels == 0 || groups == 0) throw ConfigError("group norm channels/groups must be positive");
    if (channels % groups != 0) {
        throw ConfigError("group count " + std::to_string(groups) + " does not divide " + std::to_string(channels) +
                          " channels");
    }
    if (!(epsilon > 0.0)) throw ConfigError("group norm epsilon must be positive");
    if (gain.size() != channels || shift.size() != channels) throw ConfigError("group norm gain/shift size mismatch");
    if (!all_finite(gain) || !all_finite(shift)) throw ConfigError("group norm has non-finite entries");
}

FeatureMap apply_projection(const FeatureMap& map, const ProjectionWeights& w) {
    w.validate();
    if (map.channels() != w.in_channels) {
        throw ConfigError("projection expects " + std::to_string(w.in_channels) + " channels, map has " +
                          std::to_string(map.channels()));
    }
    const size_t in = w.in_channels;
    const size_t out = w.out_channels;

    // Transposed copy so the inner loop runs over independent output accumulators.
    std::vector<double> wt(in * out);
    for (size_t o = 0; o < out; ++o) {
        for (size_t i = 0; i < in; ++i) wt[i * out + o] = w.weights[o * in + i];
    }

    FeatureMap result(map.height(), map.width(), out);
    for (size_t p = 0; p < map.pixels(); ++p) {
        const auto x = map.pixel(p);
        auto y = result.pixel(p);
        std::copy(w.bias.begin(), w.bias.end(), y.begin());
        for (size_t i = 0; i < in; ++i) {
            const double xi = x[i];
            const double* row = wt.data() + i * out;
            for (size_t o = 0; o < out; ++o) y[o] += row[o] * xi;
        }
    }
    return result;
}

GroupStats group_statistics(const FeatureMap& map, size_t groups, double epsilon) {
    const size_t channels = map.channels();
    const size_t per_group = channels / groups;
    const double count = static_cast<double>(map.pixels() * per_group);

    GroupStats stats{std::vector<double>(groups, 0.0), std::vector<double>(groups, 0.0)};
    std::vector<double> var(groups, 0.0);
    for (size_t p = 0; p < map.pixels(); ++p) {
        const auto x = map.pixel(p);
        for (size_t c = 0; c < channels; ++c) stats.mean[c / per_group] += x[c];
    }
    for (auto& m : stats.mean) m /= count;
    for (size_t p = 0; p < map.pixels(); ++p) {
        const auto x = map.pixel(p);
        for (size_t c = 0; c < channels; ++c) {
            const double d = x[c] - stats.mean[c / per_group];
            var[c / per_group] += d * d;
        }
    }
    for (size_t g = 0; g < groups; ++g) stats.inv_std[g] = 1.0 / std::sqrt(var[g] / count + epsilon);
    return stats;
}

FeatureMap group_normalize(const FeatureMap& map, const GroupNormParams& p) {
    p.validate();
    if (map.channels() != p.channels) {
        throw ConfigError("group norm expects " + std::to_string(p.channels) + " channels, map has " +
                          std::to_string(map.channels()));
    }
    const auto stats = group_statistics(map, p.groups, p.epsilon);
    const size_t per_group = p.channels_per_group();

    FeatureMap result(map.height(), map.width(), map.channels());
    for (size_t px = 0; px < map.pixels(); ++px) {
        const auto x = map.pixel(px);
        auto y = result.pixel(px);
        for (size_t c = 0; c < p.channels; ++c) {
            const size_t g = c / per_group;
            y[c] = (x[c] - stats.mean[g]) * stats.inv_std[g] * p.gain[c] + p.shift[c];
        }
    }
    return result;
}

FeatureMap relu(const FeatureMap& map) {
    FeatureMap result = map;
    for (auto& v : result.data()) v = std::max(v, 0.0);
    return result;
}

}  // namespace rvqcomm
