// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The rvqcomm Authors

#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "rvqcomm/datagen.hpp"
#include "rvqcomm/error.hpp"
#include "support/oracles.hpp"

using namespace rvqcomm;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "rvqcomm_test_datagen";
    fs::create_directories(dir);
    return dir / name;
}

// Independent count: a pixel is foreground when any channel exceeds the threshold.
double foreground_share(const FeatureMap& m, double threshold) {
    size_t fg = 0;
    for (size_t y = 0; y < m.height(); ++y) {
        for (size_t x = 0; x < m.width(); ++x) {
            bool any = false;
            for (size_t c = 0; c < m.channels() && !any; ++c) any = std::abs(m.at(y, x, c)) > threshold;
            fg += any ? 1 : 0;
        }
    }
    return static_cast<double>(fg) / static_cast<double>(m.pixels());
}

}  // namespace

TEST(Scene, AllBackgroundIsNearZero) {
    SceneSpec s;
    s.height = s.width = 32;
    s.channels = 16;
    s.background_fraction = 1.0;
    s.n_blobs = 0;
    const auto m = generate_scene(s);
    for (double v : m.data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, kBackgroundCeiling);
    }
}

TEST(Scene, Deterministic) {
    SceneSpec s;
    s.height = s.width = 48;
    s.channels = 32;
    s.n_blobs = 3;
    s.seed = 77;
    EXPECT_EQ(generate_scene(s), generate_scene(s));
    auto t = s;
    t.seed = 78;
    EXPECT_NE(generate_scene(s), generate_scene(t));
}

TEST(Scene, DefaultBackgroundFractionOverHundredSeeds) {
    SceneSpec s;
    for (uint64_t seed = 0; seed < 100; ++seed) {
        s.seed = seed;
        const auto m = generate_scene(s);
        const double bg = 1.0 - foreground_share(m, 0.12);
        ASSERT_NEAR(bg, 0.97, 0.02) << "seed " << seed;
        EXPECT_NEAR(background_fraction(m, 0.12), bg, 1e-15);
    }
}

TEST(Scene, ForegroundIsSparseInChannels) {
    SceneSpec s;
    s.seed = 5;
    const auto m = generate_scene(s);
    size_t active_max = 0;
    for (size_t p = 0; p < m.pixels(); ++p) {
        size_t active = 0;
        for (double v : m.pixel(p)) active += v > kForegroundFloor ? 1 : 0;
        active_max = std::max(active_max, active);
    }
    EXPECT_GT(active_max, 0u);
    // Profiles keep about a quarter of the channels; half is far outside binomial spread.
    EXPECT_LT(active_max, 128u);
}

TEST(Scene, SpecErrors) {
    SceneSpec s;
    s.height = s.width = 8;
    s.n_blobs = 10;
    s.blob_scale = 4.0;
    EXPECT_THROW(generate_scene(s), ConfigError);
    s = {};
    s.background_fraction = 0.0;
    EXPECT_THROW(s.validate(), ConfigError);
    s = {};
    s.n_blobs = 0;
    EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Tensor, SaveLoadRoundtrip) {
    const auto m = oracle::random_map(5, 6, 7, 3);
    const auto path = scratch("rt.rvqt").string();
    save_tensor(m, path);
    const auto back = load_tensor(path);
    ASSERT_TRUE(back.same_shape(m));
    for (size_t i = 0; i < m.size(); ++i) EXPECT_EQ(back.data()[i], static_cast<double>(static_cast<float>(m.data()[i])));
    // Float-exact maps survive bitwise.
    SceneSpec s;
    s.height = s.width = 16;
    s.channels = 8;
    s.n_blobs = 2;
    s.blob_scale = 2.0;
    const auto scene = generate_scene(s);
    save_tensor(scene, path);
    EXPECT_EQ(load_tensor(path), scene);
}

TEST(Tensor, TruncatedAndMalformedRejected) {
    auto bytes = serialize_tensor(oracle::random_map(2, 2, 2, 4));
    EXPECT_THROW(parse_tensor(std::span<const uint8_t>(bytes.data(), bytes.size() - 1)), IoError);
    EXPECT_THROW(parse_tensor(std::span<const uint8_t>(bytes.data(), 10)), IoError);
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(parse_tensor(bad), IoError);
    bad = bytes;
    bad[5] = 2;  // dtype
    EXPECT_THROW(parse_tensor(bad), IoError);
    EXPECT_THROW(load_tensor(scratch("missing.rvqt").string()), IoError);
}

TEST(Tensor, GoldenFixture) {
    const auto bytes = oracle::golden("tensor_2x3x4.rvqt");
    EXPECT_EQ(oracle::fnv1a64(bytes), 0x788611ee39d50753ull);
    const auto m = parse_tensor(bytes);
    ASSERT_EQ(m.height(), 2u);
    ASSERT_EQ(m.width(), 3u);
    ASSERT_EQ(m.channels(), 4u);
    for (size_t i = 0; i < m.size(); ++i) {
        const double want = static_cast<float>(std::fmod(static_cast<double>(i) * 0.37, 2.5) - 1.1);
        EXPECT_EQ(m.data()[i], want) << i;
    }
    EXPECT_EQ(serialize_tensor(m), bytes);
}

TEST(Corpus, SyntheticSeedsAreDerivedAndCached) {
    SceneSpec s;
    s.height = s.width = 24;
    s.channels = 8;
    s.n_blobs = 2;
    s.blob_scale = 2.0;
    SyntheticCorpus lazy(s, 3, 9, false), cached(s, 3, 9, true);
    for (size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(lazy.at(i), cached.at(i));
        EXPECT_EQ(lazy.at(i), generate_scene(lazy.spec_for(i)));
    }
    EXPECT_NE(lazy.at(0), lazy.at(1));
    EXPECT_THROW(lazy.at(3), ConfigError);
}

TEST(Corpus, ManifestRoundtripAndFileCorpus) {
    const auto dir = scratch("manifest_dir");
    fs::create_directories(dir);
    const auto a = oracle::random_map(2, 2, 3, 1);
    save_tensor(a, (dir / "a.rvqt").string());
    write_manifest((dir / "m.txt").string(), {{"a.rvqt", "train"}, {"a.rvqt", "val"}});
    const auto entries = read_manifest((dir / "m.txt").string());
    ASSERT_EQ(entries.size(), 2u);
    EXPECT_EQ(entries[1].split, "val");
    EXPECT_EQ(fs::path(entries[0].path), dir / "a.rvqt");
    FileCorpus files({entries[0].path});
    EXPECT_EQ(files.at(0), load_tensor((dir / "a.rvqt").string()));
}
