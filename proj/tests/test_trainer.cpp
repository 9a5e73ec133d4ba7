// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The rvqcomm Authors

#include <algorithm>
#include <cmath>
#include <filesystem>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "rvqcomm/datagen.hpp"
#include "rvqcomm/error.hpp"
#include "rvqcomm/trainer.hpp"
#include "support/oracles.hpp"

using namespace rvqcomm;

namespace {

CodecConfig tiny_config() {
    CodecConfig c;
    c.channels = 8;
    c.reduction_ratio = 2;
    c.stages = 2;
    c.codebook_size = 4;
    c.groups = 2;
    return c;
}

double relative_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

/// Residual MSE per element of the best affine rank-r reconstruction of the map's pixels.
double affine_pca_floor(const FeatureMap& f, size_t r) {
    const Eigen::Index n = static_cast<Eigen::Index>(f.pixels());
    const Eigen::Index c = static_cast<Eigen::Index>(f.channels());
    Eigen::MatrixXd x(n, c);
    for (Eigen::Index p = 0; p < n; ++p)
        for (Eigen::Index k = 0; k < c; ++k) x(p, k) = f.pixel(static_cast<size_t>(p))[static_cast<size_t>(k)];
    const Eigen::MatrixXd centred = x.rowwise() - x.colwise().mean();
    const Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    double tail = 0.0;  // eigenvalues ascend
    for (Eigen::Index i = 0; i < c - static_cast<Eigen::Index>(r); ++i) tail += std::max(0.0, es.eigenvalues()(i));
    return tail / static_cast<double>(c);
}

}  // namespace

// ---------------------------------------------------------------------------
// Closed-form pieces

TEST(Ema, FormulaAndLimit) {
    Codebook cb(0, 1, 3);
    const std::vector<double> v{1.0, 2.0, -3.0};
    ema_update(cb, 0, v, 0.8);
    for (size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(cb.entry(0)[c], 0.8 * v[c]);
    Codebook still(0, 1, 3);
    still.set_entry(0, v);
    ema_update(still, 0, std::vector<double>{9.0, 9.0, 9.0}, 1e-300);
    for (size_t c = 0; c < 3; ++c) EXPECT_EQ(still.entry(0)[c], v[c]);
}

TEST(Ema, GeometricRecurrence) {
    for (double alpha : {0.2, 0.8, 0.99}) {
        Codebook cb(0, 1, 4);
        const std::vector<double> e0{1.0, -2.0, 0.5, 3.0}, r{0.25, 0.75, -1.0, 2.0};
        cb.set_entry(0, e0);
        double d0 = 0.0;
        for (size_t c = 0; c < 4; ++c) d0 += (e0[c] - r[c]) * (e0[c] - r[c]);
        d0 = std::sqrt(d0);
        for (int t = 1; t <= 100; ++t) {
            ema_update(cb, 0, r, alpha);
            double d = 0.0;
            for (size_t c = 0; c < 4; ++c) d += std::pow(cb.entry(0)[c] - r[c], 2);
            ASSERT_NEAR(std::sqrt(d), std::pow(1.0 - alpha, t) * d0, 1e-10) << alpha << " t=" << t;
        }
    }
}

TEST(Commitment, Examples) {
    const auto z = oracle::random_map(3, 3, 4, 1);
    EXPECT_EQ(commitment_loss(z, z, 0.05), 0.0);
    FeatureMap a(2, 2, 2), b(2, 2, 2, std::vector<double>(8, 2.0));
    EXPECT_DOUBLE_EQ(commitment_loss(a, b, 0.05), 0.2);
    const auto q = oracle::random_map(3, 3, 4, 2);
    double sum = 0.0;
    for (size_t i = 0; i < z.size(); ++i) sum += std::pow(z.data()[i] - q.data()[i], 2);
    EXPECT_LT(relative_error(commitment_loss(z, q, 0.3), 0.3 * sum / 36.0), 1e-12);
}

TEST(Ortho, LossExamples) {
    auto w = ProjectionWeights::zeros(4, 2);
    w.w(0, 1) = 1.0;
    w.w(1, 3) = -1.0;
    EXPECT_EQ(ortho_loss(w, 0.5), 0.0);
    auto twice = ProjectionWeights::identity(3);
    for (auto& v : twice.weights) v *= 2.0;
    EXPECT_DOUBLE_EQ(ortho_loss(twice, 0.1), 0.1 * 9.0 * 3.0);

    const auto r = oracle::random_weights(6, 3, 4);
    double want = 0.0;
    for (size_t a = 0; a < 3; ++a) {
        for (size_t b = 0; b < 3; ++b) {
            double dot = 0.0;
            for (size_t i = 0; i < 6; ++i) dot += r.w(a, i) * r.w(b, i);
            want += std::pow(dot - (a == b ? 1.0 : 0.0), 2);
        }
    }
    EXPECT_LT(relative_error(ortho_loss(r, 1e-4), 1e-4 * want), 1e-12);
}

TEST(Ortho, GradientExamples) {
    auto w = ProjectionWeights::zeros(1, 1);
    w.weights = {2.0};
    EXPECT_DOUBLE_EQ(ortho_loss_gradient(w, 0.5)[0], 24.0 * 0.5);
    auto orth = ProjectionWeights::zeros(3, 2);
    orth.w(0, 0) = 1.0;
    orth.w(1, 2) = 1.0;
    for (double g : ortho_loss_gradient(orth, 1.0)) EXPECT_EQ(g, 0.0);
}

TEST(Ortho, GradientMatchesFiniteDifferences) {
    for (uint64_t trial = 0; trial < 20; ++trial) {
        auto w = oracle::random_weights(8, 4, 500 + trial);
        const auto g = ortho_loss_gradient(w, 0.7);
        double worst = 0.0;
        for (size_t i = 0; i < w.weights.size(); ++i) {
            const double keep = w.weights[i];
            w.weights[i] = keep + 1e-5;
            const double up = ortho_loss(w, 0.7);
            w.weights[i] = keep - 1e-5;
            const double down = ortho_loss(w, 0.7);
            w.weights[i] = keep;
            worst = std::max(worst, relative_error(g[i], (up - down) / 2e-5));
        }
        EXPECT_LT(worst, 1e-4) << "trial " << trial;
    }
}

TEST(Schedule, OneCycleShape) {
    const double peak = 1e-3;
    EXPECT_DOUBLE_EQ(one_cycle_lr(peak, 0, 100), peak / 25.0);
    EXPECT_DOUBLE_EQ(one_cycle_lr(peak, 30, 100), peak);
    EXPECT_NEAR(one_cycle_lr(peak, 99, 100), peak / 25.0, 1e-15);
    EXPECT_LT(one_cycle_lr(peak, 10, 100), one_cycle_lr(peak, 20, 100));
    EXPECT_GT(one_cycle_lr(peak, 50, 100), one_cycle_lr(peak, 80, 100));
}

// ---------------------------------------------------------------------------
// Projection gradients

TEST(Gradient, FitStepMatchesFiniteDifferences) {
    CodecConfig c;
    c.channels = 8;
    c.reduction_ratio = 2;
    c.stages = 2;
    c.codebook_size = 4;
    c.groups = 2;
    TrainingConfig cfg;
    cfg.beta_commit = 0.25;
    cfg.lambda_ortho = 0.1;
    // h near cbrt(machine epsilon) balances the O(h^2) truncation term (large third derivatives
    // through two GroupNorms) against round-off, and stays clear of most ReLU kinks.
    constexpr double h = 5e-6;
    for (uint64_t trial = 0; trial < 20; ++trial) {
        auto m = CodecModel::create(c, 900 + trial);
        Rng rng(trial);
        for (auto& g : m.reduce_norm.gain) g = rng.uniform(0.5, 1.5);
        for (auto& s : m.expand_norm.shift) s = rng.uniform(-0.5, 0.5);
        const auto f = oracle::random_map(4, 4, 8, 950 + trial, 0.0, 1.0);
        const auto fr = reduce(m, f);
        const auto st = StraightThrough::from(fr, quantize(m.codebooks, fr).quantized);
        const auto lg = loss_and_gradient(m, f, st, cfg);
        EXPECT_NEAR(lg.loss.total, proxy_loss(m, f, st, cfg), 1e-14);

        auto params = flatten_parameters(m);
        ASSERT_EQ(params.size(), lg.gradient.size());
        double worst = 0.0;
        size_t worst_i = 0;
        for (size_t i = 0; i < params.size(); ++i) {
            const double keep = params[i];
            params[i] = keep + h;
            assign_parameters(m, params);
            const double up = proxy_loss(m, f, st, cfg);
            params[i] = keep - h;
            assign_parameters(m, params);
            const double down = proxy_loss(m, f, st, cfg);
            params[i] = keep;
            assign_parameters(m, params);
            const double e = relative_error(lg.gradient[i], (up - down) / (2.0 * h));
            if (e > worst) {
                worst = e;
                worst_i = i;
            }
        }
        EXPECT_LT(worst, 1e-4) << "trial " << trial << " parameter " << worst_i;
    }
}

TEST(Gradient, ParameterFlattenRoundtrip) {
    auto m = CodecModel::create(tiny_config(), 3);
    auto p = flatten_parameters(m);
    for (auto& v : p) v += 0.5;
    assign_parameters(m, p);
    EXPECT_EQ(flatten_parameters(m), p);
    p.pop_back();
    EXPECT_THROW(assign_parameters(m, p), ConfigError);
}

// ---------------------------------------------------------------------------
// k-means oracle

TEST(KMeans, DegenerateCases) {
    PointSet pts{2, {0.0, 0.0, 1.0, 2.0, -3.0, 1.0}};
    auto c = kmeans_reference(pts, 3, 10, 1);
    std::vector<std::pair<double, double>> got, want{{0.0, 0.0}, {1.0, 2.0}, {-3.0, 1.0}};
    for (size_t k = 0; k < 3; ++k) got.emplace_back(c[2 * k], c[2 * k + 1]);
    std::sort(got.begin(), got.end());
    std::sort(want.begin(), want.end());
    EXPECT_EQ(got, want);

    const auto one = kmeans_reference(pts, 1, 5, 2);
    EXPECT_DOUBLE_EQ(one[0], -2.0 / 3.0);
    EXPECT_DOUBLE_EQ(one[1], 1.0);
    EXPECT_THROW(kmeans_reference(pts, 4, 5, 1), ConfigError);
}

TEST(KMeans, RecoversSeparatedClusters) {
    const std::vector<std::array<double, 2>> centres{{0.0, 0.0}, {1.5, 0.0}, {0.0, 1.5}, {1.5, 1.5}};
    Rng rng(4);
    PointSet pts{2, {}};
    for (int i = 0; i < 400; ++i) {
        const auto& c = centres[static_cast<size_t>(i) % 4];
        pts.data.push_back(c[0] + rng.normal(0.0, 0.05));
        pts.data.push_back(c[1] + rng.normal(0.0, 0.05));
    }
    const auto got = kmeans_reference(pts, 4, 50, 9);
    for (const auto& c : centres) {
        double best = INFINITY;
        for (size_t k = 0; k < 4; ++k) best = std::min(best, std::hypot(got[2 * k] - c[0], got[2 * k + 1] - c[1]));
        EXPECT_LT(best, 0.05);
    }
}

// ---------------------------------------------------------------------------
// Codebook training

TEST(CodebookFit, SeedingReservesZeroAndKeepsEntriesDistinct) {
    Codebook cb(0, 8, 2);
    PointSet few{2, {1.0, 1.0, 1.0, 1.0, 2.0, 2.0}};
    Rng rng(1);
    seed_codebook(cb, few, rng, true);
    EXPECT_EQ(cb.entry(0)[0], 0.0);
    EXPECT_EQ(cb.entry(0)[1], 0.0);
    for (size_t a = 0; a < 8; ++a) {
        for (size_t b = a + 1; b < 8; ++b) {
            EXPECT_FALSE(cb.entry(a)[0] == cb.entry(b)[0] && cb.entry(a)[1] == cb.entry(b)[1]) << a << "," << b;
        }
    }
}

TEST(CodebookFit, DeadCodesAreReseeded) {
    CodebookStack stack(1, 4, 1);
    for (size_t k = 1; k < 4; ++k) stack.stage(0).set_entry(k, std::vector<double>{100.0 * static_cast<double>(k)});
    EmaHook hook(stack, 0.5, 3);
    const auto fr = oracle::random_map(4, 4, 1, 5, -0.1, 0.1);
    hook.reset_usage();
    hook.reset_reservoir();
    quantize(stack, fr, &hook);
    EXPECT_EQ(hook.reseed_dead_codes(), 3u);
    for (size_t k = 1; k < 4; ++k) EXPECT_LT(std::abs(stack.stage(0).entry(k)[0]), 0.11);
}

TEST(CodebookFit, SmallerAlphaWinsUnderDrift) {
    // Four clusters drifting along x. The printed rule weights the new residual by alpha, so
    // alpha = 0.99 copies the last sample while 0.8 keeps some averaging.
    auto run = [](double alpha) {
        CodebookStack stack(1, 4, 2);
        const std::vector<std::array<double, 2>> base{{0.0, 0.0}, {3.0, 0.0}, {0.0, 3.0}, {3.0, 3.0}};
        for (size_t k = 0; k < 4; ++k) stack.stage(0).set_entry(k, std::vector<double>{base[k][0], base[k][1]});
        EmaHook hook(stack, alpha, 11);
        Rng rng(12);
        double last = 0.0;
        for (int t = 0; t < 60; ++t) {
            const double shift = 0.02 * t;
            std::vector<double> v;
            for (int i = 0; i < 256; ++i) {
                const auto& c = base[static_cast<size_t>(i) % 4];
                v.push_back(c[0] + shift + rng.normal(0.0, 0.2));
                v.push_back(c[1] + rng.normal(0.0, 0.2));
            }
            const FeatureMap batch(16, 16, 2, v);
            hook.reset_reservoir();
            quantize(stack, batch, &hook);
            std::vector<double> centroids(stack.stage(0).entries().begin(), stack.stage(0).entries().end());
            if (t >= 50) last += quantization_mse(PointSet::from_map(batch), centroids) / 10.0;
        }
        return last;
    };
    const double fast = run(0.99), standard = run(0.8);
    EXPECT_LT(standard, fast);
}

TEST(CodebookFit, ResidualEnergyFallsAcrossStages) {
    CodebookStack stack(3, 16, 4);
    const auto fr = oracle::random_map(32, 32, 4, 21, -1.0, 1.0);
    fit_codebooks(stack, fr, 0.2, 5, 7);
    const auto q = quantize(stack, fr);
    EXPECT_LT(q.residual_energy[1], q.residual_energy[0]);
    EXPECT_LT(q.residual_energy[2], q.residual_energy[1]);
}

// ---------------------------------------------------------------------------
// End-to-end fit

TEST(Fit, IdenticalMapsReachLinearBottleneckFloor) {
    // Six distinct non-negative pixel vectors in C = 8; C_r = 4 limits any linear bottleneck to
    // rank 4, so the affine PCA residual is the best the decoder can do.
    Rng rng(5);
    std::vector<std::vector<double>> palette(6, std::vector<double>(8));
    for (auto& v : palette)
        for (auto& x : v) x = rng.uniform(0.0, 1.0);
    std::vector<double> data;
    for (size_t p = 0; p < 16; ++p) data.insert(data.end(), palette[p % 6].begin(), palette[p % 6].end());
    const FeatureMap f(4, 4, 8, data);
    const double floor = affine_pca_floor(f, 4);

    CodecConfig c;
    c.channels = 8;
    c.reduction_ratio = 2;
    c.stages = 1;
    c.codebook_size = 8;
    c.groups = 2;
    TrainingConfig cfg;
    cfg.epochs = 600;
    cfg.batch_size = 4;
    cfg.learning_rate = 2e-2;
    cfg.ema_alpha = 0.8;
    cfg.seed = 3;
    InMemoryCorpus corpus(std::vector<FeatureMap>(4, f));
    const auto result = fit(CodecModel::create(c, 8), corpus, cfg);
    const double final_loss = reconstruction_mse(result.model, f);
    RecordProperty("pca_floor", std::to_string(floor));
    RecordProperty("final_loss", std::to_string(final_loss));
    EXPECT_LE(final_loss, floor + 1e-3) << "floor " << floor;
}

TEST(Fit, DeterministicAndOrthoLossFalls) {
    SceneSpec s;
    s.height = s.width = 24;
    s.channels = 32;
    s.n_blobs = 2;
    s.blob_scale = 2.0;
    SyntheticCorpus corpus(s, 6, 1, true);
    CodecConfig c;
    c.channels = 32;
    c.reduction_ratio = 4;
    c.codebook_size = 8;
    TrainingConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 3;
    cfg.lambda_ortho = 1e-2;
    cfg.seed = 17;
    const auto init = CodecModel::create(c, 2);
    const auto a = fit(init, corpus, cfg);
    const auto b = fit(init, corpus, cfg);
    EXPECT_EQ(a.model.codebooks.content_hash(), b.model.codebooks.content_hash());
    for (size_t st = 0; st < 3; ++st) {
        const auto ea = a.model.codebooks.stage(st).entries();
        const auto eb = b.model.codebooks.stage(st).entries();
        EXPECT_TRUE(std::equal(ea.begin(), ea.end(), eb.begin()));
    }
    EXPECT_EQ(flatten_parameters(a.model), flatten_parameters(b.model));
    EXPECT_LT(ortho_loss(a.model.reduce_proj, 1.0), ortho_loss(init.reduce_proj, 1.0));
    ASSERT_EQ(a.history.size(), 4u);
    EXPECT_LT(a.history.back().recon_mse, a.history.front().recon_mse);
}

TEST(Fit, StageResidualsStrictlyDecreaseOnHeldOutMaps) {
    SceneSpec s;
    s.height = s.width = 32;
    s.channels = 64;
    s.n_blobs = 3;
    s.blob_scale = 2.5;
    SyntheticCorpus train(s, 8, 100, true), held(s, 50, 200, false);
    CodecConfig c;
    c.channels = 64;
    c.reduction_ratio = 8;
    c.codebook_size = 16;
    TrainingConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 4;
    cfg.seed = 1;
    // At alpha = 0.8 each assignment drags an entry 80% of the way to one noisy residual, so later
    // stages hold samples rather than means and can add energy. 0.2 keeps the entries averaged.
    cfg.ema_alpha = 0.2;
    const auto m = fit(CodecModel::create(c, 3), train, cfg).model;
    std::vector<std::vector<double>> energy(3);
    for (size_t i = 0; i < held.size(); ++i) {
        const auto q = quantize(m.codebooks, reduce(m, held.at(i)));
        for (size_t st = 0; st < 3; ++st) energy[st].push_back(q.residual_energy[st]);
    }
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
    };
    EXPECT_LT(median(energy[1]), median(energy[0]));
    EXPECT_LT(median(energy[2]), median(energy[1]));
}

TEST(Fit, RejectsBadInput) {
    TrainingConfig cfg;
    cfg.epochs = 1;
    EXPECT_THROW(fit(CodecModel::create(tiny_config(), 1), InMemoryCorpus({}), cfg), ConfigError);
    EXPECT_THROW(fit(CodecModel::create(tiny_config(), 1), InMemoryCorpus({FeatureMap(2, 2, 4)}), cfg), ConfigError);
    cfg.learning_rate = -1.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Checkpoint, RoundtripAndResume) {
    SceneSpec s;
    s.height = s.width = 16;
    s.channels = 8;
    s.n_blobs = 1;
    s.blob_scale = 2.0;
    SyntheticCorpus corpus(s, 4, 3, true);
    TrainingConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 2;
    const auto first = fit(CodecModel::create(tiny_config(), 4), corpus, cfg);
    const auto path = (std::filesystem::temp_directory_path() / "rvqcomm_test.ckpt").string();
    save_checkpoint(first.model, first.state, path);
    const auto [model, state] = load_checkpoint(path);
    EXPECT_EQ(state.epoch, 2u);
    EXPECT_EQ(state.step, first.state.step);
    EXPECT_EQ(state.adam_m, first.state.adam_m);
    EXPECT_EQ(model.codebooks.content_hash(), first.model.codebooks.content_hash());
    cfg.epochs = 4;
    FitOptions opt;
    opt.resume = &state;
    const auto more = fit(model, corpus, cfg, opt);
    EXPECT_EQ(more.history.size(), 2u);
    EXPECT_EQ(more.state.epoch, 4u);
    EXPECT_EQ(more.state.step, 2 * first.state.step);
    std::filesystem::remove(path);
}

TEST(Manifest, ParseAndFormat) {
    const auto m = parse_training_manifest("# comment\nema_alpha = 0.5\nepochs=7\ncodebook_size = 16\n"
                                           "post_affine_bias = false\n");
    EXPECT_EQ(m.training.ema_alpha, 0.5);
    EXPECT_EQ(m.training.epochs, 7u);
    EXPECT_EQ(m.codec.codebook_size, 16u);
    EXPECT_FALSE(m.codec.post_affine_bias);
    const auto again = parse_training_manifest(format_training_manifest(m));
    EXPECT_EQ(again.training.epochs, 7u);
    EXPECT_EQ(again.codec.codebook_size, 16u);
    EXPECT_THROW(parse_training_manifest("bogus = 1\n"), ConfigError);
    EXPECT_THROW(parse_training_manifest("epochs = many\n"), ConfigError);
}
