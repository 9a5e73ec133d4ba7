// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The rvqcomm Authors

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rvqcomm/codec.hpp"
#include "rvqcomm/datagen.hpp"
#include "rvqcomm/rng.hpp"
#include "rvqcomm/tensor.hpp"

namespace rvqcomm {

struct TrainingConfig {
    double ema_alpha = 0.8;
    double beta_commit = 0.05;
    double lambda_ortho = 1e-4;
    size_t epochs = 30;
    double learning_rate = 1e-3;
    size_t batch_size = 8;
    uint64_t seed = 0;

    void validate() const;
};

struct LossReport {
    double recon_mse = 0.0;
    double commit_loss = 0.0;
    double ortho_loss = 0.0;
    double total = 0.0;
    std::vector<double> per_stage_residual;
};

/// e_k <- (1 - alpha) e_k + alpha r. Throws StateError on a frozen codebook.
void ema_update(Codebook& codebook, size_t chosen, std::span<const double> residual, double alpha);

/// beta * mean((z - z_q)^2). z_q is a constant (stop-gradient).
double commitment_loss(const FeatureMap& z, const FeatureMap& quantized, double beta);

/// lambda * ||W W^T - I||_F^2 for the C -> C_r reduce projection (rows = C_r).
double ortho_loss(const ProjectionWeights& w, double lambda);

/// 4 lambda (W W^T - I) W, row-major with the same layout as w.weights.
std::vector<double> ortho_loss_gradient(const ProjectionWeights& w, double lambda);

/// Row-major set of equal-length vectors.
struct PointSet {
    size_t dim = 0;
    std::vector<double> data;

    size_t count() const noexcept { return dim == 0 ? 0 : data.size() / dim; }
    std::span<const double> point(size_t i) const noexcept { return {data.data() + i * dim, dim}; }

    /// Every pixel vector of a map.
    static PointSet from_map(const FeatureMap& map);
};

/// Lloyd's algorithm with k-means++ seeding. Returns K x dim centroids, row-major.
/// Empty clusters keep their previous centroid. Throws ConfigError when K > #points.
std::vector<double> kmeans_reference(const PointSet& points, size_t k, size_t iterations, uint64_t seed);

/// Mean over points of the squared distance to the nearest centroid.
double quantization_mse(const PointSet& points, std::span<const double> centroids);

/// k-means++ seeding of one codebook from residual samples. With `reserve_zero`, entry 0 is
/// the zero vector and acts as the first centre. Surplus entries (fewer distinct samples than K)
/// become perturbed copies so no two entries coincide.
void seed_codebook(Codebook& codebook, const PointSet& samples, Rng& rng, bool reserve_zero);

/// Nudges bitwise-identical entries apart, keeping the lowest-index copy unchanged.
void make_entries_distinct(Codebook& codebook, Rng& rng);

/// TrainingHook applying the EMA rule per assignment, in the order quantize visits pixels,
/// and keeping a uniform sample of each stage's residuals for dead-code re-seeding.
class EmaHook : public TrainingHook {
public:
    EmaHook(CodebookStack& stack, double alpha, uint64_t seed, size_t reservoir_size = 1024);

    void observe(size_t stage, size_t chosen, std::span<const double> residual) override;

    /// Starts a new sampling window (call at batch start).
    void reset_reservoir();

    /// Re-seeds every code with zero usage since the last reset_usage() to a distinct random
    /// residual from the current reservoir. Returns the number of codes re-seeded.
    size_t reseed_dead_codes();

    void reset_usage();

private:
    CodebookStack& stack_;
    double alpha_;
    Rng rng_;
    size_t capacity_;
    std::vector<PointSet> reservoir_;
    std::vector<uint64_t> seen_;
};

/// Codebook-only training on a fixed residual population: stage-wise k-means++ seeding, then
/// `epochs` passes of EMA-updating quantization in a per-epoch shuffled order with dead-code
/// re-seeding after each pass.
void fit_codebooks(CodebookStack& stack, const FeatureMap& residuals, double alpha, size_t epochs, uint64_t seed,
                   bool reserve_zero = true);

// ---------------------------------------------------------------------------
// Projection fitting

/// Flattened trainable parameters in bundle order: reduce W, b; reduce gain, shift;
/// post-affine W, b; expand gain, shift; expand W, b.
std::vector<double> flatten_parameters(const CodecModel& model);
void assign_parameters(CodecModel& model, std::span<const double> params);

/// Straight-through view of a quantization: the decoder sees F_r + offset, the commitment term
/// compares F_r with `quantized`. Both are constants with respect to the parameters.
struct StraightThrough {
    FeatureMap offset;
    FeatureMap quantized;

    /// offset = z_q - F_r at the current parameters.
    static StraightThrough from(const FeatureMap& reduced, const FeatureMap& quantized);
};

struct LossAndGradient {
    LossReport loss;
    std::vector<double> gradient;  // flatten_parameters layout
};

/// Proxy objective for one map: mse(F_hat, F) + beta mean((F_r - z_q)^2) + ortho term, with its
/// exact gradient for fixed straight-through constants.
LossAndGradient loss_and_gradient(const CodecModel& model, const FeatureMap& f, const StraightThrough& st,
                                  const TrainingConfig& cfg);

/// Loss only; the same objective as loss_and_gradient.
double proxy_loss(const CodecModel& model, const FeatureMap& f, const StraightThrough& st, const TrainingConfig& cfg);

/// Linear warmup over the first 30% of steps from lr/25 to lr, then cosine decay to lr/25.
double one_cycle_lr(double peak, uint64_t step, uint64_t total_steps);

struct TrainingState {
    uint32_t epoch = 0;
    uint64_t step = 0;
    std::vector<double> adam_m;
    std::vector<double> adam_v;
};

struct FitResult {
    CodecModel model;  // frozen
    std::vector<LossReport> history;
    TrainingState state;
};

struct FitOptions {
    /// Called after each epoch with (epoch index, report).
    std::function<void(size_t, const LossReport&)> on_epoch;
    /// Resume from a checkpointed optimizer state.
    const TrainingState* resume = nullptr;
};

/// Alternates Adam steps on the projections/norms (straight-through quantizer) with EMA codebook
/// updates during quantization. Deterministic for a given seed. Throws ConfigError on an empty or
/// mismatched corpus and NumericError on a non-finite loss.
FitResult fit(const CodecModel& model, const Corpus& corpus, const TrainingConfig& cfg, const FitOptions& options = {});

/// Reconstruction MSE of decompress(encode(f)) against f.
double reconstruction_mse(const CodecModel& model, const FeatureMap& f);

// Checkpoint = codebook bundle followed by a footer:
//   magic "RVQS", u8 version, u32 epoch, u64 step, u32 n, n x f64 Adam m, n x f64 Adam v.
void save_checkpoint(const CodecModel& model, const TrainingState& state, const std::string& path);
std::pair<CodecModel, TrainingState> load_checkpoint(const std::string& path);

/// Training manifest: "key = value" lines, '#' comments. Keys mirror TrainingConfig and
/// CodecConfig (channels, reduction_ratio, stages, codebook_size, groups, post_affine_bias).
struct TrainingManifest {
    TrainingConfig training;
    CodecConfig codec;
};

TrainingManifest parse_training_manifest(const std::string& text, TrainingManifest defaults = {});
TrainingManifest read_training_manifest(const std::string& path, TrainingManifest defaults = {});
std::string format_training_manifest(const TrainingManifest& manifest);

}  // namespace rvqcomm
