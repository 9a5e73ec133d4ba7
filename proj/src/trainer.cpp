// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The rvqcomm Authors

#include "rvqcomm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "rvqcomm/detail/bytes.hpp"
#include "rvqcomm/error.hpp"
#include "rvqcomm/wire.hpp"

namespace rvqcomm {

void TrainingConfig::validate() const {
    if (!(ema_alpha > 0.0 && ema_alpha < 1.0)) throw ConfigError("ema_alpha must lie in (0, 1)");
    if (!(beta_commit >= 0.0)) throw ConfigError("beta_commit must be non-negative");
    if (!(lambda_ortho >= 0.0)) throw ConfigError("lambda_ortho must be non-negative");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
}

void ema_update(Codebook& codebook, size_t chosen, std::span<const double> residual, double alpha) {
    codebook.ema_update(chosen, residual, alpha);
}

double commitment_loss(const FeatureMap& z, const FeatureMap& quantized, double beta) {
    if (!z.same_shape(quantized)) throw ConfigError("commitment loss shape mismatch");
    const auto a = z.data();
    const auto b = quantized.data();
    double sum = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        sum += d * d;
    }
    return beta * sum / static_cast<double>(a.size());
}

namespace {

/// W W^T - I for a row-major rows x cols matrix.
std::vector<double> gram_minus_identity(const ProjectionWeights& w) {
    const size_t rows = w.out_channels;
    const size_t cols = w.in_channels;
    std::vector<double> g(rows * rows, 0.0);
    for (size_t a = 0; a < rows; ++a) {
        for (size_t b = a; b < rows; ++b) {
            double s = 0.0;
            for (size_t i = 0; i < cols; ++i) s += w.weights[a * cols + i] * w.weights[b * cols + i];
            if (a == b) s -= 1.0;
            g[a * rows + b] = s;
            g[b * rows + a] = s;
        }
    }
    return g;
}

}  // namespace

double ortho_loss(const ProjectionWeights& w, double lambda) {
    const auto g = gram_minus_identity(w);
    double sum = 0.0;
    for (double v : g) sum += v * v;
    return lambda * sum;
}

std::vector<double> ortho_loss_gradient(const ProjectionWeights& w, double lambda) {
    const size_t rows = w.out_channels;
    const size_t cols = w.in_channels;
    const auto g = gram_minus_identity(w);
    std::vector<double> grad(rows * cols, 0.0);
    for (size_t a = 0; a < rows; ++a) {
        double* out = grad.data() + a * cols;
        for (size_t b = 0; b < rows; ++b) {
            const double coef = 4.0 * lambda * g[a * rows + b];
            const double* wb = w.weights.data() + b * cols;
            for (size_t i = 0; i < cols; ++i) out[i] += coef * wb[i];
        }
    }
    return grad;
}

// ---------------------------------------------------------------------------
// Clustering

PointSet PointSet::from_map(const FeatureMap& map) {
    return {map.channels(), std::vector<double>(map.data().begin(), map.data().end())};
}

namespace {

double squared_distance(std::span<const double> a, const double* b) {
    double d = 0.0;
    for (size_t c = 0; c < a.size(); ++c) {
        const double diff = a[c] - b[c];
        d += diff * diff;
    }
    return d;
}

size_t nearest_centroid(std::span<const double> point, std::span<const double> centroids, double* dist) {
    const size_t dim = point.size();
    const size_t k = centroids.size() / dim;
    size_t best = 0;
    double best_d = INFINITY;
    for (size_t j = 0; j < k; ++j) {
        const double d = squared_distance(point, centroids.data() + j * dim);
        if (d < best_d) {
            best_d = d;
            best = j;
        }
    }
    if (dist != nullptr) *dist = best_d;
    return best;
}

/// Index drawn with probability proportional to weights; -1 when all weights are zero.
std::ptrdiff_t sample_proportional(const std::vector<double>& weights, Rng& rng) {
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (!(total > 0.0)) return -1;
    const double target = rng.uniform() * total;
    double acc = 0.0;
    std::ptrdiff_t last_positive = -1;
    for (size_t i = 0; i < weights.size(); ++i) {
        if (weights[i] <= 0.0) continue;
        acc += weights[i];
        last_positive = static_cast<std::ptrdiff_t>(i);
        if (target < acc) return last_positive;
    }
    return last_positive;
}

/// k-means++ centres from `points`, optionally starting from a fixed first centre.
std::vector<double> kmeanspp(const PointSet& points, size_t k, Rng& rng, const std::vector<double>* first,
                             size_t* distinct_found) {
    const size_t dim = points.dim;
    const size_t n = points.count();
    std::vector<double> centres;
    centres.reserve(k * dim);
    if (first != nullptr) {
        centres.insert(centres.end(), first->begin(), first->end());
    } else {
        const auto p = points.point(rng.below(n));
        centres.insert(centres.end(), p.begin(), p.end());
    }
    std::vector<double> d2(n);
    for (size_t i = 0; i < n; ++i) d2[i] = squared_distance(points.point(i), centres.data());
    while (centres.size() < k * dim) {
        const auto pick = sample_proportional(d2, rng);
        if (pick < 0) break;
        const auto p = points.point(static_cast<size_t>(pick));
        const size_t offset = centres.size();
        centres.insert(centres.end(), p.begin(), p.end());
        for (size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(points.point(i), centres.data() + offset));
    }
    if (distinct_found != nullptr) *distinct_found = centres.size() / dim;
    return centres;
}

}  // namespace

std::vector<double> kmeans_reference(const PointSet& points, size_t k, size_t iterations, uint64_t seed) {
    const size_t n = points.count();
    const size_t dim = points.dim;
    if (k == 0) throw ConfigError("k must be positive");
    if (k > n) throw ConfigError("k = " + std::to_string(k) + " exceeds point count " + std::to_string(n));
    Rng rng(seed);
    size_t found = 0;
    auto centroids = kmeanspp(points, k, rng, nullptr, &found);
    // Duplicate points can exhaust D^2 sampling; fill with random points.
    while (found < k) {
        const auto p = points.point(rng.below(n));
        centroids.insert(centroids.end(), p.begin(), p.end());
        ++found;
    }

    std::vector<size_t> assign(n);
    std::vector<double> sums(k * dim);
    std::vector<size_t> counts(k);
    for (size_t it = 0; it < iterations; ++it) {
        for (size_t i = 0; i < n; ++i) assign[i] = nearest_centroid(points.point(i), centroids, nullptr);
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (size_t i = 0; i < n; ++i) {
            const auto p = points.point(i);
            double* s = sums.data() + assign[i] * dim;
            for (size_t c = 0; c < dim; ++c) s[c] += p[c];
            ++counts[assign[i]];
        }
        bool moved = false;
        for (size_t j = 0; j < k; ++j) {
            if (counts[j] == 0) continue;
            for (size_t c = 0; c < dim; ++c) {
                const double m = sums[j * dim + c] / static_cast<double>(counts[j]);
                moved |= m != centroids[j * dim + c];
                centroids[j * dim + c] = m;
            }
        }
        if (!moved) break;
    }
    return centroids;
}

double quantization_mse(const PointSet& points, std::span<const double> centroids) {
    double sum = 0.0;
    for (size_t i = 0; i < points.count(); ++i) {
        double d = 0.0;
        nearest_centroid(points.point(i), centroids, &d);
        sum += d;
    }
    return sum / static_cast<double>(points.count());
}

void make_entries_distinct(Codebook& codebook, Rng& rng) {
    const size_t dim = codebook.dim();
    auto same_as_float = [dim](std::span<const double> a, std::span<const double> b) {
        for (size_t c = 0; c < dim; ++c) {
            if (static_cast<float>(a[c]) != static_cast<float>(b[c])) return false;
        }
        return true;
    };
    std::vector<double> nudged(dim);
    for (size_t k = 1; k < codebook.size(); ++k) {
        for (;;) {
            bool clash = false;
            for (size_t j = 0; j < k && !clash; ++j) clash = same_as_float(codebook.entry(k), codebook.entry(j));
            if (!clash) break;
            const auto e = codebook.entry(k);
            for (size_t c = 0; c < dim; ++c) {
                const double scale = std::max(std::abs(e[c]) * 1e-5, 1e-6);
                nudged[c] = e[c] + scale * rng.uniform(-1.0, 1.0);
            }
            codebook.set_entry(k, nudged);
        }
    }
}

void seed_codebook(Codebook& codebook, const PointSet& samples, Rng& rng, bool reserve_zero) {
    if (samples.count() == 0) throw ConfigError("no samples to seed codebook from");
    if (samples.dim != codebook.dim()) throw ConfigError("sample dimension mismatch");
    const size_t dim = codebook.dim();
    const size_t k = codebook.size();

    const std::vector<double> zero(dim, 0.0);
    size_t found = 0;
    auto centres = kmeanspp(samples, k, rng, reserve_zero ? &zero : nullptr, &found);

    double rms = 0.0;
    for (double v : samples.data) rms += v * v;
    rms = std::sqrt(rms / static_cast<double>(samples.data.size()));
    const double jitter = std::max(1e-3 * rms, 1e-6);
    while (found < k) {
        const auto p = samples.point(rng.below(samples.count()));
        for (size_t c = 0; c < dim; ++c) centres.push_back(p[c] + jitter * rng.normal());
        ++found;
    }
    for (size_t j = 0; j < k; ++j) codebook.set_entry(j, std::span<const double>(centres.data() + j * dim, dim));
    make_entries_distinct(codebook, rng);
}

// ---------------------------------------------------------------------------
// EMA hook

EmaHook::EmaHook(CodebookStack& stack, double alpha, uint64_t seed, size_t reservoir_size)
    : stack_(stack), alpha_(alpha), rng_(seed), capacity_(reservoir_size) {
    reservoir_.assign(stack.num_stages(), PointSet{stack.reduced_channels(), {}});
    seen_.assign(stack.num_stages(), 0);
}

void EmaHook::observe(size_t stage, size_t chosen, std::span<const double> residual) {
    auto& pool = reservoir_[stage];
    const uint64_t seen = seen_[stage]++;
    if (pool.count() < capacity_) {
        pool.data.insert(pool.data.end(), residual.begin(), residual.end());
    } else {
        const uint64_t j = rng_.below(seen + 1);
        if (j < capacity_) std::copy(residual.begin(), residual.end(), pool.data.begin() + static_cast<std::ptrdiff_t>(j * pool.dim));
    }
    stack_.stage(stage).ema_update(chosen, residual, alpha_);
}

void EmaHook::reset_reservoir() {
    for (auto& pool : reservoir_) pool.data.clear();
    std::fill(seen_.begin(), seen_.end(), 0);
}

void EmaHook::reset_usage() {
    for (size_t s = 0; s < stack_.num_stages(); ++s) stack_.stage(s).reset_usage();
}

size_t EmaHook::reseed_dead_codes() {
    size_t reseeded = 0;
    for (size_t s = 0; s < stack_.num_stages(); ++s) {
        Codebook& cb = stack_.stage(s);
        const auto& pool = reservoir_[s];
        if (pool.count() == 0) continue;
        std::vector<size_t> order(pool.count());
        std::iota(order.begin(), order.end(), size_t{0});
        size_t next = 0;
        for (size_t k = 0; k < cb.size(); ++k) {
            if (cb.usage_counts()[k] != 0) continue;
            // Partial Fisher-Yates: draw without replacement while samples last.
            if (next >= order.size()) next = 0;
            const size_t j = next + rng_.below(order.size() - next);
            std::swap(order[next], order[j]);
            cb.set_entry(k, pool.point(order[next++]));
            ++reseeded;
        }
        if (reseeded > 0) make_entries_distinct(cb, rng_);
    }
    return reseeded;
}

namespace {

PointSet sample_points(const FeatureMap& map, size_t max_points, Rng& rng) {
    PointSet out{map.channels(), {}};
    const size_t n = map.pixels();
    if (n <= max_points) return PointSet::from_map(map);
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    for (size_t i = 0; i < max_points; ++i) {
        const size_t j = i + rng.below(n - i);
        std::swap(idx[i], idx[j]);
    }
    std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(max_points));
    out.data.reserve(max_points * map.channels());
    for (size_t i = 0; i < max_points; ++i) {
        const auto p = map.pixel(idx[i]);
        out.data.insert(out.data.end(), p.begin(), p.end());
    }
    return out;
}

/// Seeds every stage from a residual population, stage by stage.
void seed_stack(CodebookStack& stack, PointSet pool, Rng& rng, bool reserve_zero) {
    for (size_t s = 0; s < stack.num_stages(); ++s) {
        Codebook& cb = stack.stage(s);
        seed_codebook(cb, pool, rng, reserve_zero && s == 0);
        for (size_t i = 0; i < pool.count(); ++i) {
            std::span<double> p(pool.data.data() + i * pool.dim, pool.dim);
            const auto e = cb.entry(nearest_entry(cb, p));
            for (size_t c = 0; c < pool.dim; ++c) p[c] -= e[c];
        }
    }
}

FeatureMap permute_pixels(const FeatureMap& map, Rng& rng) {
    std::vector<size_t> order(map.pixels());
    std::iota(order.begin(), order.end(), size_t{0});
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    std::vector<double> data;
    data.reserve(map.size());
    for (size_t p : order) {
        const auto px = map.pixel(p);
        data.insert(data.end(), px.begin(), px.end());
    }
    return FeatureMap(map.pixels(), 1, map.channels(), std::move(data));
}

constexpr size_t kSeedPoolSize = 8192;

}  // namespace

void fit_codebooks(CodebookStack& stack, const FeatureMap& residuals, double alpha, size_t epochs, uint64_t seed,
                   bool reserve_zero) {
    if (stack.frozen()) throw StateError("cannot fit frozen codebooks");
    Rng rng(seed);
    seed_stack(stack, sample_points(residuals, kSeedPoolSize, rng), rng, reserve_zero);
    EmaHook hook(stack, alpha, Rng::derive(seed, 1));
    for (size_t e = 0; e < epochs; ++e) {
        hook.reset_usage();
        hook.reset_reservoir();
        quantize(stack, permute_pixels(residuals, rng), &hook);
        hook.reseed_dead_codes();
    }
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

struct Layout {
    size_t reduce_w, reduce_b, reduce_gain, reduce_shift;
    size_t post_w, post_b, expand_gain, expand_shift;
    size_t expand_w, expand_b, total;

    explicit Layout(const CodecModel& m) {
        size_t o = 0;
        auto take = [&o](size_t n) {
            const size_t at = o;
            o += n;
            return at;
        };
        reduce_w = take(m.reduce_proj.weights.size());
        reduce_b = take(m.reduce_proj.bias.size());
        reduce_gain = take(m.reduce_norm.gain.size());
        reduce_shift = take(m.reduce_norm.shift.size());
        post_w = take(m.post_affine.weights.size());
        post_b = take(m.post_affine.bias.size());
        expand_gain = take(m.expand_norm.gain.size());
        expand_shift = take(m.expand_norm.shift.size());
        expand_w = take(m.expand_proj.weights.size());
        expand_b = take(m.expand_proj.bias.size());
        total = o;
    }
};

std::vector<std::vector<double>*> parameter_blocks(CodecModel& m) {
    return {&m.reduce_proj.weights, &m.reduce_proj.bias, &m.reduce_norm.gain, &m.reduce_norm.shift,
            &m.post_affine.weights, &m.post_affine.bias, &m.expand_norm.gain, &m.expand_norm.shift,
            &m.expand_proj.weights, &m.expand_proj.bias};
}

}  // namespace

std::vector<double> flatten_parameters(const CodecModel& model) {
    std::vector<double> out;
    out.reserve(Layout(model).total);
    for (const auto* block : parameter_blocks(const_cast<CodecModel&>(model))) {
        out.insert(out.end(), block->begin(), block->end());
    }
    return out;
}

void assign_parameters(CodecModel& model, std::span<const double> params) {
    if (params.size() != Layout(model).total) throw ConfigError("parameter vector length mismatch");
    size_t o = 0;
    for (auto* block : parameter_blocks(model)) {
        std::copy(params.begin() + static_cast<std::ptrdiff_t>(o),
                  params.begin() + static_cast<std::ptrdiff_t>(o + block->size()), block->begin());
        o += block->size();
    }
}

StraightThrough StraightThrough::from(const FeatureMap& reduced, const FeatureMap& quantized) {
    if (!reduced.same_shape(quantized)) throw ConfigError("straight-through shape mismatch");
    FeatureMap offset = quantized;
    auto o = offset.data();
    const auto r = reduced.data();
    for (size_t i = 0; i < o.size(); ++i) o[i] -= r[i];
    return {std::move(offset), quantized};
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

std::vector<double> normalized(const FeatureMap& x, const GroupStats& st, size_t per_group) {
    std::vector<double> out(x.size());
    const size_t ch = x.channels();
    for (size_t p = 0; p < x.pixels(); ++p) {
        const auto px = x.pixel(p);
        for (size_t c = 0; c < ch; ++c) {
            const size_t g = c / per_group;
            out[p * ch + c] = (px[c] - st.mean[g]) * st.inv_std[g];
        }
    }
    return out;
}

struct ForwardCache {
    FeatureMap a, reduced;
    GroupStats reduce_stats;
    FeatureMap z, u, post;
    GroupStats expand_stats;
    FeatureMap normed, v, output;
};

ForwardCache forward(const CodecModel& m, const FeatureMap& f, const StraightThrough& st) {
    if (f.channels() != m.config.channels) throw ConfigError("map channel count does not match the codec");
    ForwardCache c;
    c.a = apply_projection(f, m.reduce_proj);
    c.reduce_stats = group_statistics(c.a, m.reduce_norm.groups, m.reduce_norm.epsilon);
    c.reduced = group_normalize(c.a, m.reduce_norm);
    if (!c.reduced.same_shape(st.offset) || !c.reduced.same_shape(st.quantized)) {
        throw ConfigError("straight-through constants do not match the reduced map");
    }
    c.z = c.reduced;
    {
        auto z = c.z.data();
        const auto off = st.offset.data();
        for (size_t i = 0; i < z.size(); ++i) z[i] += off[i];
    }
    c.u = apply_projection(c.z, m.post_affine);
    c.post = relu(c.u);
    c.expand_stats = group_statistics(c.post, m.expand_norm.groups, m.expand_norm.epsilon);
    c.normed = group_normalize(c.post, m.expand_norm);
    c.v = apply_projection(c.normed, m.expand_proj);
    c.output = relu(c.v);
    return c;
}

struct DataLoss {
    double recon = 0.0;
    double commit = 0.0;
};

DataLoss data_loss(const ForwardCache& c, const FeatureMap& f, const StraightThrough& st, double beta) {
    DataLoss l;
    const auto y = c.output.data();
    const auto x = f.data();
    for (size_t i = 0; i < y.size(); ++i) {
        const double d = y[i] - x[i];
        l.recon += d * d;
    }
    l.recon /= static_cast<double>(y.size());
    l.commit = commitment_loss(c.reduced, st.quantized, beta);
    return l;
}

/// Backward through y = gain * xhat + shift with whole-map group statistics.
/// dy is consumed; dx receives the input gradient.
void group_norm_backward(const std::vector<double>& xhat, const GroupStats& st, const GroupNormParams& p,
                         size_t pixels, const std::vector<double>& dy, std::vector<double>& dx, double* dgain,
                         double* dshift) {
    const size_t ch = p.channels;
    const size_t per_group = p.channels_per_group();
    const double count = static_cast<double>(pixels * per_group);
    std::vector<double> sum_dxhat(p.groups, 0.0);
    std::vector<double> sum_dxhat_xhat(p.groups, 0.0);
    dx.assign(pixels * ch, 0.0);
    for (size_t px = 0; px < pixels; ++px) {
        for (size_t c = 0; c < ch; ++c) {
            const size_t i = px * ch + c;
            const double g = dy[i];
            dgain[c] += g * xhat[i];
            dshift[c] += g;
            const double dxh = g * p.gain[c];
            dx[i] = dxh;
            sum_dxhat[c / per_group] += dxh;
            sum_dxhat_xhat[c / per_group] += dxh * xhat[i];
        }
    }
    for (size_t px = 0; px < pixels; ++px) {
        for (size_t c = 0; c < ch; ++c) {
            const size_t i = px * ch + c;
            const size_t g = c / per_group;
            dx[i] = st.inv_std[g] * (dx[i] - sum_dxhat[g] / count - xhat[i] * sum_dxhat_xhat[g] / count);
        }
    }
}

/// Accumulates scale * d(recon + commit)/d(params) into grad.
DataLoss accumulate_data_gradient(const CodecModel& m, const FeatureMap& f, const StraightThrough& st, double beta,
                                  double scale, std::vector<double>& grad) {
    const Layout L(m);
    const ForwardCache c = forward(m, f, st);
    const DataLoss loss = data_loss(c, f, st, beta);

    const size_t P = f.pixels();
    const size_t C = m.config.channels;
    const size_t R = m.config.reduced_channels();

    // Output ReLU and reconstruction MSE.
    std::vector<double> dv(P * C);
    {
        const auto y = c.output.data();
        const auto v = c.v.data();
        const auto x = f.data();
        const double k = 2.0 * scale / static_cast<double>(P * C);
        for (size_t i = 0; i < dv.size(); ++i) dv[i] = v[i] > 0.0 ? k * (y[i] - x[i]) : 0.0;
    }

    // Expand projection.
    std::vector<double> dnormed(P * R, 0.0);
    {
        const auto& W = m.expand_proj.weights;
        double* dW = grad.data() + L.expand_w;
        double* db = grad.data() + L.expand_b;
        for (size_t p = 0; p < P; ++p) {
            const auto n = c.normed.pixel(p);
            double* dn = dnormed.data() + p * R;
            const double* dvp = dv.data() + p * C;
            for (size_t o = 0; o < C; ++o) {
                const double d = dvp[o];
                if (d == 0.0) continue;
                db[o] += d;
                double* dWrow = dW + o * R;
                const double* Wrow = W.data() + o * R;
                for (size_t i = 0; i < R; ++i) {
                    dWrow[i] += d * n[i];
                    dn[i] += d * Wrow[i];
                }
            }
        }
    }

    // Expand group norm.
    std::vector<double> dpost;
    {
        const auto xhat = normalized(c.post, c.expand_stats, m.expand_norm.channels_per_group());
        group_norm_backward(xhat, c.expand_stats, m.expand_norm, P, dnormed, dpost, grad.data() + L.expand_gain,
                            grad.data() + L.expand_shift);
    }

    // Post-affine projection and its ReLU; gradient w.r.t. z flows straight through to F_r.
    std::vector<double> dreduced(P * R, 0.0);
    {
        const auto u = c.u.data();
        const auto& W = m.post_affine.weights;
        double* dW = grad.data() + L.post_w;
        double* db = grad.data() + L.post_b;
        const bool bias = m.config.post_affine_bias;
        for (size_t p = 0; p < P; ++p) {
            const auto z = c.z.pixel(p);
            double* dz = dreduced.data() + p * R;
            for (size_t o = 0; o < R; ++o) {
                const size_t i_o = p * R + o;
                const double d = u[i_o] > 0.0 ? dpost[i_o] : 0.0;
                if (d == 0.0) continue;
                if (bias) db[o] += d;
                double* dWrow = dW + o * R;
                const double* Wrow = W.data() + o * R;
                for (size_t i = 0; i < R; ++i) {
                    dWrow[i] += d * z[i];
                    dz[i] += d * Wrow[i];
                }
            }
        }
    }

    // Commitment term; z_q is a constant.
    {
        const auto fr = c.reduced.data();
        const auto zq = st.quantized.data();
        const double k = 2.0 * beta * scale / static_cast<double>(P * R);
        for (size_t i = 0; i < dreduced.size(); ++i) dreduced[i] += k * (fr[i] - zq[i]);
    }

    // Reduce group norm.
    std::vector<double> da;
    {
        const auto xhat = normalized(c.a, c.reduce_stats, m.reduce_norm.channels_per_group());
        group_norm_backward(xhat, c.reduce_stats, m.reduce_norm, P, dreduced, da, grad.data() + L.reduce_gain,
                            grad.data() + L.reduce_shift);
    }

    // Reduce projection.
    {
        double* dW = grad.data() + L.reduce_w;
        double* db = grad.data() + L.reduce_b;
        for (size_t p = 0; p < P; ++p) {
            const auto x = f.pixel(p);
            const double* dap = da.data() + p * R;
            for (size_t o = 0; o < R; ++o) {
                const double d = dap[o];
                db[o] += d;
                double* dWrow = dW + o * C;
                for (size_t i = 0; i < C; ++i) dWrow[i] += d * x[i];
            }
        }
    }
    return loss;
}

void add_ortho_gradient(const CodecModel& m, double lambda, std::vector<double>& grad) {
    if (lambda == 0.0) return;
    const auto g = ortho_loss_gradient(m.reduce_proj, lambda);
    const Layout L(m);
    for (size_t i = 0; i < g.size(); ++i) grad[L.reduce_w + i] += g[i];
}

LossReport make_report(double recon, double commit, double ortho) {
    LossReport r;
    r.recon_mse = recon;
    r.commit_loss = commit;
    r.ortho_loss = ortho;
    r.total = recon + commit + ortho;
    return r;
}

}  // namespace

LossAndGradient loss_and_gradient(const CodecModel& model, const FeatureMap& f, const StraightThrough& st,
                                  const TrainingConfig& cfg) {
    LossAndGradient out;
    out.gradient.assign(Layout(model).total, 0.0);
    const auto d = accumulate_data_gradient(model, f, st, cfg.beta_commit, 1.0, out.gradient);
    add_ortho_gradient(model, cfg.lambda_ortho, out.gradient);
    out.loss = make_report(d.recon, d.commit, ortho_loss(model.reduce_proj, cfg.lambda_ortho));
    return out;
}

double proxy_loss(const CodecModel& model, const FeatureMap& f, const StraightThrough& st, const TrainingConfig& cfg) {
    const auto d = data_loss(forward(model, f, st), f, st, cfg.beta_commit);
    return d.recon + d.commit + ortho_loss(model.reduce_proj, cfg.lambda_ortho);
}

double one_cycle_lr(double peak, uint64_t step, uint64_t total_steps) {
    const double floor = peak / 25.0;
    if (total_steps <= 1) return peak;
    const double t = static_cast<double>(std::min(step, total_steps - 1));
    const double warm = std::max(1.0, std::floor(0.3 * static_cast<double>(total_steps)));
    if (t < warm) return floor + (peak - floor) * t / warm;
    const double span = static_cast<double>(total_steps - 1) - warm;
    const double progress = span > 0.0 ? (t - warm) / span : 1.0;
    return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double reconstruction_mse(const CodecModel& model, const FeatureMap& f) {
    const FeatureMap y = decompress(model, encode(model, f));
    const auto a = y.data();
    const auto b = f.data();
    double sum = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        sum += d * d;
    }
    return sum / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// fit

FitResult fit(const CodecModel& initial, const Corpus& corpus, const TrainingConfig& cfg, const FitOptions& options) {
    cfg.validate();
    initial.validate();
    if (corpus.size() == 0) throw ConfigError("training corpus is empty");

    CodecModel model = initial.frozen ? initial.thawed() : initial;
    model.config.ema_alpha = cfg.ema_alpha;
    const Layout L(model);

    const size_t n = corpus.size();
    const size_t batch = std::min(cfg.batch_size, n);
    const size_t steps_per_epoch = (n + batch - 1) / batch;
    const uint64_t total_steps = static_cast<uint64_t>(steps_per_epoch) * cfg.epochs;

    TrainingState state;
    if (options.resume != nullptr) {
        state = *options.resume;
        if (state.adam_m.size() != L.total || state.adam_v.size() != L.total) {
            throw ConfigError("resume state does not match the model's parameter count");
        }
    } else {
        state.adam_m.assign(L.total, 0.0);
        state.adam_v.assign(L.total, 0.0);
    }

    auto load = [&](size_t i) {
        FeatureMap f = corpus.at(i);
        if (f.channels() != model.config.channels) {
            throw ConfigError("corpus map " + std::to_string(i) + " has " + std::to_string(f.channels()) +
                              " channels, codec expects " + std::to_string(model.config.channels));
        }
        return f;
    };
    auto epoch_order = [&](size_t epoch) {
        std::vector<size_t> order(n);
        std::iota(order.begin(), order.end(), size_t{0});
        Rng rng(Rng::derive(cfg.seed, 1000 + epoch));
        for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        return order;
    };

    Rng seed_rng(Rng::derive(cfg.seed, 1));
    if (!model.codebooks_seeded) {
        const auto order = epoch_order(state.epoch);
        const size_t first = std::min(batch, n);
        PointSet pool{model.config.reduced_channels(), {}};
        for (size_t b = 0; b < first; ++b) {
            const auto part = sample_points(reduce(model, load(order[b])), kSeedPoolSize / first, seed_rng);
            pool.data.insert(pool.data.end(), part.data.begin(), part.data.end());
        }
        seed_stack(model.codebooks, std::move(pool), seed_rng, true);
        model.codebooks_seeded = true;
    }

    EmaHook hook(model.codebooks, cfg.ema_alpha, Rng::derive(cfg.seed, 2));
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;

    FitResult result;
    std::vector<double> grad(L.total);
    for (size_t epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
        const auto order = epoch_order(epoch);
        hook.reset_usage();
        LossReport report;
        report.per_stage_residual.assign(model.config.stages, 0.0);
        double sum_recon = 0.0, sum_commit = 0.0, sum_ortho = 0.0;

        for (size_t start = 0; start < n; start += batch) {
            const size_t end = std::min(start + batch, n);
            const double scale = 1.0 / static_cast<double>(end - start);
            std::fill(grad.begin(), grad.end(), 0.0);
            hook.reset_reservoir();
            double batch_recon = 0.0, batch_commit = 0.0;
            for (size_t b = start; b < end; ++b) {
                const FeatureMap f = load(order[b]);
                const FeatureMap fr = reduce(model, f);
                const auto q = quantize(model.codebooks, fr, &hook);
                const auto st = StraightThrough::from(fr, q.quantized);
                const auto d = accumulate_data_gradient(model, f, st, cfg.beta_commit, scale, grad);
                batch_recon += scale * d.recon;
                batch_commit += scale * d.commit;
                for (size_t s = 0; s < q.residual_energy.size(); ++s) report.per_stage_residual[s] += q.residual_energy[s];
            }
            const double ortho = ortho_loss(model.reduce_proj, cfg.lambda_ortho);
            add_ortho_gradient(model, cfg.lambda_ortho, grad);

            const double total = batch_recon + batch_commit + ortho;
            if (!std::isfinite(total) ||
                !std::all_of(grad.begin(), grad.end(), [](double g) { return std::isfinite(g); })) {
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(state.step) + " (recon " + std::to_string(batch_recon) + ", commit " +
                                   std::to_string(batch_commit) + ", ortho " + std::to_string(ortho) + ")");
            }
            sum_recon += batch_recon * static_cast<double>(end - start);
            sum_commit += batch_commit * static_cast<double>(end - start);
            sum_ortho += ortho * static_cast<double>(end - start);

            const double lr = one_cycle_lr(cfg.learning_rate, state.step, total_steps);
            ++state.step;
            const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.step));
            const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.step));
            auto params = flatten_parameters(model);
            for (size_t i = 0; i < params.size(); ++i) {
                state.adam_m[i] = kBeta1 * state.adam_m[i] + (1.0 - kBeta1) * grad[i];
                state.adam_v[i] = kBeta2 * state.adam_v[i] + (1.0 - kBeta2) * grad[i] * grad[i];
                params[i] -= lr * (state.adam_m[i] / c1) / (std::sqrt(state.adam_v[i] / c2) + kAdamEps);
            }
            assign_parameters(model, params);
        }

        hook.reseed_dead_codes();
        const double count = static_cast<double>(n);
        report.recon_mse = sum_recon / count;
        report.commit_loss = sum_commit / count;
        report.ortho_loss = sum_ortho / count;
        report.total = report.recon_mse + report.commit_loss + report.ortho_loss;
        for (auto& r : report.per_stage_residual) r /= count;
        state.epoch = static_cast<uint32_t>(epoch + 1);
        result.history.push_back(report);
        if (options.on_epoch) options.on_epoch(epoch, report);
    }

    Rng tidy(Rng::derive(cfg.seed, 3));
    for (size_t s = 0; s < model.codebooks.num_stages(); ++s) make_entries_distinct(model.codebooks.stage(s), tidy);
    model.freeze();
    result.model = std::move(model);
    result.state = std::move(state);
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr std::array<uint8_t, 4> kStateMagic = {'R', 'V', 'Q', 'S'};
}

void save_checkpoint(const CodecModel& model, const TrainingState& state, const std::string& path) {
    auto bytes = serialize_bundle(model);
    detail::ByteWriter w(bytes);
    w.bytes(kStateMagic);
    w.u8(1);
    w.u32(state.epoch);
    w.u64(state.step);
    if (state.adam_m.size() != state.adam_v.size()) throw ConfigError("optimizer moment sizes differ");
    w.u32(static_cast<uint32_t>(state.adam_m.size()));
    for (double v : state.adam_m) w.f64(v);
    for (double v : state.adam_v) w.f64(v);
    detail::write_file(path, bytes);
}

std::pair<CodecModel, TrainingState> load_checkpoint(const std::string& path) {
    const auto bytes = detail::read_file(path);
    size_t consumed = 0;
    CodecModel model = parse_bundle(bytes, &consumed);
    detail::ByteReader<IoError> r(std::span<const uint8_t>(bytes).subspan(consumed));
    const auto magic = r.bytes(4);
    if (!std::equal(kStateMagic.begin(), kStateMagic.end(), magic.begin())) throw IoError("checkpoint footer missing");
    if (r.u8() != 1) throw IoError("unsupported checkpoint footer version");
    TrainingState st;
    st.epoch = r.u32();
    st.step = r.u64();
    const size_t count = r.u32();
    st.adam_m.resize(count);
    st.adam_v.resize(count);
    for (auto& v : st.adam_m) v = r.f64();
    for (auto& v : st.adam_v) v = r.f64();
    if (r.remaining() != 0) throw IoError("trailing bytes after checkpoint footer");
    return {std::move(model), std::move(st)};
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    std::istringstream in(value);
    T out{};
    if (!(in >> out) || !(in >> std::ws).eof()) throw ConfigError("manifest key '" + key + "': bad value '" + value + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "on") return true;
    if (value == "false" || value == "0" || value == "off") return false;
    throw ConfigError("manifest key '" + key + "': expected boolean, got '" + value + "'");
}

}  // namespace

TrainingManifest parse_training_manifest(const std::string& text, TrainingManifest m) {
    std::istringstream in(text);
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("manifest line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        auto& t = m.training;
        auto& c = m.codec;
        if (key == "ema_alpha") {
            t.ema_alpha = parse_number<double>(key, value);
            c.ema_alpha = t.ema_alpha;
        } else if (key == "beta_commit") {
            t.beta_commit = parse_number<double>(key, value);
        } else if (key == "lambda_ortho") {
            t.lambda_ortho = parse_number<double>(key, value);
        } else if (key == "epochs") {
            t.epochs = parse_number<size_t>(key, value);
        } else if (key == "learning_rate") {
            t.learning_rate = parse_number<double>(key, value);
        } else if (key == "batch_size") {
            t.batch_size = parse_number<size_t>(key, value);
        } else if (key == "seed") {
            t.seed = parse_number<uint64_t>(key, value);
        } else if (key == "channels") {
            c.channels = parse_number<size_t>(key, value);
        } else if (key == "reduction_ratio") {
            c.reduction_ratio = parse_number<size_t>(key, value);
        } else if (key == "stages") {
            c.stages = parse_number<size_t>(key, value);
        } else if (key == "codebook_size") {
            c.codebook_size = parse_number<size_t>(key, value);
        } else if (key == "groups") {
            c.groups = parse_number<size_t>(key, value);
        } else if (key == "post_affine_bias") {
            c.post_affine_bias = parse_bool(key, value);
        } else {
            throw ConfigError("manifest line " + std::to_string(line_no) + ": unknown key '" + key + "'");
        }
    }
    m.training.validate();
    m.codec.validate();
    return m;
}

TrainingManifest read_training_manifest(const std::string& path, TrainingManifest defaults) {
    const auto bytes = detail::read_file(path);
    return parse_training_manifest(std::string(bytes.begin(), bytes.end()), std::move(defaults));
}

std::string format_training_manifest(const TrainingManifest& m) {
    std::ostringstream out;
    out.precision(17);
    out << "ema_alpha = " << m.training.ema_alpha << '\n'
        << "beta_commit = " << m.training.beta_commit << '\n'
        << "lambda_ortho = " << m.training.lambda_ortho << '\n'
        << "epochs = " << m.training.epochs << '\n'
        << "learning_rate = " << m.training.learning_rate << '\n'
        << "batch_size = " << m.training.batch_size << '\n'
        << "seed = " << m.training.seed << '\n'
        << "channels = " << m.codec.channels << '\n'
        << "reduction_ratio = " << m.codec.reduction_ratio << '\n'
        << "stages = " << m.codec.stages << '\n'
        << "codebook_size = " << m.codec.codebook_size << '\n'
        << "groups = " << m.codec.groups << '\n'
        << "post_affine_bias = " << (m.codec.post_affine_bias ? "true" : "false") << '\n';
    return out.str();
}

}  // namespace rvqcomm
