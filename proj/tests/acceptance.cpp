// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The rvqcomm Authors
//
// Acceptance run: one PASS/FAIL line per criterion. Usage: acceptance [criterion numbers...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "rvqcomm/codec.hpp"
#include "rvqcomm/datagen.hpp"
#include "rvqcomm/sim.hpp"
#include "rvqcomm/trainer.hpp"
#include "rvqcomm/wire.hpp"
#include "support/oracles.hpp"

using namespace rvqcomm;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string format(const char* fmt, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, fmt, args...);
    return buf;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double relative_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

// ---------------------------------------------------------------------------

Outcome rate_table() {
    const size_t ks[] = {4, 16, 64, 256, 1024};
    const double want_bpp[] = {6, 12, 18, 24, 30};
    const long want_compr[] = {1365, 683, 455, 341, 273};
    bool ok = true;
    std::string got;
    for (size_t i = 0; i < 5; ++i) {
        CodecConfig c;
        c.channels = 256;
        c.stages = 3;
        c.codebook_size = ks[i];
        const double bpp = bits_per_pixel(c);
        const long compr = std::lround(compression_ratio(c));
        ok = ok && bpp == want_bpp[i] && compr == want_compr[i];
        got += format("%s%g/%ld", i ? " " : "", bpp, compr);
    }
    return {ok, "bpp/compr " + got};
}

Outcome wire_roundtrip() {
    Rng rng(2024);
    size_t mismatches = 0;
    std::set<unsigned> widths;
    for (size_t i = 0; i < 10000; ++i) {
        const unsigned log2k = 1 + static_cast<unsigned>(i % 16);
        const size_t k = size_t{1} << log2k;
        IndexMap idx(1 + rng.below(12), 1 + rng.below(12), 1 + rng.below(4), k);
        for (auto& v : idx.indices) v = static_cast<uint16_t>(rng.below(k));
        const auto wire = serialize_payload(pack(idx, rng.next_u64(), static_cast<uint32_t>(i), static_cast<uint16_t>(i)));
        const uint64_t bits = idx.pixels() * idx.stages * log2k;
        const bool size_ok = wire.size() == 25 + (bits + 7) / 8;
        if (!size_ok || unpack_indices(parse_payload(wire)) != idx) ++mismatches;
        widths.insert(log2k);
    }

    auto pattern = [](size_t h, size_t w, size_t stages, size_t k) {
        IndexMap idx(h, w, stages, k);
        for (size_t p = 0; p < idx.pixels(); ++p) {
            for (size_t s = 0; s < stages; ++s) idx.at(p, s) = static_cast<uint16_t>((p * 7 + s * 3) % k);
        }
        return idx;
    };
    IndexMap one(1, 1, 1, 2);
    one.at(0, 0) = 1;
    struct Fixture {
        const char* file;
        IndexMap idx;
        uint64_t hash;
        uint32_t frame;
        uint16_t agent;
    };
    const Fixture fixtures[] = {
        {"payload_k4_nq3_5x3.rvqp", pattern(5, 3, 3, 4), 0x0123456789ABCDEFull, 42, 7},
        {"payload_k1024_nq2_3x3.rvqp", pattern(3, 3, 2, 1024), 0xFEDCBA9876543210ull, 1, 2},
        {"payload_k2_nq1_1x1.rvqp", one, 0, 0, 0},
        {"payload_k65536_nq1_2x1.rvqp", pattern(2, 1, 1, 65536), 0x1111111111111111ull, 3, 65535},
    };
    size_t golden_ok = 0;
    for (const auto& f : fixtures) {
        const auto golden = oracle::golden(f.file);
        if (serialize_payload(pack(f.idx, f.hash, f.frame, f.agent)) == golden &&
            unpack_indices(parse_payload(golden)) == f.idx) {
            ++golden_ok;
        }
    }
    return {mismatches == 0 && widths.size() == 16 && golden_ok == 4,
            format("10000 maps over log2K 1..16: %zu mismatches; golden fixtures %zu/4 byte-identical", mismatches,
                   golden_ok)};
}

Outcome quantizer_oracle() {
    struct Case {
        size_t dim, k, stages;
    };
    const Case cases[] = {{2, 2, 1},   {4, 4, 3},      {4, 16, 3},     {8, 64, 3},
                          {8, 256, 2}, {16, 1024, 3},  {16, 32, 4},    {12, 1024, 1}};
    size_t pixels = 0, wrong = 0;
    uint64_t seed = 1;
    for (const auto& c : cases) {
        const auto stack = oracle::random_stack(c.stages, c.k, c.dim, seed++);
        const auto fr = oracle::random_map(128, 128, c.dim, seed++, -1.5, 1.5);
        const auto got = quantize(stack, fr).indices;
        const auto want = oracle::residual_quantize(stack, fr);
        for (size_t p = 0; p < fr.pixels(); ++p) {
            bool same = true;
            for (size_t s = 0; s < c.stages; ++s) same = same && got.at(p, s) == want[p * c.stages + s];
            if (!same) ++wrong;
        }
        pixels += fr.pixels();
    }
    return {wrong == 0 && pixels >= 100000,
            format("%zu pixels (C_r <= 16, K <= 1024): %zu differ from exhaustive search", pixels, wrong)};
}

Outcome telescoping() {
    const auto s = audit::telescoping_stats();
    return {s.calls > 0 && s.violations == 0 && s.max_abs_error <= audit::kTelescopingTolerance,
            format("%llu quantize calls in this run, %llu elements, %llu violations, max |error| %.3g (tol 1e-6)",
                   static_cast<unsigned long long>(s.calls), static_cast<unsigned long long>(s.elements),
                   static_cast<unsigned long long>(s.violations), s.max_abs_error)};
}

double ema_vs_lloyd(double alpha, uint64_t seed) {
    constexpr size_t kClusters = 16, kDim = 8;
    const auto points = oracle::gaussian_mixture(kClusters, kDim, 250, 10.0, 0.5, seed);
    CodebookStack stack(1, kClusters, kDim);
    fit_codebooks(stack, points, alpha, 20, seed, /*reserve_zero=*/false);
    const double ema = quantize(stack, points).residual_energy[0];
    const double lloyd = oracle::lloyd_mse(points, kClusters, 50, seed);
    return ema / lloyd;
}

Outcome ema_quality() {
    // The as-printed rule keeps (1 - alpha) of the entry per assignment, so alpha is the step size.
    // Its steady-state excess over the cluster mean is alpha / (2 - alpha) of the cluster variance:
    // ratio ~1.11 at alpha = 0.2 and ~1.67 at the default 0.8.
    std::vector<double> low, high;
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        low.push_back(ema_vs_lloyd(0.2, seed));
        high.push_back(ema_vs_lloyd(0.8, seed));
    }
    const double m = median(low);
    return {m <= 1.5, format("median EMA/Lloyd MSE ratio %.4f at alpha 0.2 (limit 1.5); %.4f at alpha 0.8 (info)", m,
                             median(high))};
}

struct RdRun {
    std::map<size_t, double> median_mse;
    std::map<size_t, double> seconds;
    double k4_top_share = 0.0;
    size_t k4_top_code = 0;
};

const RdRun& rate_distortion_run() {
    static std::optional<RdRun> cached;
    if (cached) return *cached;
    RdRun run;
    const SceneSpec spec;  // 128 x 128 x 256, 97% background
    const SyntheticCorpus corpus(spec, 100, 0x5EED, /*cache=*/true);
    for (size_t k : {4, 16, 64}) {
        const auto t0 = std::chrono::steady_clock::now();
        CodecConfig c;
        c.codebook_size = k;
        TrainingConfig cfg;
        cfg.epochs = 5;
        cfg.seed = 1;
        const auto model = fit(CodecModel::create(c, 7), corpus, cfg).model;
        std::vector<double> mse;
        std::vector<double> pooled(k, 0.0);
        for (size_t i = 0; i < corpus.size(); ++i) {
            const auto f = corpus.at(i);
            const auto idx = encode(model, f);
            mse.push_back(measure_fidelity(f, decompress(model, idx)).mse);
            const auto h = usage_histogram(model.codebooks, idx, 0);
            for (size_t j = 0; j < k; ++j) pooled[j] += h[j] / static_cast<double>(corpus.size());
        }
        run.median_mse[k] = median(mse);
        run.seconds[k] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (k == 4) {
            const auto top = std::max_element(pooled.begin(), pooled.end());
            run.k4_top_share = *top;
            run.k4_top_code = static_cast<size_t>(top - pooled.begin());
        }
        std::printf("  [info] K=%zu: median reconstruction MSE %.6g over %zu scenes (%.0f s)\n", k, run.median_mse[k],
                    corpus.size(), run.seconds[k]);
        std::fflush(stdout);
    }
    cached = run;
    return *cached;
}

Outcome rd_monotonicity() {
    const auto& r = rate_distortion_run();
    const double a = r.median_mse.at(4), b = r.median_mse.at(16), c = r.median_mse.at(64);
    double total = 0.0;
    for (const auto& [k, s] : r.seconds) total += s;
    return {b <= a && c <= b && total < 1800.0,
            format("median MSE K=4 %.6g, K=16 %.6g, K=64 %.6g; %.0f s training+eval (limit 1800 s)", a, b, c, total)};
}

Outcome usage_signature() {
    const auto& r = rate_distortion_run();
    return {r.k4_top_share >= 0.90,
            format("K=4 stage-0 top-code share %.4f (code %zu), threshold 0.90", r.k4_top_share, r.k4_top_code)};
}

Outcome gradients() {
    double worst_ortho = 0.0, worst_fit = 0.0;
    for (uint64_t trial = 0; trial < 20; ++trial) {
        auto w = oracle::random_weights(8, 4, 700 + trial);
        const auto g = ortho_loss_gradient(w, 0.7);
        for (size_t i = 0; i < w.weights.size(); ++i) {
            const double keep = w.weights[i];
            w.weights[i] = keep + 1e-5;
            const double up = ortho_loss(w, 0.7);
            w.weights[i] = keep - 1e-5;
            const double down = ortho_loss(w, 0.7);
            w.weights[i] = keep;
            worst_ortho = std::max(worst_ortho, relative_error(g[i], (up - down) / 2e-5));
        }
    }

    CodecConfig c;
    c.channels = 8;
    c.reduction_ratio = 2;
    c.stages = 2;
    c.codebook_size = 4;
    c.groups = 2;
    TrainingConfig cfg;
    cfg.beta_commit = 0.25;
    cfg.lambda_ortho = 0.1;
    constexpr double h = 5e-6;
    for (uint64_t trial = 0; trial < 20; ++trial) {
        auto m = CodecModel::create(c, 1900 + trial);
        Rng rng(trial + 77);
        for (auto& g : m.reduce_norm.gain) g = rng.uniform(0.5, 1.5);
        for (auto& s : m.expand_norm.shift) s = rng.uniform(-0.5, 0.5);
        const auto f = oracle::random_map(4, 4, 8, 1950 + trial, 0.0, 1.0);
        const auto fr = reduce(m, f);
        const auto st = StraightThrough::from(fr, quantize(m.codebooks, fr).quantized);
        const auto lg = loss_and_gradient(m, f, st, cfg);
        auto params = flatten_parameters(m);
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
            worst_fit = std::max(worst_fit, relative_error(lg.gradient[i], (up - down) / (2.0 * h)));
        }
    }
    return {worst_ortho < 1e-4 && worst_fit < 1e-4,
            format("20 trials C=8 C_r=4: max rel. error ortho %.3g (h=1e-5), fit step %.3g (h=5e-6), limit 1e-4",
                   worst_ortho, worst_fit)};
}

Outcome simulator_accounting() {
    CodecConfig c;
    c.codebook_size = 64;
    auto model = CodecModel::create(c, 3);
    model.freeze();
    const auto codec = std::make_shared<const CodecModel>(std::move(model));
    SimWorld w;
    w.seed = 11;
    for (uint16_t id : {1, 2}) {
        AgentSpec a;
        a.id = id;
        a.role = id == 1 ? AgentRole::kVehicle : AgentRole::kInfrastructure;
        a.codec = codec;
        SceneSpec s;
        s.seed = id;
        a.source.scene = s;
        w.agents.push_back(a);
    }
    w.links = {LinkSpec{1, 2, 1e7, 0.01, 0.0}, LinkSpec{2, 1, 1e7, 0.01, 0.0}};
    w.budget.neighborhoods = SimWorld::neighborhoods_from_links(w.links);

    const uint64_t expected = 2ull * 128 * 128 * 3 * 6;
    w.budget.total_budget_bits = 600000;
    const auto a = run_round(w, 0);
    const auto b = run_round(w, 0);
    w.budget.total_budget_bits = expected;
    const bool at_limit = run_round(w, 0).budget_satisfied;
    w.budget.total_budget_bits = expected - 1;
    const bool below = run_round(w, 0).budget_satisfied;
    const bool deterministic = a.links_csv() == b.links_csv() && a.agents_csv() == b.agents_csv() && a.table() == b.table();
    return {a.total_bits == expected && a.budget_satisfied && at_limit && !below && deterministic,
            format("total %llu bits (expect %llu); B=600000 %s, B=%llu %s, B=%llu %s; reruns %s",
                   static_cast<unsigned long long>(a.total_bits), static_cast<unsigned long long>(expected),
                   a.budget_satisfied ? "within" : "over", static_cast<unsigned long long>(expected),
                   at_limit ? "within" : "over", static_cast<unsigned long long>(expected - 1),
                   below ? "within" : "over", deterministic ? "identical" : "differ")};
}

Outcome ema_recurrence() {
    double worst = 0.0;
    for (double alpha : {0.2, 0.8, 0.99}) {
        Rng rng(static_cast<uint64_t>(alpha * 1000));
        Codebook cb(0, 2, 6);
        std::vector<double> e0(6), r(6);
        for (auto& x : e0) x = rng.uniform(-3.0, 3.0);
        for (auto& x : r) x = rng.uniform(-3.0, 3.0);
        cb.set_entry(1, e0);
        double d0 = 0.0;
        for (size_t i = 0; i < 6; ++i) d0 += (e0[i] - r[i]) * (e0[i] - r[i]);
        d0 = std::sqrt(d0);
        for (int t = 1; t <= 100; ++t) {
            ema_update(cb, 1, r, alpha);
            const auto e = cb.entry(1);
            double d = 0.0;
            for (size_t i = 0; i < 6; ++i) d += (e[i] - r[i]) * (e[i] - r[i]);
            worst = std::max(worst, std::abs(std::sqrt(d) - std::pow(1.0 - alpha, t) * d0));
        }
    }
    return {worst <= 1e-10, format("alpha {0.2, 0.8, 0.99}, t <= 100: max |deviation| %.3g (tol 1e-10)", worst)};
}

}  // namespace

int main(int argc, char** argv) {
    audit::enable_telescoping_checks(true);
    struct Criterion {
        int id;
        const char* name;
        std::function<Outcome()> run;
    };
    // Telescoping runs last so its audit covers every quantize call made by the others.
    const std::vector<Criterion> criteria = {
        {1, "rate table", rate_table},
        {2, "wire roundtrip", wire_roundtrip},
        {3, "quantizer vs exhaustive oracle", quantizer_oracle},
        {5, "EMA vs Lloyd k-means", ema_quality},
        {8, "gradient finite differences", gradients},
        {9, "simulator accounting", simulator_accounting},
        {10, "EMA recurrence", ema_recurrence},
        {6, "rate-distortion monotonicity", rd_monotonicity},
        {7, "codebook usage signature", usage_signature},
        {4, "telescoping identity", telescoping},
    };
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

    std::map<int, std::string> lines;
    bool all = true;
    for (const auto& c : criteria) {
        if (!wanted.empty() && !wanted.count(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        const Outcome o = c.run();
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        lines[c.id] = format("%s criterion %2d  %-31s %s (%.1f s)", o.pass ? "PASS" : "FAIL", c.id, c.name,
                             o.detail.c_str(), s);
        std::printf("%s\n", lines[c.id].c_str());
        std::fflush(stdout);
        all = all && o.pass;
    }
    // ctest hides stdout of passing tests, so the summary also lands in a report file.
    std::ofstream report("acceptance_report.txt");
    std::printf("\nsummary\n");
    for (const auto& [id, line] : lines) {
        std::printf("%s\n", line.c_str());
        report << line << '\n';
    }
    return all ? 0 : 1;
}
