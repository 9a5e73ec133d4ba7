// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The rvqcomm Authors

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rvqcomm/codec.hpp"
#include "rvqcomm/datagen.hpp"
#include "rvqcomm/tensor.hpp"

namespace rvqcomm {

enum class AgentRole { kVehicle, kInfrastructure };

const char* to_string(AgentRole role);
AgentRole parse_role(const std::string& text);

/// Where an agent's local features come from: a scene template (frame f uses seed
/// derive(scene.seed, f)) or a list of tensor files cycled by frame number.
struct FeatureSource {
    std::optional<SceneSpec> scene;
    std::vector<std::string> tensor_paths;

    FeatureMap frame(uint32_t frame_id) const;
};

struct AgentSpec {
    uint16_t id = 0;
    AgentRole role = AgentRole::kVehicle;
    std::shared_ptr<const CodecModel> codec;
    FeatureSource source;
};

struct LinkSpec {
    uint16_t from = 0;
    uint16_t to = 0;
    /// Bits per simulated second; +inf allowed.
    double rate_bps = 1e9;
    double latency_s = 0.0;
    double loss_probability = 0.0;
};

/// Communication budget: sum over i, j in N_i of |m_ij| <= total_budget_bits.
struct BudgetConfig {
    uint64_t total_budget_bits = 0;
    std::map<uint16_t, std::vector<uint16_t>> neighborhoods;
};

/// gamma(local, remotes). Must preserve shape.
using FusionOperator = std::function<FeatureMap(const FeatureMap& local, std::span<const FeatureMap> remotes)>;

/// Elementwise maximum over the local map and every remote (the default fusion stub).
FeatureMap fuse(const FeatureMap& local, std::span<const FeatureMap> remotes);

/// Named fusion operators; "max" (default) and "mean" are pre-registered.
class FusionRegistry {
public:
    static FusionRegistry& instance();
    void add(const std::string& name, FusionOperator op);
    const FusionOperator& get(const std::string& name) const;
    std::vector<std::string> names() const;

private:
    FusionRegistry();
    std::map<std::string, FusionOperator> ops_;
};

struct SimWorld {
    std::vector<AgentSpec> agents;
    std::vector<LinkSpec> links;
    BudgetConfig budget;
    uint64_t seed = 0;
    std::string fusion = "max";

    /// Unique ids, frozen codecs, positive rates, a link for every neighbourhood edge.
    void validate() const;

    /// Neighbourhoods implied by the links (used when none are given explicitly).
    static std::map<uint16_t, std::vector<uint16_t>> neighborhoods_from_links(const std::vector<LinkSpec>& links);
};

/// World description file (JSON). Relative codec/tensor paths resolve against the file's directory.
SimWorld load_world(const std::string& path);

struct Fidelity {
    double mse = 0.0;
    double cosine = 0.0;
    double psnr = 0.0;
};

/// MSE, cosine similarity and PSNR (peak = max |reference|) of `estimate` against `reference`.
Fidelity measure_fidelity(const FeatureMap& reference, const FeatureMap& estimate);

struct LinkReport {
    uint16_t from = 0;
    uint16_t to = 0;
    /// Index bitstream bits charged to the budget (bytes * 8, padding included).
    uint64_t bits = 0;
    /// Full payload size including the header.
    uint64_t wire_bytes = 0;
    bool dropped = false;
    bool delivered = false;
    double delivery_time = 0.0;
    std::string error;
    std::optional<Fidelity> fidelity;
};

struct AgentReport {
    uint16_t id = 0;
    AgentRole role = AgentRole::kVehicle;
    size_t received = 0;
    /// Mean fidelity over delivered remotes; empty means no collaboration this round.
    std::optional<Fidelity> fidelity;
};

struct RoundReport {
    uint32_t frame = 0;
    std::vector<LinkReport> links;
    std::vector<AgentReport> agents;
    uint64_t total_bits = 0;
    uint64_t header_bits = 0;
    uint64_t budget_bits = 0;
    bool budget_satisfied = false;
    size_t dropped = 0;
    /// Fused map per agent, in agent order (only when requested).
    std::vector<FeatureMap> fused;

    std::string links_csv(bool header = true) const;
    std::string agents_csv(bool header = true) const;
    std::string table() const;
};

struct RoundOptions {
    bool keep_fused = false;
    size_t threads = 1;
};

/// One exchange round: every agent encodes its frame and sends it to each neighbour; deliveries are
/// processed in simulated-time order, decoded by the receiver and fused with its local features.
RoundReport run_round(const SimWorld& world, uint32_t frame, const RoundOptions& options = {});

// ---------------------------------------------------------------------------
// Rate/fidelity sweeps

struct SweepAxes {
    std::vector<size_t> codebook_sizes{64};
    std::vector<size_t> stages{3};
    std::vector<size_t> reduction_ratios{16};
    std::vector<double> alphas{0.8};
};

struct SweepRow {
    CodecConfig config;
    double bits_per_pixel = 0.0;
    double compression = 0.0;
    long compression_rounded = 0;
    bool has_model = false;
    /// Medians over the evaluation corpus.
    Fidelity fidelity;
};

/// Returns a trained model for a config, or nullopt when none is available.
using ModelProvider = std::function<std::optional<CodecModel>(const CodecConfig&)>;

/// Cartesian product of the axes over `base`, rate columns always filled, fidelity filled for
/// configs the provider can supply. Groups are clamped to gcd(groups, C_r) per row.
std::vector<SweepRow> sweep(const CodecConfig& base, const SweepAxes& axes, const ModelProvider& provider,
                            const Corpus* eval);

std::string sweep_csv(const std::vector<SweepRow>& rows);
std::string sweep_table(const std::vector<SweepRow>& rows);

}  // namespace rvqcomm
