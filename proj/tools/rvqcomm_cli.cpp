// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The rvqcomm Authors

// Command-line front end: data generation, training, encode/decode, wire roundtrips,
// codebook statistics, rate sweeps and multi-agent simulation.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rvqcomm/codec.hpp"
#include "rvqcomm/datagen.hpp"
#include "rvqcomm/detail/bytes.hpp"
#include "rvqcomm/error.hpp"
#include "rvqcomm/rng.hpp"
#include "rvqcomm/sim.hpp"
#include "rvqcomm/trainer.hpp"
#include "rvqcomm/wire.hpp"

namespace fs = std::filesystem;
using namespace rvqcomm;

namespace {

struct Globals {
    uint64_t seed = 0;
    size_t threads = 1;
    std::string output_dir = ".";
};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

fs::path out_path(const Globals& g, const std::string& name) {
    const fs::path p(name);
    return p.is_absolute() ? p : fs::path(g.output_dir) / p;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

/// Resolved configuration, echoed to stderr so any run can be reproduced.
class ConfigLog {
public:
    explicit ConfigLog(std::string command) : command_(std::move(command)) {}
    template <class T>
    ConfigLog& add(const std::string& key, const T& value) {
        std::ostringstream s;
        if constexpr (std::is_same_v<T, double>) {
            s << fmt(value);
        } else if constexpr (std::is_same_v<T, bool>) {
            s << (value ? "true" : "false");
        } else {
            s << value;
        }
        entries_.emplace_back(key, s.str());
        return *this;
    }
    void emit(const Globals& g) const {
        std::cerr << "# " << command_ << " seed=" << g.seed << " threads=" << g.threads
                  << " output_dir=" << g.output_dir << '\n';
        for (const auto& [k, v] : entries_) std::cerr << "#   " << k << " = " << v << '\n';
    }

private:
    std::string command_;
    std::vector<std::pair<std::string, std::string>> entries_;
};

void log_codec(ConfigLog& log, const CodecConfig& c) {
    log.add("channels", c.channels)
        .add("reduction_ratio", c.reduction_ratio)
        .add("stages", c.stages)
        .add("codebook_size", c.codebook_size)
        .add("ema_alpha", c.ema_alpha)
        .add("groups", c.groups)
        .add("post_affine_bias", c.post_affine_bias);
}

// Scene flags shared by gen, train, stats and roundtrip.
struct SceneFlags {
    SceneSpec spec;
    void attach(CLI::App* app) {
        app->add_option("--height", spec.height, "Scene height")->check(CLI::PositiveNumber);
        app->add_option("--width", spec.width, "Scene width")->check(CLI::PositiveNumber);
        app->add_option("--channels", spec.channels, "Feature channels")->check(CLI::PositiveNumber);
        app->add_option("--background", spec.background_fraction, "Background fraction")->check(CLI::Range(0.0, 1.0));
        app->add_option("--blobs", spec.n_blobs, "Foreground blobs per scene");
        app->add_option("--blob-scale", spec.blob_scale, "Blob radius (pixels)")->check(CLI::PositiveNumber);
        app->add_option("--classes", spec.n_classes, "Blob channel-profile classes")->check(CLI::PositiveNumber);
    }
    void log(ConfigLog& l) const {
        l.add("scene.height", spec.height)
            .add("scene.width", spec.width)
            .add("scene.channels", spec.channels)
            .add("scene.background_fraction", spec.background_fraction)
            .add("scene.n_blobs", spec.n_blobs)
            .add("scene.blob_scale", spec.blob_scale)
            .add("scene.n_classes", spec.n_classes);
    }
};

// Corpus selection: a manifest of tensor files or an on-the-fly synthetic corpus.
struct CorpusFlags {
    std::string manifest;
    std::string split;
    size_t synthetic = 0;

    void attach(CLI::App* app, const char* what) {
        app->add_option("--manifest", manifest, std::string("Manifest of RVQT tensors for ") + what);
        app->add_option("--split", split, "Only use manifest entries with this split");
        app->add_option("--synthetic", synthetic, "Use N generated scenes instead of a manifest");
    }

    std::unique_ptr<Corpus> open(const SceneSpec& scene, uint64_t seed) const {
        if (!manifest.empty() && synthetic > 0) throw ConfigError("--manifest and --synthetic are exclusive");
        if (!manifest.empty()) {
            std::vector<std::string> paths;
            for (const auto& e : read_manifest(manifest)) {
                if (split.empty() || e.split == split) paths.push_back(e.path);
            }
            if (paths.empty()) throw ConfigError("manifest selects no tensors");
            return std::make_unique<FileCorpus>(std::move(paths));
        }
        if (synthetic == 0) throw ConfigError("need --manifest or --synthetic");
        return std::make_unique<SyntheticCorpus>(scene, synthetic, seed, false);
    }

    void log(ConfigLog& l) const {
        if (!manifest.empty()) {
            l.add("corpus.manifest", manifest).add("corpus.split", split.empty() ? "*" : split);
        } else {
            l.add("corpus.synthetic", synthetic);
        }
    }
};

// ---------------------------------------------------------------------------

int cmd_gen(const Globals& g, const SceneFlags& scene, size_t count, double val_fraction) {
    scene.spec.validate();
    if (count == 0) throw ConfigError("--count must be positive");
    ConfigLog log("gen");
    scene.log(log);
    log.add("count", count).add("val_fraction", val_fraction);
    log.emit(g);

    fs::create_directories(g.output_dir);
    SyntheticCorpus corpus(scene.spec, count, g.seed, false);
    const size_t n_val = static_cast<size_t>(std::llround(val_fraction * static_cast<double>(count)));
    std::vector<ManifestEntry> entries;
    std::ostringstream csv;
    csv << "index,file,split,background_fraction\n";
    for (size_t i = 0; i < count; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "scene_%05zu.rvqt", i);
        const FeatureMap map = corpus.at(i);
        save_tensor(map, out_path(g, name).string());
        const std::string split = i >= count - n_val ? "val" : "train";
        entries.push_back({name, split});
        csv << i << ',' << name << ',' << split << ',' << fmt(background_fraction(map, kBackgroundCeiling)) << '\n';
    }
    write_manifest(out_path(g, "manifest.txt").string(), entries);
    write_text(out_path(g, "scenes.csv"), csv.str());
    std::cout << "wrote " << count << " scenes (" << count - n_val << " train, " << n_val << " val) to "
              << g.output_dir << '\n';
    return 0;
}

struct TrainFlags {
    std::string config_file;
    std::string model_out = "model.rvqc";
    std::string checkpoint;
    std::string resume;
    CodecConfig codec;
    TrainingConfig training;
    bool no_bias = false;
};

int cmd_train(const Globals& g, const SceneFlags& scene, const CorpusFlags& corpus_flags, TrainFlags t,
              const CLI::App& app) {
    // Manifest file values first, explicit flags win.
    TrainingManifest manifest{t.training, t.codec};
    if (!t.config_file.empty()) {
        const TrainingManifest from_file = read_training_manifest(t.config_file, manifest);
        auto given = [&app](const char* name) { return app.count(name) > 0; };
        if (!given("--alpha")) manifest.training.ema_alpha = from_file.training.ema_alpha;
        if (!given("--beta")) manifest.training.beta_commit = from_file.training.beta_commit;
        if (!given("--lambda")) manifest.training.lambda_ortho = from_file.training.lambda_ortho;
        if (!given("--epochs")) manifest.training.epochs = from_file.training.epochs;
        if (!given("--lr")) manifest.training.learning_rate = from_file.training.learning_rate;
        if (!given("--batch")) manifest.training.batch_size = from_file.training.batch_size;
        if (!given("--K")) manifest.codec.codebook_size = from_file.codec.codebook_size;
        if (!given("--nq")) manifest.codec.stages = from_file.codec.stages;
        if (!given("--crr")) manifest.codec.reduction_ratio = from_file.codec.reduction_ratio;
        if (!given("--groups")) manifest.codec.groups = from_file.codec.groups;
        if (!given("--no-bias")) manifest.codec.post_affine_bias = from_file.codec.post_affine_bias;
        if (from_file.training.seed != t.training.seed) manifest.training.seed = from_file.training.seed;
    }
    // A nonzero --seed overrides a seed from the config file.
    if (g.seed != 0 || t.config_file.empty()) manifest.training.seed = g.seed;
    if (t.no_bias) manifest.codec.post_affine_bias = false;
    manifest.codec.ema_alpha = manifest.training.ema_alpha;

    if (app.count("--channels") > 0) manifest.codec.channels = scene.spec.channels;
    SceneSpec spec = scene.spec;
    spec.channels = manifest.codec.channels;
    manifest.codec.validate();
    manifest.training.validate();
    spec.validate();

    ConfigLog log("train");
    log_codec(log, manifest.codec);
    log.add("beta_commit", manifest.training.beta_commit)
        .add("lambda_ortho", manifest.training.lambda_ortho)
        .add("epochs", manifest.training.epochs)
        .add("learning_rate", manifest.training.learning_rate)
        .add("batch_size", manifest.training.batch_size)
        .add("training_seed", manifest.training.seed);
    corpus_flags.log(log);
    if (corpus_flags.manifest.empty()) scene.log(log);
    log.emit(g);

    const auto corpus = corpus_flags.open(spec, Rng::derive(g.seed, 0xC0));
    CodecModel model;
    TrainingState resume_state;
    FitOptions options;
    if (!t.resume.empty()) {
        auto [m, s] = load_checkpoint(t.resume);
        model = std::move(m);
        resume_state = std::move(s);
        options.resume = &resume_state;
        if (model.config.codebook_size != manifest.codec.codebook_size || model.config.stages != manifest.codec.stages ||
            model.config.channels != manifest.codec.channels ||
            model.config.reduced_channels() != manifest.codec.reduced_channels()) {
            throw ConfigError("checkpoint shape does not match the requested codec");
        }
    } else {
        model = CodecModel::create(manifest.codec, Rng::derive(manifest.training.seed, 0x1417));
    }

    std::ostringstream history;
    history << "epoch,recon_mse,commit_loss,ortho_loss,total";
    for (size_t s = 0; s < manifest.codec.stages; ++s) history << ",stage" << s << "_residual";
    history << '\n';
    options.on_epoch = [&](size_t epoch, const LossReport& r) {
        history << epoch << ',' << fmt(r.recon_mse) << ',' << fmt(r.commit_loss) << ',' << fmt(r.ortho_loss) << ','
                << fmt(r.total);
        for (double v : r.per_stage_residual) history << ',' << fmt(v);
        history << '\n';
        std::cerr << "epoch " << epoch << ": recon " << fmt(r.recon_mse) << " commit " << fmt(r.commit_loss)
                  << " ortho " << fmt(r.ortho_loss) << '\n';
    };
    FitResult result = fit(model, *corpus, manifest.training, options);

    fs::create_directories(g.output_dir);
    save_bundle(result.model, out_path(g, t.model_out).string());
    if (!t.checkpoint.empty()) save_checkpoint(result.model, result.state, out_path(g, t.checkpoint).string());
    write_text(out_path(g, "train_history.csv"), history.str());
    write_text(out_path(g, "train_config.txt"), format_training_manifest(manifest));

    std::cout << "trained " << corpus->size() << " maps for " << manifest.training.epochs << " epochs; final recon MSE "
              << (result.history.empty() ? std::string("n/a") : fmt(result.history.back().recon_mse)) << '\n';
    std::cout << "model: " << out_path(g, t.model_out).string() << " (codebook hash 0x" << std::hex
              << result.model.codebooks.content_hash() << std::dec << ")\n";
    return 0;
}

int cmd_encode(const Globals& g, const std::string& model_path, const std::string& input, std::string output,
               uint32_t frame, uint16_t agent) {
    ConfigLog log("encode");
    log.add("model", model_path).add("input", input).add("frame", frame).add("agent", agent);
    log.emit(g);
    const CodecModel model = load_bundle(model_path);
    const FeatureMap map = load_tensor(input);
    const IndexMap idx = encode(model, map);
    const Payload p = pack(idx, model.codebooks.content_hash(), frame, agent);
    if (output.empty()) output = fs::path(input).stem().string() + ".rvqp";
    fs::create_directories(g.output_dir);
    const auto bytes = serialize_payload(p);
    detail::write_file(out_path(g, output).string(), bytes);
    std::cout << "payload: " << p.bitstream.size() * 8 << " index bits + " << kPayloadHeaderBytes * 8
              << " header bits (" << bytes.size() << " bytes), " << fmt(bits_per_pixel(model.config))
              << " bpp\n";
    return 0;
}

int cmd_decode(const Globals& g, const std::string& model_path, const std::string& input, std::string output) {
    ConfigLog log("decode");
    log.add("model", model_path).add("input", input);
    log.emit(g);
    const CodecModel model = load_bundle(model_path);
    const Payload p = parse_payload(detail::read_file(input));
    const IndexMap idx = unpack(p, model.codebooks);
    const FeatureMap map = decompress(model, idx);
    if (output.empty()) output = fs::path(input).stem().string() + ".decoded.rvqt";
    fs::create_directories(g.output_dir);
    save_tensor(map, out_path(g, output).string());
    std::cout << "decoded frame " << p.header.frame_id << " from agent " << p.header.agent_id << ": "
              << map.height() << "x" << map.width() << "x" << map.channels() << '\n';
    return 0;
}

int cmd_roundtrip(const Globals& g, const SceneFlags& scene, const std::string& model_path, const std::string& input,
                  CodecConfig codec) {
    CodecModel model;
    if (!model_path.empty()) {
        model = load_bundle(model_path);
    } else {
        codec.channels = scene.spec.channels;
        codec.validate();
        model = CodecModel::create(codec, Rng::derive(g.seed, 0x1417));
        model.freeze();
    }
    ConfigLog log("roundtrip");
    log_codec(log, model.config);
    log.add("model", model_path.empty() ? std::string("<random>") : model_path);
    if (input.empty()) {
        scene.log(log);
    } else {
        log.add("input", input);
    }
    log.emit(g);

    FeatureMap map;
    if (input.empty()) {
        SceneSpec spec = scene.spec;
        spec.channels = model.config.channels;
        spec.seed = g.seed;
        map = generate_scene(spec);
    } else {
        map = load_tensor(input);
    }
    const IndexMap idx = encode(model, map);
    const Payload p = pack(idx, model.codebooks.content_hash(), 0, 0);
    const auto wire = serialize_payload(p);
    const IndexMap back = unpack(parse_payload(wire), model.codebooks);
    const bool identical = back == idx;
    const Fidelity f = measure_fidelity(map, decompress(model, back));
    std::cout << "payload bits: " << p.bitstream.size() * 8 << " (+" << kPayloadHeaderBytes * 8 << " header)\n";
    std::cout << "indices identical: " << (identical ? "true" : "false") << '\n';
    std::cout << "reconstruction mse: " << fmt(f.mse) << "  cosine: " << fmt(f.cosine) << "  psnr: " << fmt(f.psnr)
              << " dB\n";
    return identical ? 0 : 1;
}

int cmd_stats(const Globals& g, const SceneFlags& scene, const CorpusFlags& corpus_flags,
              const std::string& model_path, size_t stage) {
    const CodecModel model = load_bundle(model_path);
    if (stage >= model.config.stages) throw ConfigError("--stage out of range for this model");
    SceneSpec spec = scene.spec;
    spec.channels = model.config.channels;
    ConfigLog log("stats");
    log.add("model", model_path).add("stage", stage);
    corpus_flags.log(log);
    if (corpus_flags.manifest.empty()) scene.log(log);
    log.emit(g);

    const auto corpus = corpus_flags.open(spec, Rng::derive(g.seed, 0xC0));
    const size_t K = model.config.codebook_size;
    std::vector<double> pooled(K, 0.0);
    double pixels = 0.0;
    for (size_t i = 0; i < corpus->size(); ++i) {
        const FeatureMap map = corpus->at(i);
        const IndexMap idx = encode(model, map);
        const auto h = usage_histogram(model.codebooks, idx, stage);
        const double n = static_cast<double>(map.pixels());
        for (size_t k = 0; k < K; ++k) pooled[k] += h[k] * n;
        pixels += n;
    }
    for (auto& v : pooled) v /= pixels;
    const size_t top = static_cast<size_t>(std::max_element(pooled.begin(), pooled.end()) - pooled.begin());

    std::ostringstream csv;
    csv << "stage,code,share\n";
    for (size_t k = 0; k < K; ++k) csv << stage << ',' << k << ',' << fmt(pooled[k]) << '\n';
    fs::create_directories(g.output_dir);
    write_text(out_path(g, "usage_stage" + std::to_string(stage) + ".csv"), csv.str());

    std::vector<size_t> order(K);
    for (size_t k = 0; k < K; ++k) order[k] = k;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return pooled[a] > pooled[b]; });
    std::cout << "stage " << stage << " usage over " << corpus->size() << " maps (" << static_cast<size_t>(pixels)
              << " pixels)\n";
    for (size_t r = 0; r < std::min<size_t>(K, 16); ++r) {
        char line[96];
        const int bar = static_cast<int>(std::lround(pooled[order[r]] * 40.0));
        std::snprintf(line, sizeof line, "  code %5zu  %8.4f  ", order[r], pooled[order[r]]);
        std::cout << line << std::string(static_cast<size_t>(bar), '#') << '\n';
    }
    if (K > 16) std::cout << "  ... " << K - 16 << " more codes in the CSV\n";
    std::cout << "top-code share: " << fmt(pooled[top]) << " (code " << top << ")\n";
    return 0;
}

int cmd_sweep(const Globals& g, const SceneFlags& scene, const CorpusFlags& corpus_flags, const SweepAxes& axes,
              size_t channels, const std::string& models_dir) {
    CodecConfig base;
    base.channels = channels;
    ConfigLog log("sweep");
    auto join = [](const auto& v) {
        std::ostringstream s;
        for (size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
        return s.str();
    };
    log.add("channels", channels)
        .add("K", join(axes.codebook_sizes))
        .add("nq", join(axes.stages))
        .add("crr", join(axes.reduction_ratios))
        .add("alpha", join(axes.alphas))
        .add("models_dir", models_dir.empty() ? std::string("<none>") : models_dir);
    std::unique_ptr<Corpus> corpus;
    ModelProvider provider;
    if (!models_dir.empty()) {
        corpus_flags.log(log);
        SceneSpec spec = scene.spec;
        spec.channels = channels;
        corpus = corpus_flags.open(spec, Rng::derive(g.seed, 0xC0));
        provider = [&models_dir](const CodecConfig& c) -> std::optional<CodecModel> {
            const fs::path p = fs::path(models_dir) / ("K" + std::to_string(c.codebook_size) + "_nq" +
                                                      std::to_string(c.stages) + "_crr" +
                                                      std::to_string(c.reduction_ratio) + ".rvqc");
            if (!fs::exists(p)) return std::nullopt;
            return load_bundle(p.string());
        };
    }
    log.emit(g);
    const auto rows = sweep(base, axes, provider, corpus.get());
    fs::create_directories(g.output_dir);
    write_text(out_path(g, "sweep.csv"), sweep_csv(rows));
    std::cout << sweep_table(rows);
    return 0;
}

int cmd_simulate(const Globals& g, const std::string& world_path, uint32_t frames, uint32_t first_frame,
                 uint64_t budget_override, bool keep_fused) {
    SimWorld world = load_world(world_path);
    if (budget_override > 0) world.budget.total_budget_bits = budget_override;
    if (g.seed != 0) world.seed = g.seed;
    world.validate();
    ConfigLog log("simulate");
    log.add("world", world_path)
        .add("agents", world.agents.size())
        .add("links", world.links.size())
        .add("budget_bits", world.budget.total_budget_bits)
        .add("fusion", world.fusion)
        .add("world_seed", world.seed)
        .add("frames", frames)
        .add("first_frame", first_frame);
    log.emit(g);

    RoundOptions options;
    options.threads = g.threads;
    options.keep_fused = keep_fused;
    std::string links_csv, agents_csv;
    fs::create_directories(g.output_dir);
    bool all_within = true;
    for (uint32_t f = first_frame; f < first_frame + frames; ++f) {
        const RoundReport r = run_round(world, f, options);
        links_csv += r.links_csv(f == first_frame);
        agents_csv += r.agents_csv(f == first_frame);
        all_within = all_within && r.budget_satisfied;
        std::cout << r.table();
        for (size_t i = 0; i < r.fused.size(); ++i) {
            save_tensor(r.fused[i], out_path(g, "fused_f" + std::to_string(f) + "_a" +
                                                     std::to_string(r.agents[i].id) + ".rvqt")
                                        .string());
        }
    }
    write_text(out_path(g, "sim_links.csv"), links_csv);
    write_text(out_path(g, "sim_agents.csv"), agents_csv);
    std::cout << "budget verdict: " << (all_within ? "within budget" : "over budget") << '\n';
    return 0;
}

template <class T>
std::vector<T> parse_list(const std::string& text, const char* flag) {
    std::vector<T> out;
    std::stringstream s(text);
    std::string item;
    while (std::getline(s, item, ',')) {
        std::istringstream in(item);
        T v{};
        if (!(in >> v) || !(in >> std::ws).eof()) throw ConfigError(std::string("bad value '") + item + "' in " + flag);
        out.push_back(v);
    }
    if (out.empty()) throw ConfigError(std::string(flag) + " needs at least one value");
    return out;
}

int exit_code(ErrorKind kind) { return static_cast<int>(kind); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Residual vector quantization codec for collaborative BEV feature sharing"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand
    app.set_help_all_flag("--help-all", "Show help for every subcommand");
    Globals g;
    app.add_option("--seed", g.seed, "Master seed; every output is a pure function of it");
    app.add_option("--threads", g.threads, "Worker threads (1 keeps results bit-reproducible)")
        ->check(CLI::PositiveNumber);
    app.add_option("--output-dir", g.output_dir, "Directory for output files");

    // gen
    SceneFlags gen_scene;
    size_t gen_count = 10;
    double gen_val = 0.0;
    auto* gen = app.add_subcommand("gen", "Generate a synthetic BEV corpus as RVQT tensors plus a manifest");
    gen_scene.attach(gen);
    gen->add_option("--count", gen_count, "Number of scenes");
    gen->add_option("--val-fraction", gen_val, "Fraction of scenes marked 'val'")->check(CLI::Range(0.0, 1.0));

    // train
    SceneFlags train_scene;
    CorpusFlags train_corpus;
    TrainFlags tf;
    auto* train = app.add_subcommand("train", "Fit a codec (projections, norms, codebooks)");
    train_scene.attach(train);
    train_corpus.attach(train, "training");
    train->add_option("--config", tf.config_file, "Training manifest (key = value lines)");
    train->add_option("--K", tf.codec.codebook_size, "Codebook size (power of two)");
    train->add_option("--nq", tf.codec.stages, "Quantization stages");
    train->add_option("--crr", tf.codec.reduction_ratio, "Channel reduction ratio C/C_r");
    train->add_option("--groups", tf.codec.groups, "GroupNorm groups");
    train->add_flag("--no-bias", tf.no_bias, "Drop the post-affine bias");
    train->add_option("--alpha", tf.training.ema_alpha, "EMA rate");
    train->add_option("--beta", tf.training.beta_commit, "Commitment weight");
    train->add_option("--lambda", tf.training.lambda_ortho, "Orthogonality weight");
    train->add_option("--epochs", tf.training.epochs, "Epochs");
    train->add_option("--lr", tf.training.learning_rate, "Peak learning rate");
    train->add_option("--batch", tf.training.batch_size, "Batch size");
    train->add_option("--model-out", tf.model_out, "Output codebook bundle");
    train->add_option("--checkpoint", tf.checkpoint, "Also write a resumable checkpoint");
    train->add_option("--resume", tf.resume, "Resume from a checkpoint");

    // encode / decode
    std::string enc_model, enc_input, enc_output;
    uint32_t enc_frame = 0;
    uint16_t enc_agent = 0;
    auto* enc = app.add_subcommand("encode", "Encode an RVQT tensor to a payload");
    enc->add_option("--model", enc_model, "Codebook bundle")->required();
    enc->add_option("--input", enc_input, "RVQT tensor")->required();
    enc->add_option("--output", enc_output, "Payload file");
    enc->add_option("--frame", enc_frame, "Frame id");
    enc->add_option("--agent", enc_agent, "Agent id");

    std::string dec_model, dec_input, dec_output;
    auto* dec = app.add_subcommand("decode", "Decode a payload to an RVQT tensor");
    dec->add_option("--model", dec_model, "Codebook bundle")->required();
    dec->add_option("--input", dec_input, "Payload file")->required();
    dec->add_option("--output", dec_output, "RVQT tensor");

    // roundtrip
    SceneFlags rt_scene;
    std::string rt_model, rt_input;
    CodecConfig rt_codec;
    auto* rt = app.add_subcommand("roundtrip", "Encode, pack, parse, unpack and decode one map");
    rt_scene.attach(rt);
    rt->add_option("--model", rt_model, "Codebook bundle (default: random codec)");
    rt->add_option("--input", rt_input, "RVQT tensor (default: generated scene)");
    rt->add_option("--K", rt_codec.codebook_size, "Codebook size for the random codec");
    rt->add_option("--nq", rt_codec.stages, "Stages for the random codec");
    rt->add_option("--crr", rt_codec.reduction_ratio, "Reduction ratio for the random codec");

    // stats
    SceneFlags st_scene;
    CorpusFlags st_corpus;
    std::string st_model;
    size_t st_stage = 0;
    auto* stats = app.add_subcommand("stats", "Codebook usage histogram over a corpus");
    st_scene.attach(stats);
    st_corpus.attach(stats, "evaluation");
    stats->add_option("--model", st_model, "Codebook bundle")->required();
    stats->add_option("--stage", st_stage, "Quantization stage");

    // sweep
    SceneFlags sw_scene;
    CorpusFlags sw_corpus;
    std::string sw_K = "4,16,64,256,1024", sw_nq = "3", sw_crr = "16", sw_alpha = "0.8", sw_models;
    size_t sw_channels = 256;
    auto* sw = app.add_subcommand("sweep", "Rate table (and fidelity, given trained models) over codec settings");
    sw_scene.attach(sw);
    sw_corpus.attach(sw, "fidelity evaluation");
    sw->add_option("--K", sw_K, "Comma-separated codebook sizes");
    sw->add_option("--nq", sw_nq, "Comma-separated stage counts");
    sw->add_option("--crr", sw_crr, "Comma-separated reduction ratios");
    sw->add_option("--alpha", sw_alpha, "Comma-separated EMA rates");
    sw->add_option("--feature-channels", sw_channels, "Feature channels C");
    sw->add_option("--models-dir", sw_models, "Directory of K<K>_nq<n>_crr<r>.rvqc bundles");

    // simulate
    std::string sim_world;
    uint32_t sim_frames = 1, sim_first = 0;
    uint64_t sim_budget = 0;
    bool sim_fused = false;
    auto* sim = app.add_subcommand("simulate", "Run collaboration rounds over a JSON world");
    sim->add_option("--world", sim_world, "World description (JSON)")->required();
    sim->add_option("--frames", sim_frames, "Rounds to run");
    sim->add_option("--first-frame", sim_first, "Id of the first round");
    sim->add_option("--budget", sim_budget, "Override the world's bit budget");
    sim->add_flag("--keep-fused", sim_fused, "Write fused maps per agent");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return exit_code(ErrorKind::kConfig);
    }

    try {
        if (*gen) return cmd_gen(g, gen_scene, gen_count, gen_val);
        if (*train) return cmd_train(g, train_scene, train_corpus, tf, *train);
        if (*enc) return cmd_encode(g, enc_model, enc_input, enc_output, enc_frame, enc_agent);
        if (*dec) return cmd_decode(g, dec_model, dec_input, dec_output);
        if (*rt) return cmd_roundtrip(g, rt_scene, rt_model, rt_input, rt_codec);
        if (*stats) return cmd_stats(g, st_scene, st_corpus, st_model, st_stage);
        if (*sw) {
            SweepAxes axes;
            axes.codebook_sizes = parse_list<size_t>(sw_K, "--K");
            axes.stages = parse_list<size_t>(sw_nq, "--nq");
            axes.reduction_ratios = parse_list<size_t>(sw_crr, "--crr");
            axes.alphas = parse_list<double>(sw_alpha, "--alpha");
            return cmd_sweep(g, sw_scene, sw_corpus, axes, sw_channels, sw_models);
        }
        if (*sim) return cmd_simulate(g, sim_world, sim_frames, sim_first, sim_budget, sim_fused);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code(e.kind());
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code(ErrorKind::kIo);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
