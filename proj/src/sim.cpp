// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The rvqcomm Authors

#include "rvqcomm/sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "rvqcomm/error.hpp"
#include "rvqcomm/rng.hpp"
#include "rvqcomm/wire.hpp"

namespace rvqcomm {

namespace {

std::string num(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::string pad(const std::string& s, size_t width) {
    return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}

}  // namespace

const char* to_string(AgentRole role) { return role == AgentRole::kVehicle ? "vehicle" : "infrastructure"; }

AgentRole parse_role(const std::string& text) {
    if (text == "vehicle" || text == "cav") return AgentRole::kVehicle;
    if (text == "infrastructure" || text == "rsu") return AgentRole::kInfrastructure;
    throw ConfigError("unknown agent role '" + text + "'");
}

FeatureMap FeatureSource::frame(uint32_t frame_id) const {
    if (scene) {
        SceneSpec s = *scene;
        s.seed = Rng::derive(scene->seed, frame_id);
        return generate_scene(s);
    }
    if (tensor_paths.empty()) throw ConfigError("agent has no feature source");
    return load_tensor(tensor_paths[frame_id % tensor_paths.size()]);
}

// ---------------------------------------------------------------------------
// Fusion

FeatureMap fuse(const FeatureMap& local, std::span<const FeatureMap> remotes) {
    FeatureMap out = local;
    auto o = out.data();
    for (const auto& r : remotes) {
        if (!r.same_shape(local)) throw ConfigError("fusion shape mismatch");
        const auto d = r.data();
        for (size_t i = 0; i < o.size(); ++i) o[i] = std::max(o[i], d[i]);
    }
    return out;
}

FusionRegistry::FusionRegistry() {
    ops_["max"] = [](const FeatureMap& local, std::span<const FeatureMap> remotes) { return fuse(local, remotes); };
    ops_["mean"] = [](const FeatureMap& local, std::span<const FeatureMap> remotes) {
        FeatureMap out = local;
        auto o = out.data();
        for (const auto& r : remotes) {
            if (!r.same_shape(local)) throw ConfigError("fusion shape mismatch");
            const auto d = r.data();
            for (size_t i = 0; i < o.size(); ++i) o[i] += d[i];
        }
        const double n = static_cast<double>(remotes.size() + 1);
        for (auto& v : o) v /= n;
        return out;
    };
}

FusionRegistry& FusionRegistry::instance() {
    static FusionRegistry registry;
    return registry;
}

void FusionRegistry::add(const std::string& name, FusionOperator op) { ops_[name] = std::move(op); }

const FusionOperator& FusionRegistry::get(const std::string& name) const {
    const auto it = ops_.find(name);
    if (it == ops_.end()) throw ConfigError("unknown fusion operator '" + name + "'");
    return it->second;
}

std::vector<std::string> FusionRegistry::names() const {
    std::vector<std::string> out;
    for (const auto& [name, op] : ops_) out.push_back(name);
    return out;
}

// ---------------------------------------------------------------------------
// World

std::map<uint16_t, std::vector<uint16_t>> SimWorld::neighborhoods_from_links(const std::vector<LinkSpec>& links) {
    std::map<uint16_t, std::vector<uint16_t>> out;
    for (const auto& l : links) out[l.from].push_back(l.to);
    return out;
}

void SimWorld::validate() const {
    std::set<uint16_t> ids;
    for (const auto& a : agents) {
        if (!ids.insert(a.id).second) throw ConfigError("duplicate agent id " + std::to_string(a.id));
        if (!a.codec) throw ConfigError("agent " + std::to_string(a.id) + " has no codec");
        if (!a.codec->frozen) throw ConfigError("agent " + std::to_string(a.id) + " codec is not frozen");
    }
    std::set<std::pair<uint16_t, uint16_t>> edges;
    for (const auto& l : links) {
        if (l.from == l.to) throw ConfigError("link from agent " + std::to_string(l.from) + " to itself");
        if (!ids.count(l.from) || !ids.count(l.to)) throw ConfigError("link references an unknown agent");
        if (!(l.rate_bps > 0.0)) throw ConfigError("link rate must be positive");
        if (!(l.latency_s >= 0.0) || !std::isfinite(l.latency_s)) throw ConfigError("link latency must be finite, >= 0");
        if (!(l.loss_probability >= 0.0 && l.loss_probability <= 1.0)) {
            throw ConfigError("link loss probability must lie in [0, 1]");
        }
        if (!edges.insert({l.from, l.to}).second) throw ConfigError("duplicate link");
    }
    if (budget.total_budget_bits == 0) throw ConfigError("budget must be positive");
    for (const auto& [from, tos] : budget.neighborhoods) {
        if (!ids.count(from)) throw ConfigError("neighbourhood of unknown agent " + std::to_string(from));
        for (uint16_t to : tos) {
            if (!edges.count({from, to})) {
                throw ConfigError("neighbourhood edge " + std::to_string(from) + "->" + std::to_string(to) +
                                  " has no link");
            }
        }
    }
    FusionRegistry::instance().get(fusion);
}

SimWorld load_world(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open world file " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("world file " + path + ": " + e.what());
    }
    const auto base = std::filesystem::path(path).parent_path();
    auto resolve = [&base](const std::string& p) {
        return std::filesystem::path(p).is_relative() ? (base / p).string() : p;
    };

    SimWorld w;
    std::map<std::string, std::shared_ptr<const CodecModel>> codecs;
    try {
        w.seed = j.value("seed", uint64_t{0});
        w.fusion = j.value("fusion", std::string("max"));
        w.budget.total_budget_bits = j.at("budget_bits").get<uint64_t>();
        for (const auto& a : j.at("agents")) {
            AgentSpec spec;
            spec.id = a.at("id").get<uint16_t>();
            spec.role = parse_role(a.value("role", std::string("vehicle")));
            const std::string codec_path = resolve(a.at("codec").get<std::string>());
            auto& slot = codecs[codec_path];
            if (!slot) slot = std::make_shared<const CodecModel>(load_bundle(codec_path));
            spec.codec = slot;
            if (a.contains("scene")) {
                const auto& s = a.at("scene");
                SceneSpec scene;
                scene.height = s.value("height", scene.height);
                scene.width = s.value("width", scene.width);
                scene.channels = s.value("channels", scene.channels);
                scene.background_fraction = s.value("background_fraction", scene.background_fraction);
                scene.n_blobs = s.value("n_blobs", scene.n_blobs);
                scene.blob_scale = s.value("blob_scale", scene.blob_scale);
                scene.channel_sparsity = s.value("channel_sparsity", scene.channel_sparsity);
                scene.n_classes = s.value("n_classes", scene.n_classes);
                scene.profile_seed = s.value("profile_seed", scene.profile_seed);
                scene.seed = s.value("seed", uint64_t{spec.id});
                spec.source.scene = scene;
            } else {
                for (const auto& t : a.at("tensors")) spec.source.tensor_paths.push_back(resolve(t.get<std::string>()));
            }
            w.agents.push_back(std::move(spec));
        }
        for (const auto& l : j.at("links")) {
            LinkSpec link;
            link.from = l.at("from").get<uint16_t>();
            link.to = l.at("to").get<uint16_t>();
            link.rate_bps = l.contains("rate_bps") && l.at("rate_bps").is_string() && l.at("rate_bps") == "inf"
                                ? INFINITY
                                : l.value("rate_bps", 1e9);
            link.latency_s = l.value("latency_s", 0.0);
            link.loss_probability = l.value("loss_probability", 0.0);
            w.links.push_back(link);
        }
        if (j.contains("neighborhoods")) {
            for (const auto& [key, list] : j.at("neighborhoods").items()) {
                auto& n = w.budget.neighborhoods[static_cast<uint16_t>(std::stoul(key))];
                for (const auto& to : list) n.push_back(to.get<uint16_t>());
            }
        } else {
            w.budget.neighborhoods = SimWorld::neighborhoods_from_links(w.links);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("world file " + path + ": " + e.what());
    }
    w.validate();
    return w;
}

// ---------------------------------------------------------------------------
// Round

Fidelity measure_fidelity(const FeatureMap& reference, const FeatureMap& estimate) {
    if (!reference.same_shape(estimate)) throw ConfigError("fidelity shape mismatch");
    const auto a = reference.data();
    const auto b = estimate.data();
    double se = 0.0, dot = 0.0, na = 0.0, nb = 0.0, peak = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        se += d * d;
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
        peak = std::max(peak, std::abs(a[i]));
    }
    Fidelity f;
    f.mse = se / static_cast<double>(a.size());
    if (na == 0.0 && nb == 0.0) {
        f.cosine = 1.0;
    } else if (na == 0.0 || nb == 0.0) {
        f.cosine = 0.0;
    } else {
        f.cosine = dot / (std::sqrt(na) * std::sqrt(nb));
    }
    f.psnr = f.mse == 0.0 ? INFINITY : (peak == 0.0 ? -INFINITY : 10.0 * std::log10(peak * peak / f.mse));
    return f;
}

RoundReport run_round(const SimWorld& world, uint32_t frame, const RoundOptions& options) {
    world.validate();
    const size_t n_agents = world.agents.size();
    std::map<uint16_t, size_t> slot;
    for (size_t i = 0; i < n_agents; ++i) slot[world.agents[i].id] = i;

    // Local features and serialized payloads per agent.
    std::vector<FeatureMap> local(n_agents);
    std::vector<std::vector<uint8_t>> wire(n_agents);
    std::vector<uint64_t> stream_bytes(n_agents);
    auto encode_agent = [&](size_t i) {
        const auto& a = world.agents[i];
        local[i] = a.source.frame(frame);
        const IndexMap idx = encode(*a.codec, local[i]);
        const Payload p = pack(idx, a.codec->codebooks.content_hash(), frame, a.id);
        stream_bytes[i] = p.bitstream.size();
        wire[i] = serialize_payload(p);
    };
    const size_t threads = std::max<size_t>(1, std::min(options.threads, n_agents));
    if (threads == 1) {
        for (size_t i = 0; i < n_agents; ++i) encode_agent(i);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(threads);
        for (size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&, t] {
                try {
                    for (size_t i = t; i < n_agents; i += threads) encode_agent(i);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }

    RoundReport report;
    report.frame = frame;
    report.budget_bits = world.budget.total_budget_bits;

    // Transmissions, in neighbourhood order (ascending sender id, listed receiver order).
    std::map<std::pair<uint16_t, uint16_t>, const LinkSpec*> link_of;
    for (const auto& l : world.links) link_of[{l.from, l.to}] = &l;
    Rng rng(Rng::derive(world.seed, frame));
    for (const auto& [from, tos] : world.budget.neighborhoods) {
        for (uint16_t to : tos) {
            const LinkSpec& l = *link_of.at({from, to});
            const size_t s = slot.at(from);
            LinkReport lr;
            lr.from = from;
            lr.to = to;
            lr.bits = stream_bytes[s] * 8;
            lr.wire_bytes = wire[s].size();
            lr.dropped = rng.bernoulli(l.loss_probability);
            const double serialization =
                std::isinf(l.rate_bps) ? 0.0 : static_cast<double>(lr.wire_bytes * 8) / l.rate_bps;
            lr.delivery_time = l.latency_s + serialization;
            report.total_bits += lr.bits;
            report.header_bits += (lr.wire_bytes - stream_bytes[s]) * 8;
            if (lr.dropped) ++report.dropped;
            report.links.push_back(std::move(lr));
        }
    }
    report.budget_satisfied = report.total_bits <= report.budget_bits;

    // Deliveries in simulated-time order; ties keep transmission order.
    std::vector<size_t> events;
    for (size_t i = 0; i < report.links.size(); ++i) {
        if (!report.links[i].dropped) events.push_back(i);
    }
    std::stable_sort(events.begin(), events.end(), [&](size_t a, size_t b) {
        return report.links[a].delivery_time < report.links[b].delivery_time;
    });

    std::vector<std::vector<FeatureMap>> received(n_agents);
    std::vector<std::vector<Fidelity>> fidelities(n_agents);
    for (size_t e : events) {
        LinkReport& lr = report.links[e];
        const size_t s = slot.at(lr.from);
        const size_t r = slot.at(lr.to);
        const auto& codec = *world.agents[r].codec;
        try {
            const Payload p = parse_payload(wire[s]);
            const IndexMap idx = unpack(p, codec.codebooks);
            FeatureMap decoded = decompress(codec, idx);
            lr.fidelity = measure_fidelity(local[s], decoded);
            lr.delivered = true;
            fidelities[r].push_back(*lr.fidelity);
            received[r].push_back(std::move(decoded));
        } catch (const DesyncError& ex) {
            lr.error = std::string("desync: ") + ex.what();
        } catch (const ProtocolError& ex) {
            lr.error = std::string("protocol: ") + ex.what();
        } catch (const ConfigError& ex) {
            lr.error = std::string("config: ") + ex.what();
        }
    }

    const auto& fusion = FusionRegistry::instance().get(world.fusion);
    for (size_t i = 0; i < n_agents; ++i) {
        AgentReport ar;
        ar.id = world.agents[i].id;
        ar.role = world.agents[i].role;
        ar.received = received[i].size();
        if (!fidelities[i].empty()) {
            Fidelity m;
            for (const auto& f : fidelities[i]) {
                m.mse += f.mse;
                m.cosine += f.cosine;
                m.psnr += f.psnr;
            }
            const double k = static_cast<double>(fidelities[i].size());
            m.mse /= k;
            m.cosine /= k;
            m.psnr /= k;
            ar.fidelity = m;
        }
        report.agents.push_back(ar);
        if (options.keep_fused) report.fused.push_back(fusion(local[i], received[i]));
    }
    return report;
}

std::string RoundReport::links_csv(bool header) const {
    std::ostringstream out;
    if (header) out << "frame,from,to,bits,wire_bytes,dropped,delivered,delivery_time_s,mse,cosine,psnr_db,error\n";
    for (const auto& l : links) {
        out << frame << ',' << l.from << ',' << l.to << ',' << l.bits << ',' << l.wire_bytes << ','
            << (l.dropped ? 1 : 0) << ',' << (l.delivered ? 1 : 0) << ',' << num(l.delivery_time) << ',';
        if (l.fidelity) {
            out << num(l.fidelity->mse) << ',' << num(l.fidelity->cosine) << ',' << num(l.fidelity->psnr);
        } else {
            out << ",,";
        }
        std::string err = l.error;
        std::replace(err.begin(), err.end(), ',', ';');
        out << ',' << err << '\n';
    }
    return out.str();
}

std::string RoundReport::agents_csv(bool header) const {
    std::ostringstream out;
    if (header) out << "frame,agent,role,received,collaboration,mse,cosine,psnr_db\n";
    for (const auto& a : agents) {
        out << frame << ',' << a.id << ',' << to_string(a.role) << ',' << a.received << ',';
        if (a.fidelity) {
            out << "1," << num(a.fidelity->mse) << ',' << num(a.fidelity->cosine) << ',' << num(a.fidelity->psnr) << '\n';
        } else {
            out << "0,,,\n";
        }
    }
    return out.str();
}

std::string RoundReport::table() const {
    std::ostringstream out;
    out << "frame " << frame << ": total " << total_bits << " bits (budget " << budget_bits << ", "
        << (budget_satisfied ? "satisfied" : "EXCEEDED") << "), header overhead " << header_bits << " bits, "
        << dropped << " dropped\n";
    out << pad("from", 6) << pad("to", 6) << pad("bits", 12) << pad("delivered", 11) << pad("t[s]", 12)
        << pad("mse", 14) << pad("cosine", 12) << pad("psnr[dB]", 12) << "  note\n";
    for (const auto& l : links) {
        out << pad(std::to_string(l.from), 6) << pad(std::to_string(l.to), 6) << pad(std::to_string(l.bits), 12)
            << pad(l.delivered ? "yes" : "no", 11) << pad(num(l.delivery_time), 12);
        if (l.fidelity) {
            out << pad(num(l.fidelity->mse), 14) << pad(num(l.fidelity->cosine), 12) << pad(num(l.fidelity->psnr), 12);
        } else {
            out << pad("-", 14) << pad("-", 12) << pad("-", 12);
        }
        out << "  " << (l.dropped ? "dropped" : l.error) << '\n';
    }
    for (const auto& a : agents) {
        out << "agent " << a.id << " (" << to_string(a.role) << "): ";
        if (a.fidelity) {
            out << a.received << " remote(s), mean mse " << num(a.fidelity->mse) << ", cosine "
                << num(a.fidelity->cosine) << ", psnr " << num(a.fidelity->psnr) << " dB\n";
        } else {
            out << "no collaboration\n";
        }
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Sweeps

namespace {

double median(std::vector<double> v) {
    if (v.empty()) return NAN;
    std::sort(v.begin(), v.end());
    const size_t m = v.size() / 2;
    return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace

std::vector<SweepRow> sweep(const CodecConfig& base, const SweepAxes& axes, const ModelProvider& provider,
                            const Corpus* eval) {
    std::vector<SweepRow> rows;
    for (size_t crr : axes.reduction_ratios) {
        for (double alpha : axes.alphas) {
            for (size_t nq : axes.stages) {
                for (size_t k : axes.codebook_sizes) {
                    SweepRow row;
                    row.config = base;
                    row.config.reduction_ratio = crr;
                    row.config.ema_alpha = alpha;
                    row.config.stages = nq;
                    row.config.codebook_size = k;
                    if (crr > 0 && base.channels % crr == 0) {
                        row.config.groups = std::gcd(base.groups, base.channels / crr);
                    }
                    row.config.validate();
                    row.bits_per_pixel = bits_per_pixel(row.config);
                    row.compression = compression_ratio(row.config);
                    row.compression_rounded = std::lround(row.compression);
                    if (provider && eval != nullptr && eval->size() > 0) {
                        if (auto model = provider(row.config)) {
                            std::vector<double> mse, cosine, psnr;
                            for (size_t i = 0; i < eval->size(); ++i) {
                                const FeatureMap f = eval->at(i);
                                const auto fid = measure_fidelity(f, decompress(*model, encode(*model, f)));
                                mse.push_back(fid.mse);
                                cosine.push_back(fid.cosine);
                                psnr.push_back(fid.psnr);
                            }
                            row.has_model = true;
                            row.fidelity = {median(mse), median(cosine), median(psnr)};
                        }
                    }
                    rows.push_back(row);
                }
            }
        }
    }
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out << "K,n_q,C_rr,alpha,bpp,compression,compression_rounded,model,mse,cosine,psnr_db\n";
    for (const auto& r : rows) {
        out << r.config.codebook_size << ',' << r.config.stages << ',' << r.config.reduction_ratio << ','
            << num(r.config.ema_alpha) << ',' << num(r.bits_per_pixel) << ',' << num(r.compression) << ','
            << r.compression_rounded << ',';
        if (r.has_model) {
            out << "present," << num(r.fidelity.mse) << ',' << num(r.fidelity.cosine) << ',' << num(r.fidelity.psnr);
        } else {
            out << "absent,,,";
        }
        out << '\n';
    }
    return out.str();
}

std::string sweep_table(const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out << pad("K", 6) << pad("n_q", 5) << pad("C_rr", 6) << pad("alpha", 7) << pad("bpp", 6) << pad("Compr.", 9)
        << pad("mse", 14) << pad("cosine", 12) << pad("psnr[dB]", 12) << '\n';
    for (const auto& r : rows) {
        out << pad(std::to_string(r.config.codebook_size), 6) << pad(std::to_string(r.config.stages), 5)
            << pad(std::to_string(r.config.reduction_ratio), 6) << pad(num(r.config.ema_alpha), 7)
            << pad(num(r.bits_per_pixel), 6) << pad(std::to_string(r.compression_rounded) + "x", 9);
        if (r.has_model) {
            out << pad(num(r.fidelity.mse), 14) << pad(num(r.fidelity.cosine), 12) << pad(num(r.fidelity.psnr), 12);
        } else {
            out << pad("absent", 14) << pad("-", 12) << pad("-", 12);
        }
        out << '\n';
    }
    return out.str();
}

}  // namespace rvqcomm
