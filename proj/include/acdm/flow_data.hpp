#pragma once

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "acdm/rng.hpp"
#include "acdm/tensor.hpp"

namespace acdm {

using json = nlohmann::json;

/// One simulation step: dense field channels plus spatially expanded scalar
/// parameters on a regular [C,H,W] grid (rows = y, cols = x).
struct FlowState {
    int c = 0, h = 0, w = 0;
    std::vector<double> data;

    FlowState() = default;
    FlowState(int c_, int h_, int w_) : c(c_), h(h_), w(w_), data(static_cast<size_t>(c_) * h_ * w_, 0.0) {}

    size_t plane() const { return static_cast<size_t>(h) * w; }
    double* channel(int ci) { return data.data() + static_cast<size_t>(ci) * plane(); }
    const double* channel(int ci) const { return data.data() + static_cast<size_t>(ci) * plane(); }
    double& at(int ci, int y, int x) { return data[(static_cast<size_t>(ci) * h + y) * w + x]; }
    double at(int ci, int y, int x) const { return data[(static_cast<size_t>(ci) * h + y) * w + x]; }
};

/// Cylinder geometry carried with every trajectory; drives masking and the
/// downstream probe placement.
struct CylinderGeom {
    double cx_frac = 0.25;  // of domain length
    double cy_frac = 0.5;   // of domain height
    double d_frac = 0.2;    // of domain height
    bool present = true;
};

/// Time-ordered flow states with step size, per-step parameter record and
/// normalization provenance.
struct Trajectory {
    std::vector<FlowState> states;                      // s^0 .. s^T
    double dt = 0.05;                                   // physical time between stored states
    std::vector<std::string> channel_names;             // field channels then parameter channels
    int field_channels = 3;                             // leading non-parameter channels
    std::map<std::string, std::vector<double>> params;  // name -> value per step (length T+1)
    std::string source;                                 // e.g. "solver", "rollout:acdm"
    std::string stats_ref;                              // empty = raw physical units
    CylinderGeom cylinder;
    uint64_t seed = 0;
    json meta;  // resolved config and free-form provenance

    int steps() const { return static_cast<int>(states.size()) - 1; }  // T
    int channels() const { return states.empty() ? 0 : states[0].c; }
    int height() const { return states.empty() ? 0 : states[0].h; }
    int width() const { return states.empty() ? 0 : states[0].w; }

    void validate() const {
        if (states.size() < 2) throw std::invalid_argument("trajectory: need at least two states (T >= 1)");
        for (const auto& [name, series] : params)
            if (series.size() != states.size())
                throw std::invalid_argument("trajectory: param '" + name + "' record length " +
                                            std::to_string(series.size()) + " != state count " +
                                            std::to_string(states.size()));
        for (const auto& s : states)
            if (s.c != states[0].c || s.h != states[0].h || s.w != states[0].w)
                throw std::invalid_argument("trajectory: inconsistent state shapes");
    }
};

// ---------------------------------------------------------------------------
// Parameter expansion and masking
// ---------------------------------------------------------------------------

/// Expands scalar parameter values to constant [H,W] channels in registry order.
inline std::vector<std::vector<double>> expand_params(const std::vector<double>& values, int h, int w) {
    std::vector<std::vector<double>> out;
    out.reserve(values.size());
    for (double v : values) out.emplace_back(static_cast<size_t>(h) * w, v);
    return out;
}

/// Binary mask from cylinder geometry: 1 = fluid, 0 = inside the obstacle.
inline std::vector<double> cylinder_mask(const CylinderGeom& g, int h, int w) {
    std::vector<double> mask(static_cast<size_t>(h) * w, 1.0);
    if (!g.present) return mask;
    double ly = 1.0, lx = static_cast<double>(w) / h;
    double cx = g.cx_frac * lx, cy = g.cy_frac * ly, r = 0.5 * g.d_frac * ly;
    double cell = ly / h;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double px = (x + 0.5) * cell, py = (y + 0.5) * cell;
            if ((px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r)
                mask[static_cast<size_t>(y) * w + x] = 0.0;
        }
    return mask;
}

/// Multiplies every channel by the binary mask (idempotent).
inline void apply_mask(FlowState& s, const std::vector<double>& mask) {
    if (mask.size() != s.plane())
        throw std::invalid_argument("apply_mask: mask size does not match state plane");
    for (int c = 0; c < s.c; ++c) {
        double* ch = s.channel(c);
        for (size_t i = 0; i < mask.size(); ++i) ch[i] *= mask[i];
    }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-channel standardization statistics. The two velocity channels share a
/// magnitude-based scale: one std so their joint second moment is 1.
struct NormStats {
    std::vector<std::string> channel_names;
    std::vector<double> mean, std;
    std::string ref;  // content hash, used as provenance id

    void compute_ref() {
        uint64_t hash = 1469598103934665603ull;
        auto mix = [&hash](const void* p, size_t n) {
            const auto* b = static_cast<const unsigned char*>(p);
            for (size_t i = 0; i < n; ++i) hash = (hash ^ b[i]) * 1099511628211ull;
        };
        for (const auto& n : channel_names) mix(n.data(), n.size());
        mix(mean.data(), mean.size() * sizeof(double));
        mix(std.data(), std.size() * sizeof(double));
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
        ref = buf;
    }

    json to_json() const {
        return json{{"channels", channel_names}, {"mean", mean}, {"std", std}, {"ref", ref}};
    }
    static NormStats from_json(const json& j) {
        NormStats s;
        s.channel_names = j.at("channels").get<std::vector<std::string>>();
        s.mean = j.at("mean").get<std::vector<double>>();
        s.std = j.at("std").get<std::vector<double>>();
        s.ref = j.at("ref").get<std::string>();
        return s;
    }
};

/// Global statistics over a training split. Velocity channels (index 0 and 1)
/// are centered individually but share sqrt((var_u + var_v)/2) as scale, so
/// both components are divided by the same scalar.
inline NormStats compute_norm_stats(const std::vector<Trajectory>& split) {
    if (split.empty()) throw std::invalid_argument("compute_norm_stats: empty split");
    const auto& t0 = split.front();
    int c = t0.channels();
    NormStats stats;
    stats.channel_names = t0.channel_names;
    stats.mean.assign(c, 0.0);
    stats.std.assign(c, 1.0);

    std::vector<double> sum(c, 0.0), sumsq(c, 0.0);
    size_t count = 0;
    for (const auto& traj : split) {
        if (traj.channels() != c) throw std::invalid_argument("compute_norm_stats: channel mismatch in split");
        for (const auto& s : traj.states) {
            for (int ci = 0; ci < c; ++ci) {
                const double* ch = s.channel(ci);
                for (size_t i = 0; i < s.plane(); ++i) {
                    sum[ci] += ch[i];
                    sumsq[ci] += ch[i] * ch[i];
                }
            }
            count += s.plane();
        }
    }
    std::vector<double> var(c);
    for (int ci = 0; ci < c; ++ci) {
        stats.mean[ci] = sum[ci] / static_cast<double>(count);
        var[ci] = sumsq[ci] / static_cast<double>(count) - stats.mean[ci] * stats.mean[ci];
    }
    double vel_std = std::sqrt(std::max(0.5 * (var[0] + var[1]), 0.0));
    stats.std[0] = stats.std[1] = vel_std;
    for (int ci = 2; ci < c; ++ci) stats.std[ci] = std::sqrt(std::max(var[ci], 0.0));
    for (auto& s : stats.std)
        if (s < 1e-12) s = 1.0;  // constant channel guard, keeps std > 0
    stats.compute_ref();
    return stats;
}

inline void normalize(FlowState& s, const NormStats& stats) {
    for (int ci = 0; ci < s.c; ++ci) {
        double* ch = s.channel(ci);
        double m = stats.mean[ci], inv = 1.0 / stats.std[ci];
        for (size_t i = 0; i < s.plane(); ++i) ch[i] = (ch[i] - m) * inv;
    }
}

inline void denormalize(FlowState& s, const NormStats& stats) {
    for (int ci = 0; ci < s.c; ++ci) {
        double* ch = s.channel(ci);
        double m = stats.mean[ci], sd = stats.std[ci];
        for (size_t i = 0; i < s.plane(); ++i) ch[i] = ch[i] * sd + m;
    }
}

inline void normalize(Trajectory& t, const NormStats& stats) {
    if (static_cast<int>(stats.mean.size()) != t.channels())
        throw std::invalid_argument("normalize: stats channel count mismatch");
    for (auto& s : t.states) normalize(s, stats);
    t.stats_ref = stats.ref;
}

inline void denormalize(Trajectory& t, const NormStats& stats) {
    for (auto& s : t.states) denormalize(s, stats);
    t.stats_ref.clear();
}

// ---------------------------------------------------------------------------
// Training windows
// ---------------------------------------------------------------------------

/// Conditioning states plus target state(s) sampled from one trajectory.
struct Window {
    const Trajectory* traj = nullptr;
    int start = 0;    // first conditioning index
    int k = 1;        // conditioning count
    int targets = 1;  // target count
    int stride = 1;

    int cond_index(int i) const { return start + i * stride; }
    int target_index(int i) const { return start + (k + i) * stride; }
};

/// Uniform window start over the valid range (the paper's random half-length
/// shift at sequence load collapses to a uniform start at this granularity).
inline Window sample_window(const Trajectory& traj, int k, int targets, int stride, Rng& rng) {
    if (k < 1 || targets < 1 || stride < 1) throw std::invalid_argument("sample_window: k, targets, stride must be >= 1");
    int n_states = static_cast<int>(traj.states.size());
    int span = (k + targets - 1) * stride + 1;
    if (span > n_states)
        throw std::invalid_argument("sample_window: window of " + std::to_string(k) + "+" +
                                    std::to_string(targets) + " states at stride " + std::to_string(stride) +
                                    " does not fit trajectory with " + std::to_string(n_states) + " states");
    int valid = n_states - span + 1;
    Window w;
    w.traj = &traj;
    w.start = static_cast<int>(rng.uniform_int(0, valid - 1));
    w.k = k;
    w.targets = targets;
    w.stride = stride;
    return w;
}

// ---------------------------------------------------------------------------
// .flowseq persistence (f32 payload + JSON sidecar)
// ---------------------------------------------------------------------------

namespace flowseq {

constexpr char kMagic[4] = {'F', 'S', 'E', 'Q'};
constexpr uint32_t kVersion = 1;

inline std::string sidecar_path(const std::string& path) {
    std::filesystem::path p(path);
    p.replace_extension(".json");
    return p.string();
}

inline void write(const Trajectory& traj, const std::string& path) {
    traj.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("flowseq: cannot open '" + path + "' for writing");
    os.write(kMagic, 4);
    auto pod = [&os](auto v) { os.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
    pod(kVersion);
    pod(static_cast<uint32_t>(traj.states.size()));
    pod(static_cast<uint32_t>(traj.channels()));
    pod(static_cast<uint32_t>(traj.height()));
    pod(static_cast<uint32_t>(traj.width()));
    std::vector<float> buf;
    for (const auto& s : traj.states) {
        buf.resize(s.data.size());
        for (size_t i = 0; i < s.data.size(); ++i) buf[i] = static_cast<float>(s.data[i]);
        os.write(reinterpret_cast<const char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!os) throw std::runtime_error("flowseq: write failed for '" + path + "'");

    json side;
    side["version"] = kVersion;
    side["dt"] = traj.dt;
    side["channels"] = traj.channel_names;
    side["field_channels"] = traj.field_channels;
    side["params"] = traj.params;
    side["source"] = traj.source;
    side["stats_ref"] = traj.stats_ref;
    side["seed"] = traj.seed;
    side["cylinder"] = {{"cx", traj.cylinder.cx_frac},
                        {"cy", traj.cylinder.cy_frac},
                        {"d", traj.cylinder.d_frac},
                        {"present", traj.cylinder.present}};
    if (!traj.meta.is_null()) side["meta"] = traj.meta;
    std::ofstream js(sidecar_path(path));
    js << side.dump(2) << "\n";
    if (!js) throw std::runtime_error("flowseq: sidecar write failed for '" + path + "'");
}

inline Trajectory read(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("flowseq: cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("flowseq: bad magic in '" + path + "'");
    auto pod = [&is, &path](auto& v) {
        is.read(reinterpret_cast<char*>(&v), sizeof(v));
        if (!is) throw std::runtime_error("flowseq: truncated header in '" + path + "'");
    };
    uint32_t version, count, c, h, w;
    pod(version);
    if (version != kVersion)
        throw std::runtime_error("flowseq: unsupported version " + std::to_string(version));
    pod(count);
    pod(c);
    pod(h);
    pod(w);

    Trajectory traj;
    traj.states.reserve(count);
    std::vector<float> buf(static_cast<size_t>(c) * h * w);
    for (uint32_t t = 0; t < count; ++t) {
        is.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!is) throw std::runtime_error("flowseq: truncated payload in '" + path + "' at state " +
                                          std::to_string(t));
        FlowState s(static_cast<int>(c), static_cast<int>(h), static_cast<int>(w));
        for (size_t i = 0; i < buf.size(); ++i) s.data[i] = static_cast<double>(buf[i]);
        traj.states.push_back(std::move(s));
    }

    std::ifstream js(sidecar_path(path));
    if (js) {
        json side = json::parse(js);
        traj.dt = side.value("dt", 0.05);
        traj.channel_names = side.value("channels", std::vector<std::string>{});
        traj.field_channels = side.value("field_channels", 3);
        if (side.contains("params"))
            traj.params = side["params"].get<std::map<std::string, std::vector<double>>>();
        traj.source = side.value("source", "");
        traj.stats_ref = side.value("stats_ref", "");
        traj.seed = side.value("seed", uint64_t(0));
        if (side.contains("cylinder")) {
            traj.cylinder.cx_frac = side["cylinder"].value("cx", 0.25);
            traj.cylinder.cy_frac = side["cylinder"].value("cy", 0.5);
            traj.cylinder.d_frac = side["cylinder"].value("d", 0.2);
            traj.cylinder.present = side["cylinder"].value("present", true);
        }
        if (side.contains("meta")) traj.meta = side["meta"];
    }
    return traj;
}

}  // namespace flowseq
}  // namespace acdm
