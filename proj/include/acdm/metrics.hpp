#pragma once

#include <algorithm>
#include <complex>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "acdm/fft.hpp"
#include "acdm/flow_data.hpp"

namespace acdm {

// ---------------------------------------------------------------------------
// Probe placement
// ---------------------------------------------------------------------------

/// Point probe one cylinder diameter downstream from the back end of the
/// cylinder, on the centerline. Returns (x, y) cell indices.
inline std::pair<int, int> default_probe(const Trajectory& traj) {
    int h = traj.height(), w = traj.width();
    double lx = static_cast<double>(w) / h;
    const auto& g = traj.cylinder;
    double x = g.present ? (g.cx_frac * lx + 1.5 * g.d_frac) : 0.75 * lx;
    double y = g.present ? g.cy_frac : 0.5;
    int px = std::clamp(static_cast<int>(x * h), 0, w - 1);
    int py = std::clamp(static_cast<int>(y * h), 0, h - 1);
    return {px, py};
}

// ---------------------------------------------------------------------------
// Error metrics
// ---------------------------------------------------------------------------

struct MseResult {
    double total = 0.0;                // averaged over the temporal rollout
    std::vector<double> per_step;      // one value per compared step
};

/// Masked MSE per step (mean over channels and unmasked cells), averaged over
/// the rollout. `start` skips the shared conditioning states at the head.
inline MseResult rollout_mse(const Trajectory& pred, const Trajectory& ref,
                             const std::vector<double>& mask, int start = 0) {
    size_t steps = std::min(pred.states.size(), ref.states.size());
    if (static_cast<size_t>(start) >= steps)
        throw std::invalid_argument("rollout_mse: no overlapping states beyond start");
    MseResult out;
    for (size_t t = start; t < steps; ++t) {
        const auto& p = pred.states[t];
        const auto& r = ref.states[t];
        if (p.c != r.c || p.h != r.h || p.w != r.w)
            throw std::invalid_argument("rollout_mse: state shape mismatch at step " + std::to_string(t));
        double acc = 0;
        size_t count = 0;
        for (int c = 0; c < p.c; ++c) {
            const double* pc = p.channel(c);
            const double* rc = r.channel(c);
            for (size_t i = 0; i < p.plane(); ++i) {
                if (!mask.empty() && mask[i] == 0.0) continue;
                double d = pc[i] - rc[i];
                acc += d * d;
                ++count;
            }
        }
        out.per_step.push_back(acc / static_cast<double>(count));
    }
    out.total = std::accumulate(out.per_step.begin(), out.per_step.end(), 0.0) /
                static_cast<double>(out.per_step.size());
    return out;
}

/// Pearson correlation between prediction and reference per time step, over
/// all channels and unmasked cells. Constant fields yield the 0.0 sentinel.
inline std::vector<double> pearson_over_time(const Trajectory& pred, const Trajectory& ref,
                                             const std::vector<double>& mask = {}, int start = 0) {
    size_t steps = std::min(pred.states.size(), ref.states.size());
    std::vector<double> series;
    for (size_t t = start; t < steps; ++t) {
        const auto& p = pred.states[t];
        const auto& r = ref.states[t];
        double sp = 0, sr = 0, spp = 0, srr = 0, spr = 0;
        size_t n = 0;
        for (int c = 0; c < p.c; ++c) {
            const double* pc = p.channel(c);
            const double* rc = r.channel(c);
            for (size_t i = 0; i < p.plane(); ++i) {
                if (!mask.empty() && mask[i] == 0.0) continue;
                sp += pc[i];
                sr += rc[i];
                spp += pc[i] * pc[i];
                srr += rc[i] * rc[i];
                spr += pc[i] * rc[i];
                ++n;
            }
        }
        double vp = spp - sp * sp / n, vr = srr - sr * sr / n;
        double cov = spr - sp * sr / n;
        series.push_back(vp <= 1e-300 || vr <= 1e-300 ? 0.0 : cov / std::sqrt(vp * vr));
    }
    return series;
}

/// Stability metric: ||(s^t - s^{t-1}) / dt||_1 per normalized step (dt = 1),
/// i.e. the mean absolute per-cell change over all channels.
inline std::vector<double> rate_of_change(const Trajectory& traj) {
    std::vector<double> series;
    for (size_t t = 1; t < traj.states.size(); ++t) {
        const auto& a = traj.states[t - 1];
        const auto& b = traj.states[t];
        double acc = 0;
        for (size_t i = 0; i < a.data.size(); ++i) acc += std::abs(b.data[i] - a.data[i]);
        series.push_back(acc / static_cast<double>(a.data.size()));
    }
    return series;
}

// ---------------------------------------------------------------------------
// Spectra
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> power_of_series(std::vector<double> s, bool hann) {
    const size_t n = s.size();
    double mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(n);
    for (auto& v : s) v -= mean;
    if (hann && n > 1)
        for (size_t t = 0; t < n; ++t)
            s[t] *= 0.5 * (1.0 - std::cos(2.0 * M_PI * t / static_cast<double>(n - 1)));
    std::vector<std::complex<double>> in(n), out(n);
    for (size_t i = 0; i < n; ++i) in[i] = s[i];
    fft::dft_1d(static_cast<int>(n), in.data(), out.data());
    std::vector<double> power(n / 2 + 1);
    for (size_t k = 0; k < power.size(); ++k) power[k] = std::norm(out[k]);
    return power;
}

}  // namespace detail

/// Hann-windowed power spectrum of the channel value at a point probe over
/// time. Bin k corresponds to k / T cycles per stored step.
inline std::vector<double> temporal_spectrum_probe(const Trajectory& traj, int px, int py, int channel) {
    std::vector<double> series;
    series.reserve(traj.states.size());
    for (const auto& s : traj.states) series.push_back(s.at(channel, py, px));
    return detail::power_of_series(std::move(series), true);
}

/// Time-averaged power spectrum of a channel along the vertical line x = px.
inline std::vector<double> spatial_spectrum_line(const Trajectory& traj, int px, int channel) {
    int h = traj.height();
    std::vector<double> avg;
    for (const auto& s : traj.states) {
        std::vector<double> line(h);
        for (int y = 0; y < h; ++y) line[y] = s.at(channel, y, px);
        auto p = detail::power_of_series(std::move(line), false);
        if (avg.empty()) avg.assign(p.size(), 0.0);
        for (size_t i = 0; i < p.size(); ++i) avg[i] += p[i];
    }
    for (auto& v : avg) v /= static_cast<double>(traj.states.size());
    return avg;
}

/// Turbulent kinetic energy per integer wavenumber magnitude: velocity
/// fluctuations (time mean removed per cell), 0.5*(|u_k|^2 + |v_k|^2) with
/// the 1/(HW) DFT normalization, binned by round(|k|) and averaged over time.
/// Parseval: the bin sum equals 0.5 * mean(u'^2 + v'^2).
inline std::vector<double> tke_spectrum(const Trajectory& traj) {
    int h = traj.height(), w = traj.width();
    size_t plane = static_cast<size_t>(h) * w;
    size_t steps = traj.states.size();

    std::vector<double> umean(plane, 0.0), vmean(plane, 0.0);
    for (const auto& s : traj.states)
        for (size_t i = 0; i < plane; ++i) {
            umean[i] += s.channel(0)[i];
            vmean[i] += s.channel(1)[i];
        }
    for (size_t i = 0; i < plane; ++i) {
        umean[i] /= static_cast<double>(steps);
        vmean[i] /= static_cast<double>(steps);
    }

    int kmax = static_cast<int>(std::round(std::hypot(h / 2.0, w / 2.0))) + 1;
    std::vector<double> bins(kmax + 1, 0.0);
    std::vector<std::complex<double>> buf(plane), spec(plane);
    const double norm = 1.0 / (static_cast<double>(h) * w * static_cast<double>(h) * w);
    for (const auto& s : traj.states) {
        for (int comp = 0; comp < 2; ++comp) {
            const double* ch = s.channel(comp);
            const double* mean = comp == 0 ? umean.data() : vmean.data();
            for (size_t i = 0; i < plane; ++i) buf[i] = ch[i] - mean[i];
            fft::dft_2d(h, w, buf.data(), spec.data());
            for (int ky = 0; ky < h; ++ky)
                for (int kx = 0; kx < w; ++kx) {
                    int sy = ky <= h / 2 ? ky : ky - h;
                    int sx = kx <= w / 2 ? kx : kx - w;
                    int bin = static_cast<int>(std::round(std::hypot(sy, sx)));
                    bins[bin] += 0.5 * std::norm(spec[static_cast<size_t>(ky) * w + kx]) * norm;
                }
        }
    }
    for (auto& b : bins) b /= static_cast<double>(steps);
    return bins;
}

/// Central-difference vorticity dv/dx - du/dy, one-sided at the boundary.
/// `h` is the physical cell size.
inline std::vector<double> vorticity(const FlowState& s, double h) {
    int H = s.h, W = s.w;
    std::vector<double> out(static_cast<size_t>(H) * W);
    const double* u = s.channel(0);
    const double* v = s.channel(1);
    auto at = [&](const double* f, int y, int x) { return f[static_cast<size_t>(y) * W + x]; };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double dvdx = x == 0       ? (at(v, y, 1) - at(v, y, 0)) / h
                          : x == W - 1 ? (at(v, y, W - 1) - at(v, y, W - 2)) / h
                                       : (at(v, y, x + 1) - at(v, y, x - 1)) / (2 * h);
            double dudy = y == 0       ? (at(u, 1, x) - at(u, 0, x)) / h
                          : y == H - 1 ? (at(u, H - 1, x) - at(u, H - 2, x)) / h
                                       : (at(u, y + 1, x) - at(u, y - 1, x)) / (2 * h);
            out[static_cast<size_t>(y) * W + x] = dvdx - dudy;
        }
    return out;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// Per-metric, per-member series with mean / std / 5th-95th percentile
/// aggregation. CSV: one file per metric with (run, member, step-or-bin, value).
struct EvalReport {
    struct Series {
        std::string run;
        int member = 0;
        std::vector<double> values;
    };
    std::map<std::string, std::vector<Series>> metrics;

    void add(const std::string& metric, const std::string& run, int member, std::vector<double> values) {
        metrics[metric].push_back({run, member, std::move(values)});
    }

    static double percentile(std::vector<double> v, double p) {
        if (v.empty()) return 0.0;
        std::sort(v.begin(), v.end());
        double idx = p * (v.size() - 1);
        size_t lo = static_cast<size_t>(idx);
        size_t hi = std::min(lo + 1, v.size() - 1);
        double f = idx - lo;
        return v[lo] * (1 - f) + v[hi] * f;
    }

    /// Aggregation across members/runs, per position and overall.
    json aggregate() const {
        json out;
        for (const auto& [name, series] : metrics) {
            size_t len = 0;
            for (const auto& s : series) len = std::max(len, s.values.size());
            std::vector<double> mean(len, 0), stddev(len, 0), p5(len, 0), p95(len, 0);
            for (size_t i = 0; i < len; ++i) {
                std::vector<double> vals;
                for (const auto& s : series)
                    if (i < s.values.size()) vals.push_back(s.values[i]);
                double m = std::accumulate(vals.begin(), vals.end(), 0.0) / vals.size();
                double var = 0;
                for (double v : vals) var += (v - m) * (v - m);
                mean[i] = m;
                stddev[i] = vals.size() > 1 ? std::sqrt(var / vals.size()) : 0.0;
                p5[i] = percentile(vals, 0.05);
                p95[i] = percentile(vals, 0.95);
            }
            double overall = mean.empty() ? 0.0
                                          : std::accumulate(mean.begin(), mean.end(), 0.0) / mean.size();
            double overall_std = 0;
            {
                std::vector<double> per_series;
                for (const auto& s : series)
                    if (!s.values.empty())
                        per_series.push_back(std::accumulate(s.values.begin(), s.values.end(), 0.0) /
                                             s.values.size());
                double m = std::accumulate(per_series.begin(), per_series.end(), 0.0) / per_series.size();
                for (double v : per_series) overall_std += (v - m) * (v - m);
                overall_std = per_series.size() > 1 ? std::sqrt(overall_std / per_series.size()) : 0.0;
            }
            out[name] = {{"mean", mean},     {"std", stddev}, {"p5", p5},
                         {"p95", p95},       {"overall_mean", overall},
                         {"overall_std", overall_std}, {"series_count", series.size()}};
        }
        return out;
    }

    void write_csv(const std::string& dir) const {
        std::filesystem::create_directories(dir);
        for (const auto& [name, series] : metrics) {
            std::ofstream os(std::filesystem::path(dir) / (name + ".csv"));
            os << "run,member,step_or_bin,value\n";
            for (const auto& s : series)
                for (size_t i = 0; i < s.values.size(); ++i)
                    os << s.run << "," << s.member << "," << i << "," << s.values[i] << "\n";
        }
    }

    void write_json(const std::string& path) const {
        std::ofstream os(path);
        os << aggregate().dump(2) << "\n";
    }
};

}  // namespace acdm
