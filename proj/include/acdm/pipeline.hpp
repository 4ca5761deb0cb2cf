#pragma once

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "acdm/adam.hpp"
#include "acdm/checkpoint.hpp"
#include "acdm/config.hpp"
#include "acdm/metrics.hpp"
#include "acdm/sampler.hpp"

namespace acdm::pipeline {

namespace fs = std::filesystem;

inline const char* version_string() { return "acdm-bench 0.1.0"; }

/// Training aborted on a non-finite loss or gradient; carries the step index.
struct TrainAbort : std::runtime_error {
    TrainAbort(int step, const std::string& what)
        : std::runtime_error("training aborted at step " + std::to_string(step) + ": " + what),
          step_index(step) {}
    int step_index;
};

struct MissingArtifact : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Dataset layout
// ---------------------------------------------------------------------------

struct DatasetManifest {
    std::vector<std::string> train, test_low, test_high, var;  // file names relative to dir
    json meta;

    const std::vector<std::string>& split(const std::string& name) const {
        if (name == "train") return train;
        if (name == "test-low") return test_low;
        if (name == "test-high") return test_high;
        if (name == "var") return var;
        throw std::invalid_argument("unknown split '" + name + "'");
    }

    static DatasetManifest load(const std::string& dir) {
        std::ifstream is(fs::path(dir) / "manifest.json");
        if (!is) throw MissingArtifact("dataset manifest not found in '" + dir + "'");
        json j = json::parse(is);
        DatasetManifest m;
        m.train = j.value("train", std::vector<std::string>{});
        m.test_low = j.value("test_low", std::vector<std::string>{});
        m.test_high = j.value("test_high", std::vector<std::string>{});
        m.var = j.value("var", std::vector<std::string>{});
        m.meta = j.value("meta", json{});
        return m;
    }
};

inline NormStats load_stats(const std::string& dir) {
    std::ifstream is(fs::path(dir) / "stats.json");
    if (!is) throw MissingArtifact("normalization stats not found in '" + dir + "'");
    return NormStats::from_json(json::parse(is));
}

inline std::string re_tag(double re) {
    std::ostringstream os;
    os << "re" << std::setfill('0') << std::setw(4) << static_cast<int>(std::lround(re));
    return os.str();
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

/// Runs the solver for every configured Reynolds number, computes the
/// normalization statistics on the training split only, and writes the
/// dataset directory (flowseq files + stats.json + manifest.json).
inline void cmd_generate(const RunConfig& cfg, std::ostream& log = std::cerr) {
    fs::create_directories(cfg.data.dir);
    DatasetManifest manifest;

    struct Job {
        double re, re_end;
        std::string file;
        std::vector<std::string>* split;
    };
    std::vector<Job> jobs;
    for (double re : cfg.data.train_re)
        jobs.push_back({re, -1.0, "train_" + re_tag(re) + ".flowseq", &manifest.train});
    for (double re : cfg.data.test_low_re)
        jobs.push_back({re, -1.0, "testlow_" + re_tag(re) + ".flowseq", &manifest.test_low});
    for (double re : cfg.data.test_high_re)
        jobs.push_back({re, -1.0, "testhigh_" + re_tag(re) + ".flowseq", &manifest.test_high});
    if (cfg.data.var_sequence)
        jobs.push_back({cfg.data.var_re_start, cfg.data.var_re_end, "var_sequence.flowseq", &manifest.var});

    std::vector<Trajectory> train_trajs(cfg.data.train_re.size());
    std::atomic<size_t> next{0};
    auto worker = [&]() {
        for (size_t i = next++; i < jobs.size(); i = next++) {
            const Job& job = jobs[i];
            auto traj = generate_trajectory(cfg.sim_config(job.re, job.re_end),
                                            cfg.run.seed + i);
            flowseq::write(traj, (fs::path(cfg.data.dir) / job.file).string());
            if (job.split == &manifest.train) train_trajs[i] = std::move(traj);
            log << "[generate] " << job.file << " (" << (job.split == &manifest.train ? "train" : "test")
                << ")\n";
        }
    };
    int nthreads = std::max(1, cfg.run.jobs);
    if (nthreads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (const auto& job : jobs) job.split->push_back(job.file);

    auto stats = compute_norm_stats(train_trajs);
    {
        std::ofstream os(fs::path(cfg.data.dir) / "stats.json");
        os << stats.to_json().dump(2) << "\n";
    }
    json m;
    m["train"] = manifest.train;
    m["test_low"] = manifest.test_low;
    m["test_high"] = manifest.test_high;
    m["var"] = manifest.var;
    m["meta"] = {{"version", version_string()}, {"config", cfg.resolved}, {"stats_ref", stats.ref}};
    std::ofstream os(fs::path(cfg.data.dir) / "manifest.json");
    os << m.dump(2) << "\n";
    log << "[generate] dataset complete: " << cfg.data.dir << "\n";
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

template <class Real>
struct TrainOutput {
    Model<Real> model;
    DiffusionSchedule schedule;  // R = 0 when unused
    double final_loss = 0.0;
    NormStats stats;
};

/// Builds the backbone for the configured objective and optimizes it with
/// Adam over randomly sampled training windows. Dataset iteration order is a
/// pure function of the run seed.
template <class Real>
TrainOutput<Real> train_model(const RunConfig& cfg, std::ostream& log = std::cerr,
                              std::ostream* loss_csv = nullptr) {
    auto manifest = DatasetManifest::load(cfg.data.dir);
    auto stats = load_stats(cfg.data.dir);
    if (manifest.train.empty()) throw MissingArtifact("training split is empty");

    std::vector<Trajectory> trajs;
    for (const auto& f : manifest.train) {
        auto t = flowseq::read((fs::path(cfg.data.dir) / f).string());
        normalize(t, stats);
        trajs.push_back(std::move(t));
    }

    TrainOutput<Real> out;
    out.stats = stats;
    out.model = build_backbone<Real>(cfg.model, cfg.run.seed);
    bool needs_schedule = cfg.objective.is_diffusion();
    if (needs_schedule) out.schedule = make_schedule(cfg.objective.R);

    AdamState<Real> opt(out.model.params, static_cast<Real>(cfg.run.lr));
    Rng rng(cfg.run.seed + 1);
    const int m_targets = cfg.objective.target_steps();

    if (loss_csv) *loss_csv << "step,loss\n";
    double running = 0.0;
    for (int step = 1; step <= cfg.run.steps; ++step) {
        std::vector<Window> windows;
        windows.reserve(cfg.run.batch);
        for (int b = 0; b < cfg.run.batch; ++b) {
            const auto& traj = trajs[rng.uniform_int(0, static_cast<int64_t>(trajs.size()) - 1)];
            windows.push_back(sample_window(traj, cfg.objective.k, m_targets, 1, rng));
        }
        auto batch = make_batch<Real>(windows);
        TensorPtr<Real> loss;
        try {
            loss = objective_train_step(out.model, batch, cfg.objective,
                                        needs_schedule ? &out.schedule : nullptr, rng);
            double lv = static_cast<double>(loss->item());
            if (!std::isfinite(lv)) throw TrainAbort(step, "non-finite loss");
            backward(loss);
            opt.step();
            running = lv;
            if (loss_csv) *loss_csv << step << "," << lv << "\n";
            if (step % cfg.run.log_every == 0 || step == cfg.run.steps)
                log << "[train] step " << step << "/" << cfg.run.steps << " loss " << lv << "\n";
        } catch (const NanGradientError& e) {
            throw TrainAbort(step, e.what());
        }
    }
    out.final_loss = running;
    return out;
}

/// Full train command: optimize, then persist checkpoint, loss log and the
/// resolved config so the run is reproducible from its output directory.
template <class Real>
TrainOutput<Real> cmd_train(const RunConfig& cfg, std::ostream& log = std::cerr) {
    fs::create_directories(cfg.run.out_dir);
    std::ofstream loss_csv(fs::path(cfg.run.out_dir) / "loss.csv");
    auto out = train_model<Real>(cfg, log, &loss_csv);
    ckpt::save<Real>((fs::path(cfg.run.out_dir) / "model.acwt").string(), out.model.params);
    json run_meta = {{"version", version_string()},
                     {"config", cfg.resolved},
                     {"stats_ref", out.stats.ref},
                     {"final_loss", out.final_loss},
                     {"param_count", out.model.param_count()}};
    std::ofstream os(fs::path(cfg.run.out_dir) / "run.json");
    os << run_meta.dump(2) << "\n";
    log << "[train] checkpoint: " << (fs::path(cfg.run.out_dir) / "model.acwt").string() << "\n";
    return out;
}

// ---------------------------------------------------------------------------
// rollout
// ---------------------------------------------------------------------------

inline ObjectiveKind inference_variant(ObjectiveKind training) {
    switch (training) {
        case ObjectiveKind::acdm: return ObjectiveKind::acdm;
        case ObjectiveKind::acdm_ncn: return ObjectiveKind::acdm_ncn;
        case ObjectiveKind::refiner: return ObjectiveKind::refiner;
        default: return ObjectiveKind::next_step;  // unrolled/train-noise infer like next-step
    }
}

/// Ensemble rollout for one normalized reference sequence; returns the
/// denormalized members with parameter records rebuilt from the overwritten
/// channels.
template <class Real>
std::vector<Trajectory> rollout_sequence(const Model<Real>& model, const DiffusionSchedule* sched,
                                         const RunConfig& cfg, const Trajectory& ref_normalized,
                                         const NormStats& stats, uint64_t base_seed) {
    RolloutConfig rc;
    rc.k = cfg.objective.k;
    rc.variant = inference_variant(cfg.objective.variant);
    rc.R = cfg.objective.variant == ObjectiveKind::refiner ? cfg.objective.refiner_R : cfg.objective.R;
    rc.refiner_sigma_min = cfg.objective.refiner_sigma_min;
    rc.horizon = std::min(cfg.rollout.horizon, ref_normalized.steps() - (rc.k - 1));
    rc.ensemble_size = cfg.rollout.ensemble;
    rc.seed = base_seed;
    rc.jobs = cfg.run.jobs;
    // known parameter values per generated step, in normalized units
    int n_params = ref_normalized.channels() - ref_normalized.field_channels;
    for (int t = 0; t < rc.horizon; ++t) {
        std::vector<double> vals(n_params);
        for (int p = 0; p < n_params; ++p)
            vals[p] = ref_normalized.states[rc.k + t].channel(ref_normalized.field_channels + p)[0];
        rc.param_series.push_back(std::move(vals));
    }

    auto members = posterior_ensemble(model, ref_normalized, sched, rc);
    for (auto& m : members) {
        denormalize(m, stats);
        // params record from the expanded channels
        for (int p = 0; p < n_params; ++p) {
            std::vector<double> series;
            for (const auto& s : m.states) series.push_back(s.channel(m.field_channels + p)[0]);
            m.params[m.channel_names[m.field_channels + p]] = std::move(series);
        }
        m.meta = {{"version", version_string()}, {"stats_ref", stats.ref}, {"k", rc.k},
                  {"variant", to_string(rc.variant)}, {"config", cfg.resolved}};
    }
    return members;
}

/// Rollout command: loads a checkpoint, unrolls each sequence of the chosen
/// split and writes an ensemble of flowseq files.
template <class Real>
void cmd_rollout(const RunConfig& cfg, const std::string& checkpoint, std::ostream& log = std::cerr) {
    if (!fs::exists(checkpoint)) throw MissingArtifact("checkpoint '" + checkpoint + "' not found");
    auto manifest = DatasetManifest::load(cfg.data.dir);
    auto stats = load_stats(cfg.data.dir);

    auto model = build_backbone<Real>(cfg.model, cfg.run.seed);
    ckpt::load_into<Real>(checkpoint, model.params);
    DiffusionSchedule sched;
    const DiffusionSchedule* sched_ptr = nullptr;
    if (cfg.objective.is_diffusion()) {
        sched = make_schedule(cfg.objective.R);
        sched_ptr = &sched;
    }

    fs::path out_dir = fs::path(cfg.run.out_dir) / "rollouts";
    fs::create_directories(out_dir);
    const auto& files = manifest.split(cfg.rollout.split);
    int limit = cfg.rollout.max_sequences > 0
                    ? std::min<int>(cfg.rollout.max_sequences, static_cast<int>(files.size()))
                    : static_cast<int>(files.size());
    for (int i = 0; i < limit; ++i) {
        auto ref = flowseq::read((fs::path(cfg.data.dir) / files[i]).string());
        normalize(ref, stats);
        auto members = rollout_sequence<Real>(model, sched_ptr, cfg, ref, stats,
                                              cfg.run.seed + 977u * static_cast<uint64_t>(i));
        std::string stem = fs::path(files[i]).stem().string();
        for (size_t mi = 0; mi < members.size(); ++mi) {
            std::string name = stem + "_m" + std::to_string(mi) + ".flowseq";
            flowseq::write(members[mi], (out_dir / name).string());
        }
        log << "[rollout] " << stem << ": " << members.size() << " member(s), horizon "
            << members[0].steps() - (cfg.objective.k - 1) << "\n";
    }
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Computes the metric suite for every (sequence, member) rollout against its
/// reference, writes per-metric CSVs plus an aggregate JSON report.
inline json cmd_evaluate(const RunConfig& cfg, const std::string& pred_dir, const std::string& data_dir,
                         std::ostream& log = std::cerr) {
    auto stats = load_stats(data_dir);
    EvalReport report;

    std::vector<fs::path> pred_files;
    for (const auto& e : fs::directory_iterator(pred_dir))
        if (e.path().extension() == ".flowseq") pred_files.push_back(e.path());
    std::sort(pred_files.begin(), pred_files.end());
    if (pred_files.empty()) throw MissingArtifact("no .flowseq rollouts in '" + pred_dir + "'");

    auto want = [&](const std::string& m) {
        return std::find(cfg.eval.metrics.begin(), cfg.eval.metrics.end(), m) != cfg.eval.metrics.end();
    };

    std::map<std::string, Trajectory> ref_cache;
    for (const auto& pf : pred_files) {
        std::string stem = pf.stem().string();
        auto mpos = stem.rfind("_m");
        if (mpos == std::string::npos) continue;
        std::string ref_stem = stem.substr(0, mpos);
        int member = std::stoi(stem.substr(mpos + 2));

        auto pred = flowseq::read(pf.string());
        if (!pred.meta.is_null() && pred.meta.contains("stats_ref") &&
            pred.meta["stats_ref"].get<std::string>() != stats.ref)
            throw std::runtime_error("evaluate: rollout '" + stem +
                                     "' was produced with different normalization stats (provenance "
                                     "mismatch: " +
                                     pred.meta["stats_ref"].get<std::string>() + " vs " + stats.ref + ")");
        int k = pred.meta.is_null() ? 1 : pred.meta.value("k", 1);

        if (!ref_cache.count(ref_stem)) {
            auto ref_path = fs::path(data_dir) / (ref_stem + ".flowseq");
            if (!fs::exists(ref_path))
                throw MissingArtifact("reference '" + ref_path.string() + "' not found");
            auto ref = flowseq::read(ref_path.string());
            normalize(ref, stats);
            ref_cache.emplace(ref_stem, std::move(ref));
        }
        const auto& ref = ref_cache.at(ref_stem);
        normalize(pred, stats);

        auto mask = cylinder_mask(pred.cylinder, pred.height(), pred.width());
        auto [px, py] = default_probe(pred);
        if (cfg.eval.probe_x >= 0) px = cfg.eval.probe_x;
        if (cfg.eval.probe_y >= 0) py = cfg.eval.probe_y;

        if (want("mse")) {
            auto mse = rollout_mse(pred, ref, mask, k);
            report.add("mse", ref_stem, member, mse.per_step);
            report.add("mse_total", ref_stem, member, {mse.total});
        }
        if (want("pearson")) report.add("pearson", ref_stem, member, pearson_over_time(pred, ref, mask, k));
        if (want("rate_of_change")) {
            report.add("rate_of_change", ref_stem, member, rate_of_change(pred));
            if (member == 0) {
                Trajectory ref_cut = ref;
                ref_cut.states.resize(pred.states.size());
                report.add("rate_of_change_ref", ref_stem, 0, rate_of_change(ref_cut));
            }
        }
        if (want("temporal_spectrum")) {
            report.add("temporal_spectrum", ref_stem, member, temporal_spectrum_probe(pred, px, py, 1));
            if (member == 0) {
                Trajectory ref_cut = ref;
                ref_cut.states.resize(pred.states.size());
                report.add("temporal_spectrum_ref", ref_stem, 0,
                           temporal_spectrum_probe(ref_cut, px, py, 1));
            }
        }
        if (want("spatial_spectrum")) report.add("spatial_spectrum", ref_stem, member,
                                                 spatial_spectrum_line(pred, px, 0));
        if (want("tke")) report.add("tke", ref_stem, member, tke_spectrum(pred));
        log << "[evaluate] " << stem << "\n";
    }

    fs::create_directories(cfg.run.out_dir);
    report.write_csv(cfg.run.out_dir);
    auto agg = report.aggregate();
    json out = {{"version", version_string()}, {"metrics", agg}, {"config", cfg.resolved}};
    std::ofstream os(fs::path(cfg.run.out_dir) / "report.json");
    os << out.dump(2) << "\n";
    return out;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Comparison table across method report directories: one row per method,
/// mean and std per metric, rows ordered by method name.
inline std::string cmd_report(const std::vector<std::string>& dirs) {
    struct Row {
        std::string method;
        double mse = 0, mse_std = 0, pearson = 0, pearson_std = 0;
    };
    std::vector<Row> rows;
    for (const auto& dir : dirs) {
        std::ifstream is(fs::path(dir) / "report.json");
        if (!is) throw MissingArtifact("no report.json in '" + dir + "'");
        json j = json::parse(is);
        Row r;
        r.method = j.contains("config") && j["config"].contains("method")
                       ? j["config"]["method"].get<std::string>()
                       : fs::path(dir).filename().string();
        if (j["metrics"].contains("mse_total")) {
            r.mse = j["metrics"]["mse_total"]["overall_mean"].get<double>();
            r.mse_std = j["metrics"]["mse_total"]["overall_std"].get<double>();
        }
        if (j["metrics"].contains("pearson")) {
            r.pearson = j["metrics"]["pearson"]["overall_mean"].get<double>();
            r.pearson_std = j["metrics"]["pearson"]["overall_std"].get<double>();
        }
        rows.push_back(r);
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.method < b.method; });
    std::ostringstream os;
    os << std::left << std::setw(20) << "method" << std::right << std::setw(22) << "MSE (mean+-std)"
       << std::setw(24) << "Pearson (mean+-std)" << "\n";
    os << std::string(66, '-') << "\n";
    for (const auto& r : rows) {
        std::ostringstream mse, pea;
        mse << std::scientific << std::setprecision(2) << r.mse << " +- " << r.mse_std;
        pea << std::fixed << std::setprecision(4) << r.pearson << " +- " << r.pearson_std;
        os << std::left << std::setw(20) << r.method << std::right << std::setw(22) << mse.str()
           << std::setw(24) << pea.str() << "\n";
    }
    return os.str();
}

}  // namespace acdm::pipeline
