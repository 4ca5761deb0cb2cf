#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <stdexcept>
#include <vector>

#include "acdm/flow_data.hpp"

namespace acdm {

struct SolverError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Configuration of the incompressible wake-flow generator. The domain is
/// [0, nx/ny] x [0, 1] with square cells of size 1/ny; flow runs along +x.
struct SimConfig {
    int nx = 128, ny = 64;  // nx = 2*ny
    double dt = 0.05;
    double reynolds = 300.0;
    double reynolds_end = -1.0;  // < 0: constant; else linear ramp over the exported range
    CylinderGeom cylinder;       // center fractions + diameter fraction of the short axis
    double freestream = 0.5;
    int warmup_steps = 20;   // modulated inflow profile
    int total_steps = 1300;  // simulated steps
    int discard_steps = 300; // steps dropped before export starts
    int export_stride = 2;
    double cg_tol = 1e-6;
    int cg_max_iter = 4000;
    uint64_t seed = 0;

    void validate() const {
        if (reynolds <= 0) throw std::invalid_argument("SimConfig: reynolds must be > 0");
        if (reynolds_end > 0 && reynolds_end <= 0) throw std::invalid_argument("SimConfig: bad reynolds_end");
        if (dt <= 0) throw std::invalid_argument("SimConfig: dt must be > 0");
        if (nx != 2 * ny) throw std::invalid_argument("SimConfig: grid must satisfy nx = 2*ny");
        if (cylinder.present && (cylinder.d_frac <= 0 || cylinder.d_frac >= 0.5))
            throw std::invalid_argument("SimConfig: cylinder diameter fraction must be in (0, 0.5)");
        if (total_steps <= discard_steps) throw std::invalid_argument("SimConfig: total_steps <= discard_steps");
        if (export_stride < 1) throw std::invalid_argument("SimConfig: export_stride must be >= 1");
    }

    double viscosity() const { return freestream * cylinder.d_frac / reynolds; }
    double domain_lx() const { return static_cast<double>(nx) / ny; }
};

/// Staggered-grid solver state: u on x-faces, v on y-faces, pressure at cell
/// centers, binary obstacle mask at cell centers (1 = fluid).
struct SolverState {
    int nx = 0, ny = 0;
    double h = 0;
    std::vector<double> u;       // (nx+1) * ny
    std::vector<double> v;       // nx * (ny+1)
    std::vector<double> p;       // nx * ny
    std::vector<uint8_t> fluid;  // nx * ny

    double& U(int i, int j) { return u[static_cast<size_t>(j) * (nx + 1) + i]; }
    double U(int i, int j) const { return u[static_cast<size_t>(j) * (nx + 1) + i]; }
    double& V(int i, int j) { return v[static_cast<size_t>(j) * nx + i]; }
    double V(int i, int j) const { return v[static_cast<size_t>(j) * nx + i]; }
    double& P(int i, int j) { return p[static_cast<size_t>(j) * nx + i]; }
    double P(int i, int j) const { return p[static_cast<size_t>(j) * nx + i]; }
    bool is_fluid(int i, int j) const { return fluid[static_cast<size_t>(j) * nx + i] != 0; }

    double max_speed() const {
        double m = 0;
        for (double x : u) m = std::max(m, std::abs(x));
        for (double x : v) m = std::max(m, std::abs(x));
        return m;
    }

    double kinetic_energy() const {
        double e = 0;
        for (double x : u) e += x * x;
        for (double x : v) e += x * x;
        return 0.5 * e;
    }
};

namespace cg {

/// Plain conjugate gradients on an SPD operator. Returns iterations used;
/// residual_history (L2 norms) is appended per iteration.
inline int solve(const std::function<void(const std::vector<double>&, std::vector<double>&)>& apply,
                 const std::vector<double>& b, std::vector<double>& x, double tol, int max_iter,
                 std::vector<double>* residual_history = nullptr) {
    size_t n = b.size();
    x.assign(n, 0.0);
    std::vector<double> r = b, p = b, ap(n);
    double rr = 0;
    for (double ri : r) rr += ri * ri;
    double b2 = std::sqrt(rr);
    if (b2 == 0.0) return 0;
    double threshold = tol * b2;
    for (int it = 1; it <= max_iter; ++it) {
        apply(p, ap);
        double pap = 0;
        for (size_t i = 0; i < n; ++i) pap += p[i] * ap[i];
        if (pap <= 0) throw SolverError("cg: operator not positive definite (p^T A p = " + std::to_string(pap) + ")");
        double alpha = rr / pap;
        for (size_t i = 0; i < n; ++i) {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        double rr_new = 0;
        for (double ri : r) rr_new += ri * ri;
        double rnorm = std::sqrt(rr_new);
        if (residual_history) residual_history->push_back(rnorm);
        if (rnorm <= threshold) return it;
        double beta = rr_new / rr;
        rr = rr_new;
        for (size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
    }
    std::string hist;
    if (residual_history) {
        size_t start = residual_history->size() > 6 ? residual_history->size() - 6 : 0;
        for (size_t i = start; i < residual_history->size(); ++i)
            hist += (hist.empty() ? "" : ", ") + std::to_string((*residual_history)[i]);
    }
    throw SolverError("cg: no convergence in " + std::to_string(max_iter) +
                      " iterations; residual tail [" + hist + "]");
}

}  // namespace cg

/// Incompressible 2D solver: MacCormack advection, explicit diffusion to
/// enforce the Reynolds number, CG pressure projection. Deterministic; the
/// config seed is provenance only.
class FluidSolver {
public:
    explicit FluidSolver(const SimConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        s_.nx = cfg_.nx;
        s_.ny = cfg_.ny;
        s_.h = 1.0 / cfg_.ny;
        s_.u.assign(static_cast<size_t>(cfg_.nx + 1) * cfg_.ny, cfg_.freestream);
        s_.v.assign(static_cast<size_t>(cfg_.nx) * (cfg_.ny + 1), 0.0);
        s_.p.assign(static_cast<size_t>(cfg_.nx) * cfg_.ny, 0.0);
        build_mask();
        build_pressure_system();
        apply_boundaries();
    }

    const SimConfig& config() const { return cfg_; }
    SolverState& state() { return s_; }
    const SolverState& state() const { return s_; }
    int step_index() const { return step_; }
    double last_divergence() const { return last_div_; }
    double worst_divergence_ratio() const { return worst_div_ratio_; }
    int cfl_warnings() const { return cfl_warnings_; }

    /// One time step: advect -> diffuse -> project -> boundaries.
    void step() {
        ++step_;
        double re = current_reynolds();
        advect_maccormack(cfg_.dt);
        apply_boundaries();
        diffuse_explicit(cfg_.dt, re, cfg_.cylinder.d_frac, cfg_.freestream);
        apply_boundaries();
        project_pressure_cg(cfg_.cg_tol, cfg_.cg_max_iter);
        apply_boundaries();
        double m = s_.max_speed();
        if (!std::isfinite(m)) throw SolverError("solver: non-finite velocity at step " + std::to_string(step_));
        if (m > 100.0 * std::max(cfg_.freestream, 1e-6))
            throw SolverError("solver: divergence blowup at step " + std::to_string(step_) +
                              " (max speed " + std::to_string(m) + ")");
    }

    /// Predictor-corrector semi-Lagrangian advection with clamping to the
    /// interpolation stencil extrema. Unconditionally stable; warns once when
    /// the CFL number exceeds 1.
    void advect_maccormack(double dt) {
        for (double x : s_.u)
            if (std::isnan(x)) throw SolverError("advect: NaN velocity at step " + std::to_string(step_));
        for (double x : s_.v)
            if (std::isnan(x)) throw SolverError("advect: NaN velocity at step " + std::to_string(step_));
        double cfl = s_.max_speed() * dt / s_.h;
        if (cfl > 1.0 && cfl_warnings_++ == 0)
            std::cerr << "[fluid-sim] warning: CFL " << cfl << " > 1 (semi-Lagrangian advection stays stable)\n";

        const int nx = s_.nx, ny = s_.ny;
        std::vector<double> u1(s_.u.size()), v1(s_.v.size());
        std::vector<double> ulo(s_.u.size()), uhi(s_.u.size()), vlo(s_.v.size()), vhi(s_.v.size());

        // Pass 1: backward trace.
        for (int j = 0; j < ny; ++j)
            for (int i = 0; i <= nx; ++i) {
                double x = i * s_.h, y = (j + 0.5) * s_.h;
                double vel_u = s_.U(i, j), vel_v = sample_v(x, y);
                double mn, mx;
                u1[uidx(i, j)] = sample_u(x - dt * vel_u, y - dt * vel_v, &mn, &mx);
                ulo[uidx(i, j)] = mn;
                uhi[uidx(i, j)] = mx;
            }
        for (int j = 0; j <= ny; ++j)
            for (int i = 0; i < nx; ++i) {
                double x = (i + 0.5) * s_.h, y = j * s_.h;
                double vel_u = sample_u(x, y), vel_v = s_.V(i, j);
                double mn, mx;
                v1[vidx(i, j)] = sample_v(x - dt * vel_u, y - dt * vel_v, &mn, &mx);
                vlo[vidx(i, j)] = mn;
                vhi[vidx(i, j)] = mx;
            }

        // Pass 2: forward trace of the predictor, then corrected and clamped update.
        std::vector<double> u2(s_.u.size()), v2(s_.v.size());
        for (int j = 0; j < ny; ++j)
            for (int i = 0; i <= nx; ++i) {
                double x = i * s_.h, y = (j + 0.5) * s_.h;
                double vel_u = s_.U(i, j), vel_v = sample_v(x, y);
                u2[uidx(i, j)] = sample_grid(u1, nx + 1, ny, 0.0, 0.5, (x + dt * vel_u), (y + dt * vel_v));
            }
        for (int j = 0; j <= ny; ++j)
            for (int i = 0; i < nx; ++i) {
                double x = (i + 0.5) * s_.h, y = j * s_.h;
                double vel_u = sample_u(x, y), vel_v = s_.V(i, j);
                v2[vidx(i, j)] = sample_grid(v1, nx, ny + 1, 0.5, 0.0, (x + dt * vel_u), (y + dt * vel_v));
            }
        for (size_t idx = 0; idx < s_.u.size(); ++idx) {
            double val = u1[idx] + 0.5 * (s_.u[idx] - u2[idx]);
            s_.u[idx] = std::clamp(val, ulo[idx], uhi[idx]);
        }
        for (size_t idx = 0; idx < s_.v.size(); ++idx) {
            double val = v1[idx] + 0.5 * (s_.v[idx] - v2[idx]);
            s_.v[idx] = std::clamp(val, vlo[idx], vhi[idx]);
        }
    }

    /// One explicit Laplacian step per velocity component with nu derived
    /// from the Reynolds number: nu = speed * diameter / Re.
    void diffuse_explicit(double dt, double reynolds, double diameter_frac, double speed) {
        double nu = speed * diameter_frac / reynolds;
        double lam = nu * dt / (s_.h * s_.h);
        if (lam > 0.25)
            throw SolverError("diffuse: explicit stability bound violated (nu*dt/h^2 = " +
                              std::to_string(lam) + " > 0.25); reduce dt below " +
                              std::to_string(0.25 * s_.h * s_.h / nu));
        const int nx = s_.nx, ny = s_.ny;
        std::vector<double> un = s_.u, vn = s_.v;
        auto uat = [&](int i, int j) {
            i = std::clamp(i, 0, nx);
            j = std::clamp(j, 0, ny - 1);  // zero-gradient wall ghost
            return s_.U(i, j);
        };
        auto vat = [&](int i, int j) {
            i = std::clamp(i, 0, nx - 1);
            j = std::clamp(j, 0, ny);
            return s_.V(i, j);
        };
        for (int j = 0; j < ny; ++j)
            for (int i = 1; i < nx; ++i)
                un[uidx(i, j)] = s_.U(i, j) + lam * (uat(i + 1, j) + uat(i - 1, j) + uat(i, j + 1) +
                                                     uat(i, j - 1) - 4.0 * s_.U(i, j));
        for (int j = 1; j < ny; ++j)
            for (int i = 0; i < nx; ++i)
                vn[vidx(i, j)] = s_.V(i, j) + lam * (vat(i + 1, j) + vat(i - 1, j) + vat(i, j + 1) +
                                                     vat(i, j - 1) - 4.0 * s_.V(i, j));
        s_.u.swap(un);
        s_.v.swap(vn);
    }

    /// Pressure Poisson solve (plain CG, matrix-free) and velocity correction.
    /// Neumann at walls/inflow/cylinder, Dirichlet zero at the outflow.
    void project_pressure_cg(double tol, int max_iter) {
        const int nx = s_.nx, ny = s_.ny;
        const double inv_h = 1.0 / s_.h;
        std::vector<double> b(cells_.size());
        for (size_t c = 0; c < cells_.size(); ++c) {
            auto [i, j] = cells_[c];
            double div = (s_.U(i + 1, j) - s_.U(i, j) + s_.V(i, j + 1) - s_.V(i, j)) * inv_h;
            b[c] = -div / cfg_.dt;
        }
        std::vector<double> x;
        std::vector<double> hist;
        cg::solve([this](const std::vector<double>& in, std::vector<double>& out) { apply_poisson(in, out); },
                  b, x, tol, max_iter, &hist);
        // scatter pressure and correct fluid-fluid faces (ghost p = 0 beyond the outflow)
        std::fill(s_.p.begin(), s_.p.end(), 0.0);
        for (size_t c = 0; c < cells_.size(); ++c) s_.p[cell_flat(cells_[c])] = x[c];
        for (int j = 0; j < ny; ++j)
            for (int i = 1; i < nx; ++i)
                if (s_.is_fluid(i - 1, j) && s_.is_fluid(i, j))
                    s_.U(i, j) -= cfg_.dt * (s_.P(i, j) - s_.P(i - 1, j)) * inv_h;
        for (int j = 0; j < ny; ++j)
            if (s_.is_fluid(nx - 1, j)) s_.U(nx, j) -= cfg_.dt * (0.0 - s_.P(nx - 1, j)) * inv_h;
        for (int j = 1; j < ny; ++j)
            for (int i = 0; i < nx; ++i)
                if (s_.is_fluid(i, j - 1) && s_.is_fluid(i, j))
                    s_.V(i, j) -= cfg_.dt * (s_.P(i, j) - s_.P(i, j - 1)) * inv_h;

        // divergence audit
        double max_div = 0;
        for (auto [i, j] : cells_) {
            double div = (s_.U(i + 1, j) - s_.U(i, j) + s_.V(i, j + 1) - s_.V(i, j)) * inv_h;
            max_div = std::max(max_div, std::abs(div));
        }
        last_div_ = max_div;
        double speed = s_.max_speed();
        if (speed > 0) worst_div_ratio_ = std::max(worst_div_ratio_, max_div * s_.h / speed);
    }

    /// Inflow/outflow/wall conditions plus zero velocity on every face
    /// touching an obstacle cell.
    void apply_boundaries() {
        const int nx = s_.nx, ny = s_.ny;
        for (int j = 0; j < ny; ++j) {
            s_.U(0, j) = inflow_profile(j);
            s_.U(nx, j) = s_.U(nx - 1, j);  // zero-gradient outflow
        }
        for (int i = 0; i < nx; ++i) {
            s_.V(i, 0) = 0.0;
            s_.V(i, ny) = 0.0;
        }
        for (int j = 0; j < ny; ++j)
            for (int i = 1; i < nx; ++i)
                if (!s_.is_fluid(i - 1, j) || !s_.is_fluid(i, j)) s_.U(i, j) = 0.0;
        for (int j = 1; j < ny; ++j)
            for (int i = 0; i < nx; ++i)
                if (!s_.is_fluid(i, j - 1) || !s_.is_fluid(i, j)) s_.V(i, j) = 0.0;
    }

    /// Reynolds number in effect at the current step (supports the linear
    /// ramp used by the time-varying test sequence).
    double current_reynolds() const {
        if (cfg_.reynolds_end <= 0) return cfg_.reynolds;
        double frac = 0.0;
        if (step_ > cfg_.discard_steps)
            frac = static_cast<double>(step_ - cfg_.discard_steps) /
                   static_cast<double>(cfg_.total_steps - cfg_.discard_steps);
        frac = std::clamp(frac, 0.0, 1.0);
        return cfg_.reynolds + (cfg_.reynolds_end - cfg_.reynolds) * frac;
    }

    /// Collocated export: cell-centered velocity, pressure, expanded Reynolds channel.
    FlowState export_state() const {
        FlowState f(4, s_.ny, s_.nx);
        double re = current_reynolds();
        for (int j = 0; j < s_.ny; ++j)
            for (int i = 0; i < s_.nx; ++i) {
                f.at(0, j, i) = 0.5 * (s_.U(i, j) + s_.U(i + 1, j));
                f.at(1, j, i) = 0.5 * (s_.V(i, j) + s_.V(i, j + 1));
                f.at(2, j, i) = s_.P(i, j);
                f.at(3, j, i) = re;
            }
        return f;
    }

private:
    size_t uidx(int i, int j) const { return static_cast<size_t>(j) * (s_.nx + 1) + i; }
    size_t vidx(int i, int j) const { return static_cast<size_t>(j) * s_.nx + i; }
    size_t cell_flat(std::pair<int, int> c) const { return static_cast<size_t>(c.second) * s_.nx + c.first; }

    double inflow_profile(int j) const {
        if (step_ < cfg_.warmup_steps) {
            double yhat = (j + 0.5) / static_cast<double>(s_.ny);  // normalized cross-stream coordinate
            return cfg_.freestream * (std::cos(M_PI * yhat) + 1.0);
        }
        return cfg_.freestream;
    }

    // clamped bilinear interpolation on a shifted grid; optional stencil extrema
    double sample_grid(const std::vector<double>& g, int gw, int gh, double off_x, double off_y,
                       double x, double y, double* mn = nullptr, double* mx = nullptr) const {
        double gx = x / s_.h - off_x;
        double gy = y / s_.h - off_y;
        gx = std::clamp(gx, 0.0, static_cast<double>(gw - 1));
        gy = std::clamp(gy, 0.0, static_cast<double>(gh - 1));
        int i0 = std::min(static_cast<int>(gx), gw - 2 >= 0 ? gw - 2 : 0);
        int j0 = std::min(static_cast<int>(gy), gh - 2 >= 0 ? gh - 2 : 0);
        int i1 = std::min(i0 + 1, gw - 1), j1 = std::min(j0 + 1, gh - 1);
        double fx = gx - i0, fy = gy - j0;
        double a = g[static_cast<size_t>(j0) * gw + i0], b = g[static_cast<size_t>(j0) * gw + i1];
        double c = g[static_cast<size_t>(j1) * gw + i0], d = g[static_cast<size_t>(j1) * gw + i1];
        if (mn) *mn = std::min({a, b, c, d});
        if (mx) *mx = std::max({a, b, c, d});
        return a * (1 - fx) * (1 - fy) + b * fx * (1 - fy) + c * (1 - fx) * fy + d * fx * fy;
    }

    double sample_u(double x, double y, double* mn = nullptr, double* mx = nullptr) const {
        return sample_grid(s_.u, s_.nx + 1, s_.ny, 0.0, 0.5, x, y, mn, mx);
    }
    double sample_v(double x, double y, double* mn = nullptr, double* mx = nullptr) const {
        return sample_grid(s_.v, s_.nx, s_.ny + 1, 0.5, 0.0, x, y, mn, mx);
    }

    void build_mask() {
        s_.fluid.assign(static_cast<size_t>(s_.nx) * s_.ny, 1);
        if (!cfg_.cylinder.present) return;
        auto mask = cylinder_mask(cfg_.cylinder, s_.ny, s_.nx);
        for (size_t i = 0; i < mask.size(); ++i) s_.fluid[i] = mask[i] > 0.5 ? 1 : 0;
    }

    // Compact fluid-cell indexing for the Poisson operator. Neumann edges are
    // dropped terms; the outflow contributes a Dirichlet (ghost 0) diagonal.
    void build_pressure_system() {
        const int nx = s_.nx, ny = s_.ny;
        cell_id_.assign(static_cast<size_t>(nx) * ny, -1);
        cells_.clear();
        for (int j = 0; j < ny; ++j)
            for (int i = 0; i < nx; ++i)
                if (s_.is_fluid(i, j)) {
                    cell_id_[static_cast<size_t>(j) * nx + i] = static_cast<int>(cells_.size());
                    cells_.emplace_back(i, j);
                }
        nbr_.assign(cells_.size() * 4, -1);
        diag_.assign(cells_.size(), 0.0);
        const double w = 1.0 / (s_.h * s_.h);
        for (size_t c = 0; c < cells_.size(); ++c) {
            auto [i, j] = cells_[c];
            double diag = 0;
            const int di[4] = {-1, 1, 0, 0};
            const int dj[4] = {0, 0, -1, 1};
            for (int d = 0; d < 4; ++d) {
                int ni = i + di[d], nj = j + dj[d];
                if (ni < 0 || nj < 0 || nj >= ny) continue;  // inflow / walls: Neumann
                if (ni >= nx) {                              // outflow: Dirichlet ghost
                    diag += w;
                    continue;
                }
                int id = cell_id_[static_cast<size_t>(nj) * nx + ni];
                if (id < 0) continue;  // cylinder: Neumann
                nbr_[c * 4 + d] = id;
                diag += w;
            }
            diag_[c] = diag;
        }
    }

    void apply_poisson(const std::vector<double>& in, std::vector<double>& out) const {
        const double w = 1.0 / (s_.h * s_.h);
        for (size_t c = 0; c < cells_.size(); ++c) {
            double acc = diag_[c] * in[c];
            for (int d = 0; d < 4; ++d) {
                int id = nbr_[c * 4 + d];
                if (id >= 0) acc -= w * in[id];
            }
            out[c] = acc;
        }
    }

    SimConfig cfg_;
    SolverState s_;
    std::vector<std::pair<int, int>> cells_;
    std::vector<int> cell_id_;
    std::vector<int> nbr_;
    std::vector<double> diag_;
    int step_ = 0;
    double last_div_ = 0.0;
    double worst_div_ratio_ = 0.0;
    int cfl_warnings_ = 0;
};

/// Runs the configured simulation and exports the post-warmup trajectory:
/// collocated velocity + pressure + expanded Reynolds channel at the export
/// stride. Deterministic; two calls with equal config and seed are identical.
inline Trajectory generate_trajectory(const SimConfig& cfg, uint64_t seed) {
    FluidSolver solver(cfg);
    Trajectory traj;
    traj.dt = cfg.dt * cfg.export_stride;
    traj.channel_names = {"velocity-x", "velocity-y", "pressure", "reynolds"};
    traj.field_channels = 3;
    traj.cylinder = cfg.cylinder;
    traj.seed = seed;
    traj.source = "solver";
    traj.params["reynolds"] = {};
    traj.meta = json{{"grid", {cfg.nx, cfg.ny}},
                     {"dt_sim", cfg.dt},
                     {"reynolds", cfg.reynolds},
                     {"reynolds_end", cfg.reynolds_end},
                     {"freestream", cfg.freestream},
                     {"warmup_steps", cfg.warmup_steps},
                     {"total_steps", cfg.total_steps},
                     {"discard_steps", cfg.discard_steps},
                     {"export_stride", cfg.export_stride},
                     {"cylinder_d", cfg.cylinder.d_frac},
                     {"seed", seed}};

    for (int step = 0; step < cfg.total_steps; ++step) {
        solver.step();
        int since = step + 1 - cfg.discard_steps;
        if (since >= 0 && since % cfg.export_stride == 0) {
            traj.states.push_back(solver.export_state());
            traj.params["reynolds"].push_back(solver.current_reynolds());
        }
    }
    if (traj.states.size() < 2) throw SolverError("generate_trajectory: fewer than two exported states");
    return traj;
}

}  // namespace acdm
