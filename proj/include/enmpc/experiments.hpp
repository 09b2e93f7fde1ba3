// This file is part of enmpc, a C++ library for economic nonlinear model
// predictive control with SQP/RTI solvers and offline Hessian convexification.
//
// Licensed under the MIT License <http://opensource.org/licenses/MIT>.

#ifndef ENMPC_EXPERIMENTS_HPP_
#define ENMPC_EXPERIMENTS_HPP_

#include "enmpc/plants/ev.hpp"
#include "enmpc/plants/evaporation.hpp"
#include "enmpc/rti.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <filesystem>
#include <map>
#include <mutex>
#include <thread>

namespace enmpc::experiments {

using plants::PlantBundle;
using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// certificate serialization (row-major matrices)

inline json matrix_to_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

inline Mat matrix_from_json(const json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)].get<double>();
  return m;
}

inline json certificate_to_json(const SdpCertificate& c) {
  json j;
  j["eta"] = c.eta;
  j["rho1"] = c.rho1;
  j["rho2"] = c.rho2;
  j["alpha"] = c.alpha;
  j["beta"] = c.beta;
  j["target"] = c.target;
  j["reduced_states"] = c.reduced_states;
  j["active_path"] = c.active_path;
  j["active_terminal"] = c.active_terminal;
  json scale = json::array();
  for (Eigen::Index i = 0; i < c.scale.size(); ++i) scale.push_back(c.scale[i]);
  j["scale"] = scale;
  j["H"] = matrix_to_json(c.H);
  j["Hf"] = matrix_to_json(c.Hf);
  j["A"] = matrix_to_json(c.A);
  j["B"] = matrix_to_json(c.B);
  j["C_active"] = matrix_to_json(c.C_act);
  j["D_active"] = matrix_to_json(c.D_act);
  j["dP"] = matrix_to_json(c.dP);
  j["F"] = matrix_to_json(c.F);
  j["G"] = matrix_to_json(c.G);
  j["M"] = matrix_to_json(c.M);
  j["Mf"] = matrix_to_json(c.Mf);
  j["margins"] = {{"stage_min", c.stage_min_margin},
                  {"stage_max", c.stage_max_margin},
                  {"terminal_min", c.term_min_margin},
                  {"terminal_max", c.term_max_margin}};
  return j;
}

inline SdpCertificate certificate_from_json(const json& j) {
  SdpCertificate c;
  c.eta = j.at("eta").get<int>();
  c.rho1 = j.at("rho1").get<double>();
  c.rho2 = j.at("rho2").get<double>();
  c.alpha = j.at("alpha").get<double>();
  c.beta = j.at("beta").get<double>();
  c.target = j.at("target").get<double>();
  c.reduced_states = j.at("reduced_states").get<std::vector<int>>();
  c.active_path = j.at("active_path").get<std::vector<int>>();
  c.active_terminal = j.at("active_terminal").get<std::vector<int>>();
  auto sc = j.at("scale");
  c.scale.resize(static_cast<Eigen::Index>(sc.size()));
  for (Eigen::Index i = 0; i < c.scale.size(); ++i) c.scale[i] = sc[static_cast<std::size_t>(i)].get<double>();
  c.H = matrix_from_json(j.at("H"));
  c.Hf = matrix_from_json(j.at("Hf"));
  c.A = matrix_from_json(j.at("A"));
  c.B = matrix_from_json(j.at("B"));
  c.C_act = matrix_from_json(j.at("C_active"));
  c.D_act = matrix_from_json(j.at("D_active"));
  c.dP = matrix_from_json(j.at("dP"));
  c.F = matrix_from_json(j.at("F"));
  c.G = matrix_from_json(j.at("G"));
  c.M = matrix_from_json(j.at("M"));
  c.Mf = matrix_from_json(j.at("Mf"));
  const auto& m = j.at("margins");
  c.stage_min_margin = m.at("stage_min").get<double>();
  c.stage_max_margin = m.at("stage_max").get<double>();
  c.term_min_margin = m.at("terminal_min").get<double>();
  c.term_max_margin = m.at("terminal_max").get<double>();
  return c;
}

// ---------------------------------------------------------------------------
// plant access and scenarios

inline const PlantBundle& get_plant(const std::string& name) {
  if (name == "evaporation") {
    static PlantBundle plant = plants::evaporation_plant();
    return plant;
  }
  if (name == "ev") {
    static PlantBundle plant = plants::ev_plant();
    return plant;
  }
  throw std::invalid_argument("unknown plant: " + name);
}

inline Scenario evaporation_scenario() { return Scenario::none(); }

/// §V-B closed-loop scenario: lateral reference steps to dpy at t >= 8 s
/// (previewed over the horizon), obstacle p_x <= 80 m active while the
/// predicted stage time is <= 6 s.
inline Scenario ev_scenario(double dpy, const plants::EvParams& par = {}) {
  Scenario s;
  const double t_s = par.t_s;
  const double t_step = par.ref_step_time;
  const double t_obst = par.obstacle_until;
  s.prepare = [=](TranscribedNlp& nlp, int sample) {
    Vec p(1);
    for (int k = 0; k < nlp.N(); ++k) {
      const double t = (sample + k) * t_s;
      p[0] = (t >= t_step) ? dpy : 0.0;
      nlp.set_stage_params(k, p);
      nlp.set_row_enabled(k, plants::kEvObstacleRow, t <= t_obst);
    }
    return;
  };
  s.meter_params = [=](int sample) {
    Vec p(1);
    p[0] = (sample * t_s >= t_step) ? dpy : 0.0;
    return p;
  };
  return s;
}

inline Scenario scenario_for(const PlantBundle& plant, double sweep_value) {
  if (plant.name == "ev") return ev_scenario(sweep_value);
  return evaporation_scenario();
}

inline Vec initial_state_for(const PlantBundle& plant, double sweep_value) {
  Vec x0 = plant.x0_default;
  if (plant.name == "evaporation") x0[1] += sweep_value;  // x_s + (0, dP2)
  return x0;
}

// ---------------------------------------------------------------------------
// controller registry

inline const std::vector<std::string>& controller_registry() {
  static const std::vector<std::string> names = {
      "EMPC-converged",    "EH-RTI",          "GN-RTI",
      "IH-RTI",            "SD-RTI",          "LETEMPC-converged",
      "GN-RTI-LETEMPC",    "TMPC-converged",  "GN-RTI-TMPC"};
  return names;
}

namespace detail {

inline Function quadratic_stage_cost(const PlantBundle& plant, const Mat& W) {
  const int nx = plant.ocp.nx(), nu = plant.ocp.nu();
  GraphBuilder gb;
  auto x = gb.inputs("x", nx);
  auto u = gb.inputs("u", nu);
  std::vector<Sym> p;
  if (plant.ocp.np > 0) p = gb.inputs("p", plant.ocp.np);
  std::vector<Sym> dz(nx + nu, gb.constant(0.0));
  for (int i = 0; i < nx; ++i) dz[i] = x[i] - gb.constant(plant.ss.x[i]);
  for (int i = 0; i < nu; ++i) dz[nx + i] = u[i] - gb.constant(plant.ss.u[i]);
  Sym c = gb.constant(0.0);
  for (int i = 0; i < nx + nu; ++i)
    for (int j = 0; j < nx + nu; ++j)
      if (W(i, j) != 0.0) c = c + 0.5 * W(i, j) * dz[i] * dz[j];
  return Function(gb, {c});
}

inline Function quadratic_terminal_cost(const PlantBundle& plant, const Mat& P) {
  const int nx = plant.ocp.nx();
  GraphBuilder gb;
  auto x = gb.inputs("x", nx);
  Sym c = gb.constant(0.0);
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < nx; ++j)
      if (P(i, j) != 0.0)
        c = c + 0.5 * P(i, j) * (x[i] - gb.constant(plant.ss.x[i])) *
                (x[j] - gb.constant(plant.ss.x[j]));
  return Function(gb, {c});
}

/// Tracking formulation of §V-A: 10 |x - x_s|^2 + 0.1 |u - u_s|^2, cyclic
/// coordinates excluded from the tracked set.
inline Mat tmpc_weight(const PlantBundle& plant) {
  const int nx = plant.ocp.nx(), nu = plant.ocp.nu();
  Mat W = Mat::Zero(nx + nu, nx + nu);
  for (int i = 0; i < nx; ++i) W(i, i) = 20.0;
  for (int i = 0; i < nu; ++i) W(nx + i, nx + i) = 0.2;
  for (int c : plant.sop.cyclic) W(c, c) = 0.0;
  return W;
}

/// OCP variant with a quadratic stage cost about the steady state; the
/// constraints stay those of the plant. Plants without a terminal
/// constraint get the Riccati cost-to-go of the given weights.
inline OcpSpec quadratic_ocp(const PlantBundle& plant, const Mat& W, const Mat& Mf_hint) {
  OcpSpec ocp = plant.ocp;
  ocp.stage_cost = quadratic_stage_cost(plant, W);
  if (ocp.mt() > 0) {
    // terminal equality pins x_N; terminal cost stays zero
    GraphBuilder gb;
    gb.inputs("x", ocp.nx());
    ocp.terminal_cost = Function(gb, {gb.constant(0.0)});
  } else {
    Mat P;
    if (Mf_hint.size() > 0) {
      P = Mf_hint;
    } else {
      const int nx = ocp.nx(), nu = ocp.nu();
      LqrSolution lqr = lqr_terminal(plant.lin.A, plant.lin.B, W.topLeftCorner(nx, nx),
                                     W.bottomRightCorner(nu, nu), W.topRightCorner(nx, nu));
      P = lqr.P;
    }
    ocp.terminal_cost = quadratic_terminal_cost(plant, P);
  }
  return ocp;
}

}  // namespace detail

/// Builds a named controller over the plant. The initialization is the
/// steady-state embedding: economic formulations carry the steady duals,
/// quadratic formulations start from zero duals (their steady multipliers).
inline RtiController make_controller(const std::string& name, const PlantBundle& plant,
                                     double tol = 1e-8) {
  const OcpSpec& eco = plant.ocp;
  const Mat& M = plant.convex.M;
  const Mat& Mf = plant.convex.Mf;

  auto steady_z = [&](const OcpSpec& spec, bool zero_duals) {
    NlpIterate z = plant.steady_iterate(spec);
    if (zero_duals) {
      z.lambda.setZero();
      z.mu.setZero();
      if (spec.mt() > 0) z.nu.setZero();
    }
    return z;
  };
  auto make = [&](const OcpSpec& spec, HessianStrategy strat, bool converged, bool zero_duals) {
    NlpIterate z0 = steady_z(spec, zero_duals);
    Vec lam_fill = zero_duals ? Vec::Zero(spec.nx()) : plant.ss.lambda;
    Vec mu_fill = zero_duals ? Vec::Zero(spec.mh()) : plant.ss.mu;
    return RtiController(spec, std::move(strat), std::move(z0), plant.ss.u, lam_fill, mu_fill,
                         converged, tol);
  };

  if (name == "EMPC-converged")
    return make(eco, HessianStrategy::gauss_newton(M, Mf), true, false);
  if (name == "EH-RTI") return make(eco, HessianStrategy::exact_regularized(), false, false);
  if (name == "GN-RTI") return make(eco, HessianStrategy::gauss_newton(M, Mf), false, false);
  if (name == "IH-RTI")
    return make(eco, HessianStrategy::fixed_indefinite(plant.H, plant.Hf), false, false);
  if (name == "SD-RTI") return make(eco, HessianStrategy::identity(), false, false);

  if (name == "LETEMPC-converged" || name == "GN-RTI-LETEMPC") {
    OcpSpec let = detail::quadratic_ocp(plant, M, Mf);
    return make(let, HessianStrategy::gauss_newton(M, Mf), name == "LETEMPC-converged", true);
  }
  if (name == "TMPC-converged" || name == "GN-RTI-TMPC") {
    Mat Wt = detail::tmpc_weight(plant);
    OcpSpec tmpc = detail::quadratic_ocp(plant, Wt, Mat());
    Mat Mft = Mat::Zero(plant.ocp.nx(), plant.ocp.nx());
    if (tmpc.mt() == 0) {
      // match the strategy's terminal block to the synthesized cost-to-go
      Mft = tmpc.terminal_cost.weighted_hessian(plant.ss.x, Vec::Ones(1));
    } else {
      Mft = Mat::Identity(plant.ocp.nx(), plant.ocp.nx());
    }
    return make(tmpc, HessianStrategy::gauss_newton(Wt, Mft), name == "TMPC-converged", true);
  }
  throw std::invalid_argument("unknown controller: " + name);
}

// ---------------------------------------------------------------------------
// artificial rotation pair (§V-A iterate-identity studies)

struct RotationPair {
  OcpSpec original;  // artificial economic problem
  OcpSpec rotated;   // = rotate(original, storage): the tracking formulation
  StorageFunction storage;
};

/// Un-rotates the tracking formulation l_bar = 10|x-x_s|^2 + 0.1|u-u_s|^2
/// with storage Lambda = 100|x-x_s|^2 into an artificial economic problem,
/// then rotates it back; the pair satisfies rotated = rotate(original,
/// Lambda) by construction.
inline RotationPair artificial_rotation_pair(const PlantBundle& evap) {
  const int nx = evap.ocp.nx();
  OcpSpec tracking = evap.ocp;
  {
    Mat W = Mat::Zero(nx + evap.ocp.nu(), nx + evap.ocp.nu());
    for (int i = 0; i < nx; ++i) W(i, i) = 20.0;
    for (int i = 0; i < evap.ocp.nu(); ++i) W(nx + i, nx + i) = 0.2;
    tracking.stage_cost = detail::quadratic_stage_cost(evap, W);
  }
  StorageFunction storage;
  {
    GraphBuilder gb;
    auto x = gb.inputs("x", nx);
    Sym v = gb.constant(0.0);
    for (int i = 0; i < nx; ++i) v = v + 100.0 * sq(x[i] - gb.constant(evap.ss.x[i]));
    storage = StorageFunction::make(Function(gb, {v}), evap.ss.x);
  }
  RotationPair pair;
  pair.storage = storage;
  pair.original = rotate(tracking, negate(storage));
  pair.rotated = rotate(pair.original, storage);
  return pair;
}

// ---------------------------------------------------------------------------
// experiment configuration and sweeps

struct ExperimentConfig {
  std::string plant{"evaporation"};
  std::vector<std::string> controllers;  // empty: full registry
  std::string sweep_var{"dP2"};
  std::vector<double> grid;
  int n_sim{-1};       // -1: plant default
  double tol{1e-8};
  std::string out_dir{"out"};
  unsigned seed{0};     // reserved; all runs are deterministic
  bool write_traces{true};
  int threads{0};       // 0: hardware concurrency
};

struct SweepPointResult {
  double value{0.0};
  double J_cl{0.0};
  double delta_J{0.0};
  bool diverged{false};
  ClosedLoopTrace trace;
};

struct SweepResult {
  ExperimentConfig cfg;
  // controller name -> per-grid-point results (grid order)
  std::map<std::string, std::vector<SweepPointResult>> results;

  json summary_json() const {
    json j;
    j["plant"] = cfg.plant;
    j["sweep"] = cfg.sweep_var;
    json ctrls;
    for (const auto& [name, pts] : results) {
      json list = json::array();
      for (const auto& p : pts) {
        json entry = json::array();
        entry.push_back(p.value);
        if (p.diverged) entry.push_back("diverged");
        else entry.push_back(p.delta_J);
        list.push_back(entry);
      }
      ctrls[name] = list;
    }
    j["controllers"] = ctrls;
    return j;
  }
};

/// Runs one closed loop of a named controller at a sweep value.
inline ClosedLoopTrace run_closed_loop(const PlantBundle& plant, const std::string& controller,
                                       double sweep_value, int n_sim, double tol = 1e-8) {
  RtiController ctrl = make_controller(controller, plant, tol);
  Scenario scenario = scenario_for(plant, sweep_value);
  Vec x0 = initial_state_for(plant, sweep_value);
  auto meter = [&](const Vec& x, const Vec& u, const Vec& p) {
    return plant.unshifted_cost(x, u, p);
  };
  return simulate_closed_loop(plant.ocp.dynamics, ctrl, scenario, x0, n_sim, plant.t_s, meter);
}

/// Full sweep: all (controller, grid point) pairs, dispatched to a worker
/// pool; the baseline (converged EMPC) is computed per grid point and the
/// performance-loss metric uses the plant's unshifted steady cost.
inline SweepResult run_sweep(const ExperimentConfig& cfg_in) {
  ExperimentConfig cfg = cfg_in;
  const PlantBundle& plant = get_plant(cfg.plant);
  if (cfg.controllers.empty()) cfg.controllers = controller_registry();
  if (cfg.n_sim < 0) cfg.n_sim = plant.n_sim_default;

  struct Job {
    std::string controller;
    int grid_index;
  };
  std::vector<Job> jobs;
  for (const auto& c : cfg.controllers)
    for (std::size_t g = 0; g < cfg.grid.size(); ++g) jobs.push_back({c, static_cast<int>(g)});

  std::vector<ClosedLoopTrace> traces(jobs.size());
  std::atomic<std::size_t> next{0};
  const unsigned n_threads = cfg.threads > 0
                                 ? static_cast<unsigned>(cfg.threads)
                                 : std::max(1u, std::thread::hardware_concurrency());
  auto worker = [&]() {
    while (true) {
      std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) break;
      traces[i] =
          run_closed_loop(plant, jobs[i].controller, cfg.grid[jobs[i].grid_index], cfg.n_sim,
                          cfg.tol);
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 0; t + 1 < n_threads && t + 1 < jobs.size(); ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();

  // baseline per grid point: converged EMPC (computed above if in the set,
  // else on demand)
  std::vector<ClosedLoopTrace> baseline(cfg.grid.size());
  for (std::size_t g = 0; g < cfg.grid.size(); ++g) {
    bool found = false;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      if (jobs[i].controller == "EMPC-converged" && jobs[i].grid_index == static_cast<int>(g)) {
        baseline[g] = traces[i];
        found = true;
        break;
      }
    }
    if (!found)
      baseline[g] = run_closed_loop(plant, "EMPC-converged", cfg.grid[g], cfg.n_sim, cfg.tol);
  }

  SweepResult out;
  out.cfg = cfg;
  for (const auto& c : cfg.controllers) out.results[c] = {};
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    SweepPointResult r;
    r.value = cfg.grid[jobs[i].grid_index];
    r.J_cl = traces[i].J_cl;
    r.diverged = traces[i].diverged;
    r.delta_J =
        performance_loss(traces[i], baseline[jobs[i].grid_index], plant.ss.cost_offset);
    r.trace = traces[i];
    out.results[jobs[i].controller].push_back(r);
  }
  return out;
}

inline void write_sweep_outputs(const SweepResult& sweep) {
  namespace fs = std::filesystem;
  fs::create_directories(sweep.cfg.out_dir);
  {
    std::ofstream os(sweep.cfg.out_dir + "/sweep_summary.json");
    os << sweep.summary_json().dump(2) << "\n";
  }
  if (sweep.cfg.write_traces) {
    for (const auto& [name, pts] : sweep.results) {
      for (const auto& p : pts) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%g", p.value);
        p.trace.write_csv(sweep.cfg.out_dir + "/trace_" + name + "_" + buf + ".csv");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// figure presets

/// SQP convergence comparison on the evaporation disturbance instance:
/// exact, Gauss-Newton-like, and identity Hessians, full steps, recorded
/// per iteration.
inline void run_fig1(const std::string& out_dir, double x2_hat = 35.0) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const PlantBundle& plant = get_plant("evaporation");
  Vec x0(2);
  x0 << x2_hat, plant.ss.x[1];
  struct Entry {
    const char* file;
    HessianStrategy strat;
    int max_iter;
  };
  std::vector<Entry> entries;
  entries.push_back({"fig1_exact.csv", HessianStrategy::exact(), 100});
  entries.push_back(
      {"fig1_gn.csv", HessianStrategy::gauss_newton(plant.convex.M, plant.convex.Mf), 100});
  entries.push_back({"fig1_identity.csv", HessianStrategy::identity(), 500});
  for (auto& e : entries) {
    TranscribedNlp nlp(plant.ocp, x0);
    NlpIterate z0 = plant.steady_iterate();
    SqpOptions opt;
    opt.tol = 1e-8;
    opt.max_iter = e.max_iter;
    opt.step_rule = StepRule::FullStep;
    SqpResult res = sqp_solve(nlp, e.strat, z0, opt);
    res.trace.write_csv(out_dir + "/" + e.file);
  }
}

/// Iterate comparison between the artificial economic problem and its
/// rotation under the exact Hessian (the observable consequence of the
/// rotated-dual analysis).
inline void run_fig2(const std::string& out_dir, int n_iter = 25) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const PlantBundle& plant = get_plant("evaporation");
  RotationPair pair = artificial_rotation_pair(plant);
  Vec x0(2);
  x0 << 35.0, plant.ss.x[1];
  TranscribedNlp nlp_a(pair.original, x0);
  TranscribedNlp nlp_b(pair.rotated, x0);
  NlpIterate z0 = plant.steady_iterate();
  z0.lambda.setZero();
  z0.mu.setZero();
  z0.nu.setZero();
  IterateComparison cmp =
      compare_iterates(nlp_a, nlp_b, HessianStrategy::exact(), z0, z0, n_iter);
  std::ofstream os(out_dir + "/fig2_rotation.csv");
  os << "iteration,kkt_original,kkt_rotated,primal_gap,dual_gap\n";
  char buf[160];
  for (int i = 0; i < cmp.completed; ++i) {
    double ka = nlp_a.kkt_residual(cmp.iterates_a[i]).inf_norm;
    double kb = nlp_b.kkt_residual(cmp.iterates_b[i]).inf_norm;
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g\n", i + 1, ka, kb,
                  cmp.primal_gap[i], cmp.dual_gap[i]);
    os << buf;
  }
}

/// Closed-loop performance-loss sweep on the evaporation process,
/// x0 = x_s + (0, dP2), dP2 in [0, 10].
inline ExperimentConfig fig3_config(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.plant = "evaporation";
  cfg.sweep_var = "dP2";
  for (int i = 0; i <= 10; ++i) cfg.grid.push_back(static_cast<double>(i));
  cfg.out_dir = out_dir;
  return cfg;
}

/// Closed-loop sweep on the energy-optimal driving benchmark over the
/// lateral reference step dpy in [0, 3] m.
inline ExperimentConfig fig4_config(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.plant = "ev";
  cfg.sweep_var = "dpy_ref";
  for (int i = 0; i <= 6; ++i) cfg.grid.push_back(0.5 * i);
  cfg.out_dir = out_dir;
  return cfg;
}

}  // namespace enmpc::experiments

#endif  // ENMPC_EXPERIMENTS_HPP_
