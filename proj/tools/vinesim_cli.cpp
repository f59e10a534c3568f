// Command-line front end: rollouts, benchmarks, stiffness tables and
// parameter fitting, all emitting plot-ready CSV/JSON plus a run manifest.
//
// Exit codes: 0 success, 2 input error, 3 engine error, 4 insufficient
// data, 5 optimization divergence.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vinesim/engine.hpp"
#include "vinesim/fit.hpp"
#include "vinesim/geometry.hpp"
#include "vinesim/rng.hpp"

namespace {

using namespace vinesim;

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitEngine = 3;
constexpr int kExitInsufficientData = 4;
constexpr int kExitDivergence = 5;

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

/// Collects the provenance of one command run and writes <out>.manifest.json,
/// also on failure.
class ManifestWriter {
public:
  ManifestWriter(std::string command, const std::string& out_path)
      : path_(out_path + ".manifest.json"), start_ms_(now_ms()) {
    j_["command"] = std::move(command);
    j_["inputs"] = nlohmann::json::object();
    j_["outputs"] = nlohmann::json::array();
  }

  void config(nlohmann::json cfg) { j_["config"] = std::move(cfg); }
  void seed(std::uint64_t s) { j_["seed"] = s; }

  void input(const std::string& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) {
      j_["inputs"][file] = nullptr;
      return;
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string bytes = buf.str();
    char hex[32];
    std::snprintf(hex, sizeof(hex), "fnv1a:%016llx",
                  static_cast<unsigned long long>(fnv1a(bytes.data(), bytes.size())));
    j_["inputs"][file] = hex;
  }

  void output(const std::string& file) { j_["outputs"].push_back(file); }

  void finish(int exit_code, const std::string& error = "") {
    j_["status"] = exit_code == 0 ? "ok" : "failed";
    j_["exit_code"] = exit_code;
    if (!error.empty()) j_["error"] = error;
    j_["timings_ms"] = {{"total", now_ms() - start_ms_}};
    std::ofstream out(path_);
    if (out) out << j_.dump(2) << "\n";
  }

private:
  nlohmann::json j_;
  std::string path_;
  double start_ms_;
};

int resolve_workers(int flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("VINESIM_WORKERS")) {
    const int w = std::atoi(env);
    if (w > 0) return w;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

PhysParams default_bench_params() {
  PhysParams p;
  p.mass_kg = 0.05;
  p.inertia_kgm2 = 1e-4;
  p.damping_nms = 0.005;
  p.growth_mps = 0.2;
  p.collision_radius_m = 0.025;
  p.dt_s = 0.01;
  p.stiffness = LinearStiffnessParams{Eigen::VectorXd::Constant(1, 0.1)};
  return p;
}

std::vector<VineState> sample_initial_states(const Scene& scene, double d_segment, int batch,
                                             int max_links, std::uint64_t seed, double launch_lo,
                                             double launch_hi) {
  const RngSplitter splitter(seed);
  std::vector<VineState> initials;
  initials.reserve(static_cast<std::size_t>(batch));
  for (int trial = 0; trial < batch; ++trial) {
    auto rng = splitter.stream("launch", static_cast<std::uint64_t>(trial));
    std::uniform_real_distribution<double> angle(launch_lo, launch_hi);
    Eigen::Vector3d base = scene.base_pose;
    base.z() += angle(rng);
    initials.push_back(make_initial_state(base, d_segment, 2, 0.5 * d_segment, max_links));
  }
  return initials;
}

int cmd_rollout(const std::string& scene_path, const std::string& params_path, int steps,
                int batch, std::uint64_t seed, const std::string& out, int workers,
                int max_links, int record_every, double launch_lo, double launch_hi) {
  ManifestWriter manifest("rollout", out);
  manifest.seed(seed);
  manifest.config({{"steps", steps},
                   {"batch", batch},
                   {"workers", workers},
                   {"max_links", max_links},
                   {"record_every", record_every},
                   {"launch_range", {launch_lo, launch_hi}},
                   {"scene", scene_path},
                   {"params", params_path}});
  manifest.input(scene_path);
  manifest.input(params_path);
  try {
    const Scene scene = load_scene(scene_path);
    const PhysParams params = load_params(params_path);
    const double d_segment = 2.0 * params.collision_radius_m;

    RolloutConfig cfg;
    cfg.steps = steps;
    cfg.batch = batch;
    cfg.seed = seed;
    cfg.record_every = record_every;
    cfg.workers = workers;
    cfg.max_links = max_links;

    const auto initials =
        sample_initial_states(scene, d_segment, batch, max_links, seed, launch_lo, launch_hi);
    const auto trajectories = rollout_batch(initials, params, scene, cfg);

    for (std::size_t i = 0; i < trajectories.size(); ++i) {
      if (!trajectories[i].failed) continue;
      const std::string dump_path = out + ".qpdump.json";
      std::ofstream dump(dump_path);
      dump << trajectories[i].error_dump;
      manifest.output(dump_path);
      std::ostringstream msg;
      msg << "trial " << i << " failed at step " << trajectories[i].failed_step << ": "
          << trajectories[i].error << " (dump: " << dump_path << ")";
      std::cerr << msg.str() << "\n";
      manifest.finish(kExitEngine, msg.str());
      return kExitEngine;
    }

    write_trajectory_csv(out, trajectories);
    manifest.output(out);
    manifest.finish(kExitOk);
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "rollout: " << e.what() << "\n";
    manifest.finish(kExitInput, e.what());
    return kExitInput;
  }
}

int cmd_bench(const std::vector<int>& max_links, const std::vector<int>& batches, int steps,
              const std::string& out, std::uint64_t seed, int workers,
              const std::string& params_path) {
  ManifestWriter manifest("bench", out);
  manifest.seed(seed);
  manifest.config({{"max_links", max_links},
                   {"batch", batches},
                   {"steps", steps},
                   {"workers", workers},
                   {"params", params_path}});
  if (!params_path.empty()) manifest.input(params_path);
  try {
    const PhysParams params =
        params_path.empty() ? default_bench_params() : load_params(params_path);
    const Scene scene = make_cluttered_scene();
    const double d_segment = 2.0 * params.collision_radius_m;

    std::string csv = "max_links,batch,mean_ms_per_iteration,ms_per_iteration_per_element\n";
    char row[160];
    for (int links : max_links) {
      for (int batch : batches) {
        double total = 0.0;
        for (std::uint64_t s = 0; s < 5; ++s) {  // averaged over 5 rollouts
          RolloutConfig cfg;
          cfg.steps = steps;
          cfg.workers = workers;
          cfg.max_links = links;
          cfg.record_every = steps;  // benchmark: keep recording cost negligible
          const auto initials = sample_initial_states(scene, d_segment, batch, links,
                                                      seed + s, -M_PI / 4, M_PI / 4);
          BatchTiming timing;
          rollout_batch(initials, params, scene, cfg, &timing);
          total += timing.ms_per_iteration;
        }
        const double mean_iter = total / 5.0;
        std::snprintf(row, sizeof(row), "%d,%d,%.6g,%.6g\n", links, batch, mean_iter,
                      mean_iter / batch);
        csv += row;
      }
    }
    std::ofstream f(out);
    if (!f) throw std::invalid_argument("cannot write benchmark csv: " + out);
    f << csv;
    manifest.output(out);
    manifest.finish(kExitOk);
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "bench: " << e.what() << "\n";
    manifest.finish(kExitInput, e.what());
    return kExitInput;
  }
}

int cmd_stiffness_table(double pressure, double radius, std::vector<double> eps_list,
                        const std::vector<double>& eps_poly, const std::string& out) {
  ManifestWriter manifest("stiffness-table", out);
  manifest.config({{"pressure_pa", pressure},
                   {"tube_radius_m", radius},
                   {"eps", eps_list},
                   {"eps_poly", eps_poly}});
  try {
    if (!eps_poly.empty()) {
      if (eps_poly.size() != 4)
        throw std::invalid_argument("eps polynomial needs exactly 4 coefficients");
      const std::array<double, 4> poly = {eps_poly[0], eps_poly[1], eps_poly[2], eps_poly[3]};
      eps_list.push_back(eps_from_pressure(pressure, poly, {0.0, 1e12}).value);
    }
    if (eps_list.empty()) throw std::invalid_argument("no eps values given");
    for (double eps : eps_list) {
      if (!(eps > 0.0 && eps < 1.0))
        throw std::invalid_argument("eps_crit must lie in (0, 1)");
    }
    if (!(pressure > 0.0 && radius > 0.0))
      throw std::invalid_argument("pressure and radius must be positive");

    const double full = M_PI * pressure * radius * radius * radius;
    std::string csv = "eps_crit,theta_rad,gamma0_rad,moment_ratio\n";
    char row[160];
    constexpr int kGrid = 1000;
    for (double eps : eps_list) {
      for (int i = 0; i < kGrid; ++i) {
        const double theta = M_PI * i / (kGrid - 1);
        const double gamma0 = wrinkle_angle(theta, eps);
        const double ratio =
            wrinkling_moment_eval(theta, eps, pressure, radius).moment / full;
        std::snprintf(row, sizeof(row), "%.17g,%.17g,%.17g,%.17g\n", eps, theta, gamma0, ratio);
        csv += row;
      }
    }
    std::ofstream f(out);
    if (!f) throw std::invalid_argument("cannot write stiffness table: " + out);
    f << csv;
    manifest.output(out);
    manifest.finish(kExitOk);
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "stiffness-table: " << e.what() << "\n";
    manifest.finish(kExitInput, e.what());
    return kExitInput;
  }
}

int cmd_fit_epsilon(const std::string& moments_path, double radius, const std::string& out) {
  ManifestWriter manifest("fit-epsilon", out);
  manifest.config({{"moments", moments_path}, {"tube_radius_m", radius}});
  manifest.input(moments_path);
  try {
    const MomentDataset dataset = load_moment_csv(moments_path);
    dataset.validate();

    nlohmann::json j;
    auto table = nlohmann::json::array();
    auto failed = nlohmann::json::array();
    std::vector<std::pair<double, double>> pairs;
    for (double pressure : dataset.pressures()) {
      try {
        const double eps = fit_eps_crit(dataset.group(pressure), radius);
        table.push_back({{"pressure_pa", pressure}, {"eps_crit", eps}});
        pairs.emplace_back(pressure, eps);
      } catch (const UninformativeDataError& e) {
        failed.push_back({{"pressure_pa", pressure}, {"reason", e.what()}});
      }
    }
    j["per_pressure"] = table;
    j["failed_pressures"] = failed;

    const bool enough = pairs.size() >= 4;
    if (enough) {
      const PolyFit poly = fit_eps_polynomial(pairs);
      j["eps_poly"] = poly.coeffs;
      j["poly_residual_norm"] = poly.residual_norm;
    }
    std::ofstream f(out);
    if (!f) throw std::invalid_argument("cannot write eps report: " + out);
    f << j.dump(2) << "\n";
    manifest.output(out);
    manifest.finish(enough ? kExitOk : kExitInsufficientData,
                    enough ? "" : "fewer than 4 informative pressure groups");
    return enough ? kExitOk : kExitInsufficientData;
  } catch (const std::exception& e) {
    std::cerr << "fit-epsilon: " << e.what() << "\n";
    manifest.finish(kExitInput, e.what());
    return kExitInput;
  }
}

struct FitCliOptions {
  double lr_physical = 1e-2;
  double lr_neural = 1e-3;
  double lr_velocity = 1e-2;
  double weight_decay = 1e-4;
  int divergence_patience = 50;
};

int cmd_fit(const std::string& manifest_path, const std::string& model, int iters,
            const std::string& out, const std::string& init_params_path,
            const std::string& params_out, const std::string& fit_set,
            const std::string& velocity_mode, std::uint64_t seed, int workers,
            const FitCliOptions& opt) {
  ManifestWriter manifest("fit", out);
  manifest.seed(seed);
  manifest.config({{"manifest", manifest_path},
                   {"model", model},
                   {"iters", iters},
                   {"init_params", init_params_path},
                   {"fit", fit_set},
                   {"velocities", velocity_mode},
                   {"workers", workers}});
  manifest.input(manifest_path);
  if (!init_params_path.empty()) manifest.input(init_params_path);
  try {
    if (model != "linear" && model != "mlp" && model != "wrinkling")
      throw std::invalid_argument("unknown model name: " + model);

    const TrajectoryDataset dataset = load_trajectory_dataset(manifest_path);

    PhysParams initial;
    if (!init_params_path.empty()) {
      initial = load_params(init_params_path);
      if (stiffness_model_name(initial.stiffness) != model)
        throw std::invalid_argument("initial params use model '" +
                                    stiffness_model_name(initial.stiffness) +
                                    "' but --model is '" + model + "'");
    } else {
      initial = default_bench_params();
      initial.collision_radius_m = 0.5 * dataset.link_spacing_m;
      if (model == "wrinkling") {
        WrinklingParams w;
        w.pressure_pa = 2000.0;
        w.tube_radius_m = 0.02;
        w.eps_override = 0.1;
        initial.pressure_pa = w.pressure_pa;
        initial.tube_radius_m = w.tube_radius_m;
        initial.stiffness = w;
      } else if (model == "mlp") {
        NeuralStiffnessParams mlp;
        auto rng = RngSplitter(seed).stream("mlp-init");
        std::normal_distribution<double> g(0.0, 0.3);
        for (int i = 0; i < mlp.kHidden; ++i) {
          mlp.w1[i] = g(rng);
          mlp.b1[i] = g(rng);
          mlp.w2[i] = g(rng);
        }
        mlp.b2 = 0.0;
        initial.stiffness = mlp;
      }
    }

    FitConfig cfg;
    cfg.iterations = iters;
    cfg.workers = workers;
    cfg.seed = seed;
    cfg.lr_physical = opt.lr_physical;
    cfg.lr_neural = opt.lr_neural;
    cfg.lr_velocity = opt.lr_velocity;
    cfg.weight_decay_neural = opt.weight_decay;
    cfg.divergence_patience = opt.divergence_patience;
    cfg.velocity_mode = velocity_mode == "free" ? FitConfig::VelocityMode::free
                                                : FitConfig::VelocityMode::finite_difference;
    cfg.fit_mass = fit_set.find("mass") != std::string::npos;
    cfg.fit_inertia = fit_set.find("inertia") != std::string::npos;
    cfg.fit_damping = fit_set.find("damping") != std::string::npos;
    cfg.fit_growth = fit_set.find("growth") != std::string::npos;
    cfg.fit_stiffness = fit_set.find("stiffness") != std::string::npos;

    const FitReport report = fit_parameters(dataset, initial, cfg);

    std::ofstream f(out);
    if (!f) throw std::invalid_argument("cannot write fit report: " + out);
    f << fit_report_to_json(report).dump(2) << "\n";
    manifest.output(out);

    const std::string fitted_path = params_out.empty() ? out + ".params.json" : params_out;
    save_params(report.params, fitted_path);
    manifest.output(fitted_path);

    if (report.diverged) {
      std::cerr << "fit: optimization diverged (report written)\n";
      manifest.finish(kExitDivergence, "optimization diverged");
      return kExitDivergence;
    }
    manifest.finish(kExitOk);
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "fit: " << e.what() << "\n";
    manifest.finish(kExitInput, e.what());
    return kExitInput;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable 2-D vine robot simulator"};
  app.require_subcommand(1);

  // rollout
  auto* rollout = app.add_subcommand("rollout", "Batched rollouts to a trajectory CSV");
  std::string scene_path, params_path, out_path;
  int steps = 100, batch = 1, workers = 0, max_links = 40, record_every = 1;
  std::uint64_t seed = 0;
  double launch_lo = -M_PI / 4, launch_hi = M_PI / 4;
  rollout->add_option("--scene", scene_path, "Scene JSON file")->required();
  rollout->add_option("--params", params_path, "Physical parameters JSON file")->required();
  rollout->add_option("--steps", steps, "Time steps per rollout");
  rollout->add_option("--batch", batch, "Number of independent robots");
  rollout->add_option("--seed", seed, "Root seed for the launch-angle streams");
  rollout->add_option("--out", out_path, "Output CSV path")->required();
  rollout->add_option("--workers", workers, "Worker threads (0 = auto)");
  rollout->add_option("--max-links", max_links, "Link capacity per robot");
  rollout->add_option("--record-every", record_every, "Snapshot stride");
  rollout->add_option("--launch-lo", launch_lo, "Launch angle lower bound (rad)");
  rollout->add_option("--launch-hi", launch_hi, "Launch angle upper bound (rad)");

  // bench
  auto* bench = app.add_subcommand("bench", "Timing grid over max links x batch");
  std::vector<int> bench_links{10, 20, 40};
  std::vector<int> bench_batches{1, 8, 64};
  int bench_steps = 100;
  std::string bench_out, bench_params;
  std::uint64_t bench_seed = 0;
  int bench_workers = 0;
  bench->add_option("--max-links", bench_links, "Link capacities to benchmark");
  bench->add_option("--batch", bench_batches, "Batch sizes to benchmark");
  bench->add_option("--steps", bench_steps, "Time steps per rollout");
  bench->add_option("--out", bench_out, "Output CSV path")->required();
  bench->add_option("--seed", bench_seed, "Root seed");
  bench->add_option("--workers", bench_workers, "Worker threads (0 = auto)");
  bench->add_option("--params", bench_params, "Optional parameters JSON file");

  // stiffness-table
  auto* table = app.add_subcommand("stiffness-table", "Wrinkling moment curves CSV");
  double table_pressure = 1.0, table_radius = 1.0;
  std::vector<double> table_eps, table_poly;
  std::string table_out;
  table->add_option("--pressure", table_pressure, "Pressure (Pa)");
  table->add_option("--radius", table_radius, "Tube radius (m)");
  table->add_option("--eps", table_eps, "eps_crit values");
  table->add_option("--eps-poly", table_poly, "Cubic eps(P) coefficients (4 values)");
  table->add_option("--out", table_out, "Output CSV path")->required();

  // fit-epsilon
  auto* fite = app.add_subcommand("fit-epsilon", "Per-pressure eps_crit fit + cubic");
  std::string moments_path, fite_out;
  double fite_radius = 0.0;
  fite->add_option("--moments", moments_path, "Moment measurements CSV")->required();
  fite->add_option("--radius", fite_radius, "Tube radius (m)")->required();
  fite->add_option("--out", fite_out, "Output JSON path")->required();

  // fit
  auto* fit = app.add_subcommand("fit", "Fit simulator parameters to trajectories");
  std::string fit_manifest, fit_model = "linear", fit_out, fit_init, fit_params_out;
  std::string fit_set = "mass,inertia,damping,growth,stiffness";
  std::string fit_velocities = "fd";
  int fit_iters = 2000, fit_workers = 0;
  std::uint64_t fit_seed = 0;
  fit->add_option("--manifest", fit_manifest, "Dataset manifest JSON")->required();
  fit->add_option("--model", fit_model, "Stiffness model: linear|mlp|wrinkling");
  fit->add_option("--iters", fit_iters, "Optimizer iterations");
  fit->add_option("--out", fit_out, "Fit report JSON path")->required();
  fit->add_option("--init-params", fit_init, "Initial parameters JSON file");
  fit->add_option("--params-out", fit_params_out, "Fitted parameters JSON path");
  fit->add_option("--fit", fit_set, "Comma list of parameters to optimize");
  fit->add_option("--velocities", fit_velocities, "Per-frame velocities: fd|free");
  fit->add_option("--seed", fit_seed, "Root seed");
  fit->add_option("--workers", fit_workers, "Worker threads (0 = auto)");
  FitCliOptions fit_opt;
  fit->add_option("--lr-physical", fit_opt.lr_physical, "Learning rate for physical scalars");
  fit->add_option("--lr-neural", fit_opt.lr_neural, "Learning rate for MLP weights");
  fit->add_option("--lr-velocity", fit_opt.lr_velocity, "Learning rate for free velocities");
  fit->add_option("--weight-decay", fit_opt.weight_decay, "Decoupled decay on MLP weights");
  fit->add_option("--divergence-patience", fit_opt.divergence_patience,
                  "Consecutive blown-up iterations before aborting");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return kExitInput;
  }

  if (rollout->parsed()) {
    return cmd_rollout(scene_path, params_path, steps, batch, seed, out_path,
                       resolve_workers(workers), max_links, record_every, launch_lo, launch_hi);
  }
  if (bench->parsed()) {
    return cmd_bench(bench_links, bench_batches, bench_steps, bench_out, bench_seed,
                     resolve_workers(bench_workers), bench_params);
  }
  if (table->parsed()) {
    return cmd_stiffness_table(table_pressure, table_radius, table_eps, table_poly, table_out);
  }
  if (fite->parsed()) {
    return cmd_fit_epsilon(moments_path, fite_radius, fite_out);
  }
  if (fit->parsed()) {
    return cmd_fit(fit_manifest, fit_model, fit_iters, fit_out, fit_init, fit_params_out,
                   fit_set, fit_velocities, fit_seed, resolve_workers(fit_workers), fit_opt);
  }
  return kExitInput;
}
