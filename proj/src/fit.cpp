#include "vinesim/fit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "vinesim/engine.hpp"

namespace vinesim {

namespace {

constexpr double kEpsLo = 1e-4;
constexpr double kEpsHi = 0.999;

double wrap_angle_diff(double a, double b) {
  double d = a - b;
  while (d > M_PI) d -= 2.0 * M_PI;
  while (d < -M_PI) d += 2.0 * M_PI;
  return d;
}

}  // namespace

std::vector<double> MomentDataset::pressures() const {
  std::set<double> ps;
  for (const Record& r : records) ps.insert(r.pressure_pa);
  return std::vector<double>(ps.begin(), ps.end());
}

std::vector<MomentDataset::Record> MomentDataset::group(double pressure_pa) const {
  std::vector<Record> out;
  for (const Record& r : records)
    if (r.pressure_pa == pressure_pa) out.push_back(r);
  return out;
}

void MomentDataset::validate() const {
  for (const Record& r : records) {
    if (r.theta_rad < 0.0 || r.theta_rad > M_PI)
      throw std::invalid_argument("moment dataset: theta outside [0, pi]");
  }
  for (double p : pressures()) {
    if (group(p).size() < 10)
      throw std::invalid_argument("moment dataset: fewer than 10 samples in a pressure group");
  }
}

MomentDataset load_moment_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open moments csv: " + path);
  MomentDataset d;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1 && line.find("pressure_pa") != std::string::npos) continue;
    MomentDataset::Record r;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &r.pressure_pa, &r.theta_rad, &r.moment_nm) != 3)
      throw std::invalid_argument("moments csv " + path + ": bad row at line " +
                                  std::to_string(line_no));
    d.records.push_back(r);
  }
  return d;
}

void save_moment_csv(const MomentDataset& dataset, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::invalid_argument("cannot write moments csv: " + path);
  out << "pressure_pa,theta_rad,moment_nm\n";
  char buf[128];
  for (const auto& r : dataset.records) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g\n", r.pressure_pa, r.theta_rad,
                  r.moment_nm);
    out << buf;
  }
}

double fit_eps_crit(const std::vector<MomentDataset::Record>& group, double tube_radius_m) {
  if (group.empty()) throw UninformativeDataError("empty pressure group");
  if (tube_radius_m <= 0.0) throw std::invalid_argument("tube radius must be positive");
  const double pressure = group.front().pressure_pa;

  double theta_max = 0.0;
  for (const auto& r : group) theta_max = std::max(theta_max, r.theta_rad);
  if (theta_max < 2.0 * std::asin(kEpsLo))
    throw UninformativeDataError("all bending angles below every candidate wrinkling onset");

  auto sse = [&](double eps) {
    double s = 0.0;
    for (const auto& r : group) {
      const double m = wrinkling_moment_eval(r.theta_rad, eps, pressure, tube_radius_m).moment;
      const double d = m - r.moment_nm;
      s += d * d;
    }
    return s;
  };

  // Dense scan with strict improvement so exact ties keep the smaller eps,
  // then golden-section refinement inside the winning cell.
  constexpr int kGrid = 2000;
  int best_i = 0;
  double best_v = std::numeric_limits<double>::infinity();
  auto grid_eps = [&](int i) {
    return kEpsLo + (kEpsHi - kEpsLo) * static_cast<double>(i) / (kGrid - 1);
  };
  for (int i = 0; i < kGrid; ++i) {
    const double v = sse(grid_eps(i));
    if (v < best_v) {
      best_v = v;
      best_i = i;
    }
  }

  double lo = grid_eps(std::max(0, best_i - 1));
  double hi = grid_eps(std::min(kGrid - 1, best_i + 1));
  const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
  double x1 = hi - gr * (hi - lo);
  double x2 = lo + gr * (hi - lo);
  double f1 = sse(x1);
  double f2 = sse(x2);
  while (hi - lo > 1e-7) {
    if (f1 < f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - gr * (hi - lo);
      f1 = sse(x1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + gr * (hi - lo);
      f2 = sse(x2);
    }
  }
  const double refined = 0.5 * (lo + hi);
  return sse(refined) < best_v ? refined : grid_eps(best_i);
}

PolyFit fit_eps_polynomial(const std::vector<std::pair<double, double>>& pairs) {
  std::set<double> distinct;
  for (const auto& [p, e] : pairs) distinct.insert(p);
  if (distinct.size() < 4)
    throw std::invalid_argument("eps polynomial fit needs at least 4 distinct pressures");

  double pmax = 0.0;
  for (const auto& [p, e] : pairs) pmax = std::max(pmax, std::abs(p));
  if (pmax == 0.0) pmax = 1.0;

  const int n = static_cast<int>(pairs.size());
  Eigen::MatrixXd vand(n, 4);
  Eigen::VectorXd rhs(n);
  for (int i = 0; i < n; ++i) {
    const double s = pairs[static_cast<std::size_t>(i)].first / pmax;
    vand(i, 0) = 1.0;
    vand(i, 1) = s;
    vand(i, 2) = s * s;
    vand(i, 3) = s * s * s;
    rhs[i] = pairs[static_cast<std::size_t>(i)].second;
  }
  const Eigen::VectorXd c = vand.colPivHouseholderQr().solve(rhs);
  PolyFit out;
  for (int k = 0; k < 4; ++k) out.coeffs[static_cast<std::size_t>(k)] = c[k] / std::pow(pmax, k);
  out.residual_norm = (vand * c - rhs).norm();
  return out;
}

void TrajectoryDataset::validate() const {
  if (link_spacing_m <= 0.0)
    throw std::invalid_argument("trajectory dataset needs a positive link spacing");
  for (const Trial& t : trials) {
    if (t.frame_interval_s <= 0.0)
      throw std::invalid_argument("trial needs a positive frame interval");
    std::size_t prev_links = 0;
    double prev_time = -std::numeric_limits<double>::infinity();
    for (const Frame& f : t.frames) {
      if (f.time_s <= prev_time && !t.frames.empty() && &f != &t.frames.front())
        throw std::invalid_argument("trial frames must be time-ordered");
      if (f.links.size() < prev_links)
        throw std::invalid_argument("trial link counts must be non-decreasing");
      prev_links = f.links.size();
      prev_time = f.time_s;
    }
  }
}

namespace {

std::map<int, std::vector<TrajectoryDataset::Frame>> read_trajectory_csv(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open trajectory csv: " + path);
  // (trial, step) -> (time, rows)
  std::map<int, std::map<int, TrajectoryDataset::Frame>> grouped;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1 && line.find("trial_id") != std::string::npos) continue;
    int trial = 0, step = 0, link = 0;
    double time = 0.0, x = 0.0, y = 0.0, th = 0.0;
    if (std::sscanf(line.c_str(), "%d,%d,%lf,%d,%lf,%lf,%lf", &trial, &step, &time, &link, &x, &y,
                    &th) != 7)
      throw std::invalid_argument("trajectory csv " + path + ": bad row at line " +
                                  std::to_string(line_no));
    auto& frame = grouped[trial][step];
    frame.time_s = time;
    frame.step = step;
    if (static_cast<int>(frame.links.size()) <= link)
      frame.links.resize(static_cast<std::size_t>(link) + 1, Eigen::Vector3d::Zero());
    frame.links[static_cast<std::size_t>(link)] = {x, y, th};
  }
  std::map<int, std::vector<TrajectoryDataset::Frame>> out;
  for (auto& [trial, frames] : grouped) {
    for (auto& [step, frame] : frames) out[trial].push_back(std::move(frame));
  }
  return out;
}

}  // namespace

TrajectoryDataset load_trajectory_dataset(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::invalid_argument("cannot open dataset manifest: " + manifest_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("dataset manifest " + manifest_path + ": " + e.what());
  }

  const std::string dir = manifest_path.find('/') != std::string::npos
                              ? manifest_path.substr(0, manifest_path.rfind('/') + 1)
                              : "";
  auto resolve = [&](const std::string& p) {
    return (p.empty() || p.front() == '/') ? p : dir + p;
  };

  TrajectoryDataset d;
  try {
    d.link_spacing_m = j.at("link_spacing_m").get<double>();
    for (const auto& tj : j.at("trials")) {
      TrajectoryDataset::Trial t;
      t.trial_id = tj.value("trial_id", 0);
      t.trajectory_path = resolve(tj.at("trajectory").get<std::string>());
      t.scene_path = resolve(tj.at("scene").get<std::string>());
      t.frame_interval_s = tj.at("frame_interval_s").get<double>();
      t.holdout = tj.value("holdout", false);
      t.positions_only = tj.value("positions_only", false);
      t.scene = load_scene(t.scene_path);
      auto frames = read_trajectory_csv(t.trajectory_path);
      const auto it = frames.find(t.trial_id);
      if (it != frames.end()) t.frames = std::move(it->second);
      d.trials.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("dataset manifest " + manifest_path + ": " + e.what());
  }
  d.validate();
  return d;
}

namespace {

// Observed frame -> simulator state. Thetas come from the file unless the
// trial is positions-only, in which case they are reconstructed from the
// tracked segment directions.
//
// The tip length of frame i is rebuilt with the integrator's own update,
// tip(i) = |a| + a/|a| . (b - a), from the distal separations a, b of
// frames i-1 and i; this reproduces the generator's bookkeeping exactly on
// simulator data. Frames where the link count just changed fall back to the
// geometric separation, which insertion makes exact by construction.
VineState frame_state(const TrajectoryDataset::Trial& trial, std::size_t frame_index,
                      double link_spacing, int capacity) {
  const auto& frame = trial.frames[frame_index];
  const int n = static_cast<int>(frame.links.size());
  VineState s;
  s.n = n;
  s.capacity = capacity;
  s.d_segment = link_spacing;
  s.q = Eigen::VectorXd::Zero(3 * capacity);
  s.v = Eigen::VectorXd::Zero(3 * capacity);
  for (int k = 0; k < n; ++k) {
    s.q.segment<2>(3 * k) = frame.links[static_cast<std::size_t>(k)].head<2>();
    if (trial.positions_only) {
      const int a = std::min(k, n - 2);
      const Eigen::Vector2d d = frame.links[static_cast<std::size_t>(a) + 1].head<2>() -
                                frame.links[static_cast<std::size_t>(a)].head<2>();
      s.q[3 * k + 2] = std::atan2(d.y(), d.x());
    } else {
      s.q[3 * k + 2] = frame.links[static_cast<std::size_t>(k)].z();
    }
  }

  auto distal_diff = [&](const TrajectoryDataset::Frame& f) {
    const std::size_t m = f.links.size();
    return Eigen::Vector2d(f.links[m - 1].head<2>() - f.links[m - 2].head<2>());
  };
  double tip = distal_diff(frame).norm();
  if (frame_index > 0 &&
      trial.frames[frame_index - 1].links.size() == frame.links.size()) {
    const Eigen::Vector2d a = distal_diff(trial.frames[frame_index - 1]);
    const Eigen::Vector2d b = distal_diff(frame);
    const double an = a.norm();
    if (an > 1e-9) tip = an + a.dot(b - a) / an;
  }
  s.tip_length = std::clamp(tip, 1e-6 * link_spacing, link_spacing);
  return s;
}

int trial_capacity(const TrajectoryDataset::Trial& trial) {
  std::size_t n = 2;
  for (const auto& f : trial.frames) n = std::max(n, f.links.size());
  return static_cast<int>(n) + 2;
}

/// Squared position error of the final snapshot against target positions.
class OneStepPositionLoss : public TrajectoryLoss {
public:
  explicit OneStepPositionLoss(std::vector<Eigen::Vector2d> targets)
      : targets_(std::move(targets)) {}

  double value(const Trajectory& traj) const override {
    const VineState& s = traj.states.back();
    const int links = std::min<int>(s.n, static_cast<int>(targets_.size()));
    double loss = 0.0;
    for (int k = 0; k < links; ++k) {
      loss += (s.link_position(k) - targets_[static_cast<std::size_t>(k)]).squaredNorm();
    }
    return loss;
  }

  std::vector<StateGrad> state_gradients(const Trajectory& traj) const override {
    std::vector<StateGrad> out(traj.states.size());
    const VineState& s = traj.states.back();
    StateGrad& g = out.back();
    g.d_q = Eigen::VectorXd::Zero(3 * s.n);
    g.d_v = Eigen::VectorXd::Zero(3 * s.n);
    const int links = std::min<int>(s.n, static_cast<int>(targets_.size()));
    for (int k = 0; k < links; ++k) {
      g.d_q.segment<2>(3 * k) =
          2.0 * (s.link_position(k) - targets_[static_cast<std::size_t>(k)]);
    }
    return out;
  }

private:
  std::vector<Eigen::Vector2d> targets_;
};

struct FrameAlignment {
  int substeps = 1;
  double dt = 0.0;
};

FrameAlignment align_dt(double params_dt, double frame_interval) {
  FrameAlignment a;
  const int sub = std::max(1, static_cast<int>(std::lround(frame_interval / params_dt)));
  if (std::abs(sub * params_dt - frame_interval) > 1e-9 * frame_interval)
    throw std::invalid_argument("params dt must divide the frame interval");
  a.substeps = sub;
  a.dt = frame_interval / sub;
  return a;
}

}  // namespace

std::vector<Eigen::VectorXd> finite_difference_velocities(const TrajectoryDataset::Trial& trial) {
  const double h = trial.frame_interval_s;
  std::vector<Eigen::VectorXd> vels(trial.frames.size());
  for (std::size_t i = 0; i < trial.frames.size(); ++i) {
    const int n = static_cast<int>(trial.frames[i].links.size());
    vels[i] = Eigen::VectorXd::Zero(3 * n);
    if (i == 0) continue;
    const auto& prev = trial.frames[i - 1];
    const auto& cur = trial.frames[i];
    const int n_prev = static_cast<int>(prev.links.size());
    for (int k = 0; k < n; ++k) {
      const int src = std::min(k, n_prev - 1);
      const Eigen::Vector3d& a = cur.links[static_cast<std::size_t>(k)];
      const Eigen::Vector3d& b = prev.links[static_cast<std::size_t>(src)];
      if (k < n_prev) {
        vels[i][3 * k] = (a.x() - b.x()) / h;
        vels[i][3 * k + 1] = (a.y() - b.y()) / h;
        vels[i][3 * k + 2] = wrap_angle_diff(a.z(), b.z()) / h;
      } else {
        // Link appeared this frame: inherit the former tip's estimate.
        vels[i].segment<3>(3 * k) = vels[i].segment<3>(3 * (n_prev - 1));
      }
    }
  }
  return vels;
}

double trajectory_loss(const PhysParams& params, const TrajectoryDataset::Trial& trial,
                       double link_spacing_m, const std::vector<Eigen::VectorXd>* velocities,
                       TrialLossDiagnostics* diagnostics) {
  TrialLossDiagnostics local;
  TrialLossDiagnostics& diag = diagnostics != nullptr ? *diagnostics : local;
  if (trial.frames.size() < 3) {
    diag.empty_trial = true;
    return 0.0;
  }
  std::vector<Eigen::VectorXd> fd;
  if (velocities == nullptr) {
    fd = finite_difference_velocities(trial);
    velocities = &fd;
  }
  const FrameAlignment align = align_dt(params.dt_s, trial.frame_interval_s);
  PhysParams p = params;
  p.dt_s = align.dt;

  const int capacity = trial_capacity(trial);
  double loss = 0.0;
  for (std::size_t i = 1; i + 1 < trial.frames.size(); ++i) {
    if (trial.frames[i].links.size() != trial.frames[i - 1].links.size()) {
      ++diag.insertion_frames;
      continue;
    }
    VineState state = frame_state(trial, i, link_spacing_m, capacity);
    state.v.head((*velocities)[i].size()) = (*velocities)[i];
    RolloutConfig cfg;
    cfg.steps = align.substeps;
    cfg.record_every = align.substeps;
    Trajectory traj;
    try {
      traj = rollout(state, p, trial.scene, cfg, nullptr);
    } catch (const StepError&) {
      ++diag.frames_skipped;
      continue;
    }
    const auto& target = trial.frames[i + 1].links;
    if (traj.states.back().n != static_cast<int>(target.size())) {
      ++diag.frames_skipped;
      continue;
    }
    std::vector<Eigen::Vector2d> targets(target.size());
    for (std::size_t k = 0; k < target.size(); ++k) targets[k] = target[k].head<2>();
    loss += OneStepPositionLoss(std::move(targets)).value(traj);
    ++diag.frames_used;
  }
  return loss;
}

namespace {

/// AdamW moments for one parameter block.
struct AdamState {
  Eigen::VectorXd m, v;
  int t = 0;

  void init(Eigen::Index n) {
    m = Eigen::VectorXd::Zero(n);
    v = Eigen::VectorXd::Zero(n);
    t = 0;
  }

  Eigen::VectorXd step(const Eigen::VectorXd& grad, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t;
    m = b1 * m + (1.0 - b1) * grad;
    v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
    const Eigen::VectorXd mh = m / (1.0 - std::pow(b1, t));
    const Eigen::VectorXd vh = v / (1.0 - std::pow(b2, t));
    return lr * (mh.array() / (vh.array().sqrt() + eps)).matrix();
  }
};

struct Objective {
  double loss = 0.0;
  Eigen::VectorXd d_phys;   // mass, inertia, damping, growth (active subset order)
  Eigen::VectorXd d_stiff;
  std::vector<std::vector<Eigen::VectorXd>> d_vels;  // per trial, per frame
  int frames_skipped = 0;
};

struct TrialWork {
  const TrajectoryDataset::Trial* trial = nullptr;
  std::vector<Eigen::VectorXd> velocities;
  int capacity = 0;
};

}  // namespace

FitReport fit_parameters(const TrajectoryDataset& dataset, const PhysParams& initial,
                         const FitConfig& config) {
  dataset.validate();
  initial.validate();

  std::vector<TrialWork> work;
  std::vector<int> skipped;
  for (const auto& trial : dataset.trials) {
    if (trial.holdout) continue;
    if (trial.frames.size() < 3) {
      skipped.push_back(trial.trial_id);
      continue;
    }
    TrialWork w;
    w.trial = &trial;
    w.velocities = finite_difference_velocities(trial);
    w.capacity = trial_capacity(trial);
    work.push_back(std::move(w));
  }
  if (work.empty()) throw std::invalid_argument("fit: no usable trials in the dataset");

  PhysParams params = initial;
  const int n_stiff = config.fit_stiffness ? stiffness_param_count(params.stiffness) : 0;
  const bool neural = stiffness_is_neural(params.stiffness);

  std::vector<int> phys_ids;  // 0 mass, 1 inertia, 2 damping, 3 growth
  if (config.fit_mass) phys_ids.push_back(0);
  if (config.fit_inertia) phys_ids.push_back(1);
  if (config.fit_damping) phys_ids.push_back(2);
  if (config.fit_growth) phys_ids.push_back(3);

  auto get_phys = [&](const PhysParams& p) {
    Eigen::VectorXd v(phys_ids.size());
    for (std::size_t i = 0; i < phys_ids.size(); ++i) {
      switch (phys_ids[i]) {
        case 0: v[static_cast<Eigen::Index>(i)] = p.mass_kg; break;
        case 1: v[static_cast<Eigen::Index>(i)] = p.inertia_kgm2; break;
        case 2: v[static_cast<Eigen::Index>(i)] = p.damping_nms; break;
        default: v[static_cast<Eigen::Index>(i)] = p.growth_mps; break;
      }
    }
    return v;
  };
  // Growth must stay below one segment per frame for the stepper to accept it.
  const double growth_cap = 0.9 * dataset.link_spacing_m / initial.dt_s;
  auto set_phys = [&](PhysParams& p, const Eigen::VectorXd& v) {
    for (std::size_t i = 0; i < phys_ids.size(); ++i) {
      const double x = v[static_cast<Eigen::Index>(i)];
      switch (phys_ids[i]) {
        case 0: p.mass_kg = std::max(x, 1e-8); break;
        case 1: p.inertia_kgm2 = std::max(x, 1e-10); break;
        case 2: p.damping_nms = std::max(x, 0.0); break;
        default: p.growth_mps = std::clamp(x, 0.0, growth_cap); break;
      }
    }
  };

  GradientRequest req;
  req.mass = config.fit_mass;
  req.inertia = config.fit_inertia;
  req.damping = config.fit_damping;
  req.growth = config.fit_growth;
  req.stiffness = config.fit_stiffness;
  req.initial_velocity = config.velocity_mode == FitConfig::VelocityMode::free;

  auto evaluate = [&](const PhysParams& p, const std::vector<TrialWork>& w,
                      bool want_grads) -> Objective {
    Objective obj;
    obj.d_phys = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(phys_ids.size()));
    obj.d_stiff = Eigen::VectorXd::Zero(n_stiff);
    obj.d_vels.resize(w.size());

    std::vector<Objective> partial(w.size());
    auto run_trial = [&](std::size_t ti) {
      Objective& po = partial[ti];
      po.d_phys = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(phys_ids.size()));
      po.d_stiff = Eigen::VectorXd::Zero(n_stiff);
      const TrialWork& tw = w[ti];
      const auto& frames = tw.trial->frames;
      po.d_vels.resize(1);
      po.d_vels[0].resize(frames.size());

      const FrameAlignment align = align_dt(p.dt_s, tw.trial->frame_interval_s);
      PhysParams pr = p;
      pr.dt_s = align.dt;

      for (std::size_t i = 1; i + 1 < frames.size(); ++i) {
        if (frames[i].links.size() != frames[i - 1].links.size()) continue;
        VineState state = frame_state(*tw.trial, i, dataset.link_spacing_m, tw.capacity);
        state.v.head(tw.velocities[i].size()) = tw.velocities[i];
        RolloutConfig cfg;
        cfg.steps = align.substeps;
        cfg.record_every = align.substeps;
        Tape tape;
        Trajectory traj;
        try {
          traj = rollout(state, pr, tw.trial->scene, cfg, &tape);
        } catch (const StepError&) {
          ++po.frames_skipped;
          continue;
        }
        const auto& target = frames[i + 1].links;
        if (traj.states.back().n != static_cast<int>(target.size())) {
          ++po.frames_skipped;
          continue;
        }
        std::vector<Eigen::Vector2d> targets(target.size());
        for (std::size_t k = 0; k < target.size(); ++k) targets[k] = target[k].head<2>();
        OneStepPositionLoss loss_fn(std::move(targets));
        if (!want_grads) {
          po.loss += loss_fn.value(traj);
          continue;
        }
        const Gradients g = backward(tape, traj, pr, loss_fn, req);
        po.loss += g.loss;
        Eigen::VectorXd dp(phys_ids.size());
        for (std::size_t k = 0; k < phys_ids.size(); ++k) {
          switch (phys_ids[k]) {
            case 0: dp[static_cast<Eigen::Index>(k)] = g.d_mass; break;
            case 1: dp[static_cast<Eigen::Index>(k)] = g.d_inertia; break;
            case 2: dp[static_cast<Eigen::Index>(k)] = g.d_damping; break;
            default: dp[static_cast<Eigen::Index>(k)] = g.d_growth; break;
          }
        }
        po.d_phys += dp;
        if (n_stiff > 0) po.d_stiff += g.d_stiffness;
        if (req.initial_velocity) po.d_vels[0][i] = g.d_initial_velocity;
      }
    };

    const int workers = std::max(1, config.workers);
    if (workers == 1 || w.size() <= 1) {
      for (std::size_t ti = 0; ti < w.size(); ++ti) run_trial(ti);
    } else {
      std::vector<std::thread> pool;
      const std::size_t chunk = (w.size() + workers - 1) / workers;
      for (int wk = 0; wk < workers; ++wk) {
        const std::size_t lo = wk * chunk;
        const std::size_t hi = std::min(w.size(), lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&, lo, hi] {
          for (std::size_t ti = lo; ti < hi; ++ti) run_trial(ti);
        });
      }
      for (auto& th : pool) th.join();
    }

    // Fixed-order reduction keeps the result independent of the worker count.
    for (std::size_t ti = 0; ti < w.size(); ++ti) {
      obj.loss += partial[ti].loss;
      obj.d_phys += partial[ti].d_phys;
      obj.d_stiff += partial[ti].d_stiff;
      obj.frames_skipped += partial[ti].frames_skipped;
      obj.d_vels[ti] = std::move(partial[ti].d_vels[0]);
    }
    return obj;
  };

  FitReport report;
  report.config = config;
  report.skipped_trials = skipped;

  AdamState adam_phys, adam_stiff;
  adam_phys.init(static_cast<Eigen::Index>(phys_ids.size()));
  adam_stiff.init(n_stiff);
  std::vector<std::vector<AdamState>> adam_vels(work.size());
  if (config.velocity_mode == FitConfig::VelocityMode::free) {
    for (std::size_t ti = 0; ti < work.size(); ++ti) {
      adam_vels[ti].resize(work[ti].velocities.size());
      for (std::size_t i = 0; i < work[ti].velocities.size(); ++i) {
        adam_vels[ti][i].init(work[ti].velocities[i].size());
      }
    }
  }

  PhysParams best = params;
  std::vector<std::vector<Eigen::VectorXd>> best_vels;
  double best_loss = std::numeric_limits<double>::infinity();
  int best_iter = 0;
  double initial_loss = 0.0;
  int divergence_streak = 0;

  for (int iter = 0; iter <= config.iterations; ++iter) {
    const bool last = iter == config.iterations;
    Objective obj = evaluate(params, work, !last);
    report.loss_curve.push_back(obj.loss);
    if (iter == 0) initial_loss = obj.loss;
    if (obj.loss < best_loss) {
      best_loss = obj.loss;
      best = params;
      best_iter = iter;
      if (config.velocity_mode == FitConfig::VelocityMode::free) {
        best_vels.clear();
        for (const auto& tw : work) best_vels.push_back(tw.velocities);
      }
    }
    if (!std::isfinite(obj.loss) ||
        obj.loss > config.divergence_factor * std::max(initial_loss, 1e-12)) {
      if (++divergence_streak >= config.divergence_patience || !std::isfinite(obj.loss)) {
        report.diverged = true;
        break;
      }
    } else {
      divergence_streak = 0;
    }
    if (last) break;

    if (config.gradient_check && iter == 0) {
      double worst = 0.0;
      auto check_scalar = [&](double analytic, auto&& apply) {
        PhysParams pp = params;
        const double base = 1e-6;
        apply(pp, base);
        const double up = evaluate(pp, work, false).loss;
        PhysParams pm = params;
        apply(pm, -base);
        const double dn = evaluate(pm, work, false).loss;
        const double fd = (up - dn) / (2.0 * base);
        const double rel = std::abs(analytic - fd) / std::max({std::abs(fd), std::abs(analytic), 1e-12});
        worst = std::max(worst, rel);
      };
      if (config.fit_stiffness && n_stiff > 0 && !neural) {
        const Eigen::VectorXd s0 = get_stiffness_params(params.stiffness);
        check_scalar(obj.d_stiff[0], [&](PhysParams& pp, double d) {
          Eigen::VectorXd s = s0;
          s[0] += d;
          set_stiffness_params(pp.stiffness, s);
        });
      } else if (!phys_ids.empty()) {
        check_scalar(obj.d_phys[0], [&](PhysParams& pp, double d) {
          Eigen::VectorXd v = get_phys(pp);
          v[0] += d;
          set_phys(pp, v);
        });
      }
      report.gradient_check_rel_error = worst;
    }

    if (!phys_ids.empty()) {
      Eigen::VectorXd v = get_phys(params);
      v -= adam_phys.step(obj.d_phys, config.lr_physical);
      set_phys(params, v);
    }
    if (n_stiff > 0) {
      Eigen::VectorXd s = get_stiffness_params(params.stiffness);
      const double lr = neural ? config.lr_neural : config.lr_physical;
      Eigen::VectorXd upd = adam_stiff.step(obj.d_stiff, lr);
      if (neural && config.weight_decay_neural > 0.0) {
        upd += lr * config.weight_decay_neural * s;
      }
      set_stiffness_params(params.stiffness, s - upd);
    }
    if (config.velocity_mode == FitConfig::VelocityMode::free) {
      for (std::size_t ti = 0; ti < work.size(); ++ti) {
        for (std::size_t i = 1; i + 1 < work[ti].velocities.size(); ++i) {
          if (obj.d_vels[ti][i].size() != work[ti].velocities[i].size()) continue;
          work[ti].velocities[i] -=
              adam_vels[ti][i].step(obj.d_vels[ti][i], config.lr_velocity);
        }
      }
    }
  }

  report.params = best;
  report.best_loss = best_loss;
  report.best_iteration = best_iter;

  // Per-trial MSE at the best parameters (finite-difference velocities for
  // comparability across train and holdout trials).
  for (const auto& trial : dataset.trials) {
    TrialLossDiagnostics diag;
    const double loss = trajectory_loss(best, trial, dataset.link_spacing_m, nullptr, &diag);
    double positions = 0.0;
    for (std::size_t i = 1; i + 1 < trial.frames.size(); ++i)
      positions += static_cast<double>(trial.frames[i + 1].links.size());
    const double mse = positions > 0.0 ? loss / positions : 0.0;
    if (trial.holdout) {
      report.holdout_mse.emplace_back(trial.trial_id, mse);
    } else {
      report.train_mse.emplace_back(trial.trial_id, mse);
    }
  }
  return report;
}

nlohmann::json fit_report_to_json(const FitReport& r) {
  nlohmann::json j;
  j["params"] = params_to_json(r.params);
  j["loss_curve"] = r.loss_curve;
  j["best_loss"] = r.best_loss;
  j["best_iteration"] = r.best_iteration;
  j["diverged"] = r.diverged;
  j["gradient_check_rel_error"] = r.gradient_check_rel_error;
  j["skipped_trials"] = r.skipped_trials;
  auto mse_json = [](const std::vector<std::pair<int, double>>& v) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& [id, mse] : v) out.push_back({{"trial_id", id}, {"mse_m2", mse}});
    return out;
  };
  j["train_mse"] = mse_json(r.train_mse);
  j["holdout_mse"] = mse_json(r.holdout_mse);
  j["optimizer"] = {{"iterations", r.config.iterations},
                    {"lr_physical", r.config.lr_physical},
                    {"lr_neural", r.config.lr_neural},
                    {"lr_velocity", r.config.lr_velocity},
                    {"weight_decay_neural", r.config.weight_decay_neural},
                    {"velocity_mode", r.config.velocity_mode == FitConfig::VelocityMode::free
                                          ? "free"
                                          : "finite_difference"}};
  return j;
}

}  // namespace vinesim
