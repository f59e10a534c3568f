#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vinesim/geometry.hpp"
#include "vinesim/state.hpp"

namespace vinesim {

/// Bending measurements of an inflated beam segment, grouped by pressure.
struct MomentDataset {
  struct Record {
    double pressure_pa = 0.0;
    double theta_rad = 0.0;
    double moment_nm = 0.0;
  };
  std::vector<Record> records;

  /// Distinct pressures in ascending order.
  std::vector<double> pressures() const;
  std::vector<Record> group(double pressure_pa) const;
  void validate() const;  // thetas in [0, pi], >= 10 samples per group
};

MomentDataset load_moment_csv(const std::string& path);
void save_moment_csv(const MomentDataset& dataset, const std::string& path);

class UninformativeDataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Least-squares estimate of the wrinkling criterion from one pressure
/// group: dense grid scan refined by golden-section search to 1e-6 absolute
/// tolerance. Exact objective ties resolve to the smaller eps. Throws
/// UninformativeDataError when every sample is below every candidate onset.
double fit_eps_crit(const std::vector<MomentDataset::Record>& group, double tube_radius_m);

/// Ordinary least-squares cubic eps(P); needs >= 4 distinct pressures.
struct PolyFit {
  std::array<double, 4> coeffs = {0.0, 0.0, 0.0, 0.0};
  double residual_norm = 0.0;
};

PolyFit fit_eps_polynomial(const std::vector<std::pair<double, double>>& pressure_eps_pairs);

/// Observed trajectories in the engine CSV format plus a manifest.
struct TrajectoryDataset {
  struct Frame {
    double time_s = 0.0;
    int step = 0;
    std::vector<Eigen::Vector3d> links;  // x, y, theta per link
  };
  struct Trial {
    int trial_id = 0;
    std::string trajectory_path;
    std::string scene_path;
    Scene scene;
    double frame_interval_s = 0.0;
    bool holdout = false;
    bool positions_only = false;  // reconstruct theta from tracked positions
    std::vector<Frame> frames;
  };
  double link_spacing_m = 0.0;
  std::vector<Trial> trials;

  void validate() const;
};

TrajectoryDataset load_trajectory_dataset(const std::string& manifest_path);

/// Per-frame velocities for the teacher-forced loss: backward differences of
/// the observed configurations, which reproduce the integrator's velocities
/// exactly on simulator-generated data.
std::vector<Eigen::VectorXd> finite_difference_velocities(const TrajectoryDataset::Trial& trial);

struct TrialLossDiagnostics {
  int frames_used = 0;
  int frames_skipped = 0;        // link-count mismatches or step failures
  int insertion_frames = 0;      // excluded: the insertion snap corrupts the
                                 // backward-difference velocity estimate
  bool empty_trial = false;
};

/// One-step prediction loss over a trial: from each observed configuration
/// (with the supplied or finite-difference per-frame velocities), step once
/// and accumulate squared position error on (x, y) of each tracked link.
/// Theta components are excluded.
double trajectory_loss(const PhysParams& params, const TrajectoryDataset::Trial& trial,
                       double link_spacing_m,
                       const std::vector<Eigen::VectorXd>* velocities = nullptr,
                       TrialLossDiagnostics* diagnostics = nullptr);

struct FitConfig {
  int iterations = 2000;
  double lr_physical = 1e-2;
  double lr_neural = 1e-3;
  double lr_velocity = 1e-2;
  double weight_decay_neural = 1e-4;
  bool fit_mass = true;
  bool fit_inertia = true;
  bool fit_damping = true;
  bool fit_growth = true;
  bool fit_stiffness = true;
  enum class VelocityMode { finite_difference, free } velocity_mode =
      VelocityMode::finite_difference;
  double divergence_factor = 1e3;
  int divergence_patience = 50;
  bool gradient_check = true;
  int workers = 1;
  std::uint64_t seed = 0;
};

struct FitReport {
  PhysParams params;           // best-loss parameters
  std::vector<double> loss_curve;
  double best_loss = 0.0;
  int best_iteration = 0;
  bool diverged = false;
  double gradient_check_rel_error = 0.0;
  std::vector<int> skipped_trials;
  std::vector<std::pair<int, double>> train_mse;    // (trial_id, mse per position)
  std::vector<std::pair<int, double>> holdout_mse;
  FitConfig config;
};

nlohmann::json fit_report_to_json(const FitReport& report);

/// Gradient-based identification of the simulator parameters against the
/// observed trajectories. Uses AdamW with decoupled weight decay on neural
/// parameters only; physical parameters are projected onto their valid
/// ranges after every update. Returns the best-loss parameters.
FitReport fit_parameters(const TrajectoryDataset& dataset, const PhysParams& initial,
                         const FitConfig& config);

}  // namespace vinesim
