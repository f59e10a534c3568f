#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "vinesim/dynamics.hpp"
#include "vinesim/geometry.hpp"
#include "vinesim/qp.hpp"
#include "vinesim/state.hpp"

namespace vinesim {

struct RolloutConfig {
  int steps = 1;
  double dt_s = 0.0;  // overrides params.dt_s when positive
  int batch = 1;
  int max_links = 0;  // overrides the state capacity when positive
  std::uint64_t seed = 0;
  int record_every = 1;
  int workers = 1;

  void validate() const;
};

struct StepDiagnostics {
  QpStatus qp_status = QpStatus::solved;
  int qp_iterations = 0;
  int contact_count = 0;
  int active_contacts = 0;
  double max_revolute_residual = 0.0;
  double realized_growth = 0.0;  // m/s
  bool topology_changed = false;
  bool growth_halted = false;
  bool degenerate_tip = false;
};

struct Trajectory {
  std::vector<double> times;
  std::vector<int> snapshot_steps;
  std::vector<VineState> states;
  std::vector<StepDiagnostics> diagnostics;  // one per executed step
  double wall_ms = 0.0;
  bool failed = false;
  int failed_step = -1;
  std::string error;
  std::string error_dump;  // QP dump of the failing step, when available
};

/// Thrown when the per-step QP cannot be solved; carries the problem and
/// solution dump for offline reproduction.
class StepError : public std::runtime_error {
public:
  StepError(const std::string& what, std::string dump, int step_index = -1)
      : std::runtime_error(what), dump_json(std::move(dump)), step_index(step_index) {}
  std::string dump_json;
  int step_index;
};

/// Everything recorded about one executed step so the reverse pass can
/// replay it: pre-step state, assembled QP with geometry, QP solution, and
/// the link-insertion event, if any.
struct StepRecord {
  VineState pre;
  StepProblem problem;
  QpSolution solution;
  double pre_dt = 0.0;  // dt the step integrated with
  double u_input = 0.0;
  bool growth_input_active = true;  // false once growth is halted at capacity
  double realized_growth = 0.0;
  bool inserted = false;
  bool insertion_reseeded = false;
  double ins_theta_a = 0.0;  // post-step angles the insertion geometry used
  double ins_theta_t = 0.0;
  double ins_tip_length = 0.0;
  StepDiagnostics diagnostics;
};

/// One symplectic-Euler step: velocities from the QP, positions integrated
/// with the new velocities, tip length advanced by the realized growth rate.
/// Throws StepError on QP failure, leaving the input state untouched.
VineState step(const VineState& state, const PhysParams& params, const Scene& scene, double u_k);

VineState step_with_record(const VineState& state, const PhysParams& params, const Scene& scene,
                           double u_k, const QpSolution* warm_start, StepRecord& record);

/// Splits the tip link once it has grown to a full segment; identity
/// otherwise. At capacity the growth is halted and flagged instead.
VineState maybe_add_link(const VineState& state);
VineState maybe_add_link_with_record(const VineState& state, StepRecord& record);

using Tape = std::vector<StepRecord>;

Trajectory rollout(const VineState& initial, const PhysParams& params, const Scene& scene,
                   const RolloutConfig& config, Tape* tape = nullptr);

struct BatchTiming {
  double wall_ms = 0.0;
  double ms_per_iteration = 0.0;
  double ms_per_iteration_per_element = 0.0;
};

std::vector<Trajectory> rollout_batch(const std::vector<VineState>& initials,
                                      const PhysParams& params, const Scene& scene,
                                      const RolloutConfig& config, BatchTiming* timing = nullptr);

std::vector<Trajectory> rollout_batch(const std::vector<VineState>& initials,
                                      const std::vector<PhysParams>& params, const Scene& scene,
                                      const RolloutConfig& config, BatchTiming* timing = nullptr);

/// Adjoint seed for one recorded snapshot.
struct StateGrad {
  Eigen::VectorXd d_q;  // 3n of that snapshot
  Eigen::VectorXd d_v;
  double d_tip = 0.0;
};

/// Differentiable scalar objective over a trajectory.
class TrajectoryLoss {
public:
  virtual ~TrajectoryLoss() = default;
  virtual double value(const Trajectory& trajectory) const = 0;
  /// One StateGrad per recorded snapshot, aligned with trajectory.states.
  virtual std::vector<StateGrad> state_gradients(const Trajectory& trajectory) const = 0;
};

struct GradientRequest {
  bool mass = true;
  bool inertia = true;
  bool damping = true;
  bool growth = true;
  bool stiffness = true;
  bool initial_velocity = true;
};

struct Gradients {
  double d_mass = 0.0;
  double d_inertia = 0.0;
  double d_damping = 0.0;
  double d_growth = 0.0;
  Eigen::VectorXd d_stiffness;        // packed stiffness parameter order
  Eigen::VectorXd d_initial_velocity;  // 3 * n0, base entries zero
  bool topology_event_in_window = false;
  double loss = 0.0;
};

/// Reverse accumulation through every recorded step: QP nodes differentiate
/// through the KKT conditions, everything else uses analytic adjoints. Link
/// insertions are treated as events fixed at their realized step index and
/// flagged in the result.
Gradients backward(const Tape& tape, const Trajectory& trajectory, const PhysParams& params,
                   const TrajectoryLoss& loss, const GradientRequest& request = {});

/// Forward rollout plus backward pass in one call.
Gradients loss_gradient(const VineState& initial, const PhysParams& params, const Scene& scene,
                        const RolloutConfig& config, const TrajectoryLoss& loss,
                        const GradientRequest& request = {});

/// Writes the trajectory CSV (columns: trial_id, step, time_s, link_index,
/// x_m, y_m, theta_rad) for one or more trajectories.
void write_trajectory_csv(const std::string& path, const std::vector<Trajectory>& trajectories);
void append_trajectory_csv(std::string& out, int trial_id, const Trajectory& trajectory);

}  // namespace vinesim
