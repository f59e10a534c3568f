#pragma once

#include <Eigen/Dense>
#include <array>
#include <optional>
#include <string>
#include <variant>

#include <nlohmann/json_fwd.hpp>

namespace vinesim {

/// Wrinkling-criterion stiffness model of an inflated tube joint. The
/// restoring moment follows the closed-form wrinkled-beam expression above
/// the wrinkling onset angle and a continuity-preserving linear ramp below it.
struct WrinklingParams {
  double pressure_pa = 0.0;
  double tube_radius_m = 0.0;
  std::array<double, 4> eps_poly = {0.0, 0.0, 0.0, 0.0};  // eps(P) = c0 + c1 P + c2 P^2 + c3 P^3
  std::optional<double> eps_override;
  std::array<double, 2> pressure_range_pa = {0.0, 1e12};  // calibrated validity range

  /// Effective wrinkling criterion at the operating pressure.
  double effective_eps() const;
  void validate() const;
};

/// Damped linear torsional spring; `k` holds one shared stiffness or one
/// value per joint. Joints created by growth beyond the vector reuse the
/// last entry.
struct LinearStiffnessParams {
  Eigen::VectorXd k = Eigen::VectorXd::Constant(1, 0.0);  // N*m/rad

  double k_at(int joint) const {
    return k[std::min<Eigen::Index>(joint, k.size() - 1)];
  }
  void validate() const;
};

/// Two-layer perceptron restoring moment: 1 input (joint angle, rad),
/// 10 tanh hidden units, 1 output (N*m).
struct NeuralStiffnessParams {
  static constexpr int kHidden = 10;
  Eigen::VectorXd w1 = Eigen::VectorXd::Zero(kHidden);
  Eigen::VectorXd b1 = Eigen::VectorXd::Zero(kHidden);
  Eigen::VectorXd w2 = Eigen::VectorXd::Zero(kHidden);
  double b2 = 0.0;

  double forward(double x) const;
  void validate() const;
};

using StiffnessModel = std::variant<WrinklingParams, LinearStiffnessParams, NeuralStiffnessParams>;

/// Wrinkle angle gamma0 for bending angle theta in [0, pi]. Returns 0 below
/// the onset angle 2*asin(eps_crit). Throws std::domain_error outside [0, pi].
double wrinkle_angle(double theta, double eps_crit);

/// Restoring moment of the wrinkling model with partial derivatives.
struct MomentEval {
  double moment = 0.0;   // N*m
  double d_theta = 0.0;  // dM/dtheta
  double d_eps = 0.0;    // dM/deps_crit
};

MomentEval wrinkling_moment_eval(double theta, double eps_crit, double pressure_pa,
                                 double tube_radius_m);

double wrinkling_moment(double theta, const WrinklingParams& params);

/// eps_crit(P) from the pressure polynomial, clamped into (1e-4, 1 - 1e-4).
/// `extrapolated` flags evaluation outside the calibrated pressure range.
struct EpsResult {
  double value = 0.0;
  bool extrapolated = false;
};

EpsResult eps_from_pressure(double pressure_pa, const std::array<double, 4>& eps_poly,
                            const std::array<double, 2>& pressure_range_pa);

/// Signed joint torque with all partial derivatives the gradient engine
/// needs. torque = -restoring(|theta|)*sign(theta) - damping*theta_dot.
struct TorqueEval {
  double torque = 0.0;
  double d_theta = 0.0;
  double d_theta_dot = 0.0;
  double d_damping = 0.0;
  Eigen::VectorXd d_params;  // w.r.t. the packed stiffness parameter vector
};

double moment(const StiffnessModel& model, double theta, double theta_dot, double damping);

TorqueEval joint_torque(const StiffnessModel& model, int joint, double theta, double theta_dot,
                        double damping);

/// Packed view of the fittable stiffness parameters (linear: k entries,
/// wrinkling: the effective eps_crit, mlp: all weights and biases).
int stiffness_param_count(const StiffnessModel& model);
Eigen::VectorXd get_stiffness_params(const StiffnessModel& model);
void set_stiffness_params(StiffnessModel& model, const Eigen::VectorXd& params);
bool stiffness_is_neural(const StiffnessModel& model);
std::string stiffness_model_name(const StiffnessModel& model);

nlohmann::json stiffness_to_json(const StiffnessModel& model);
StiffnessModel stiffness_from_json(const nlohmann::json& j, double pressure_pa,
                                   double tube_radius_m);

}  // namespace vinesim
