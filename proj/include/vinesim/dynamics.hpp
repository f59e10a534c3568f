#pragma once

#include <Eigen/Dense>
#include <vector>

#include "vinesim/geometry.hpp"
#include "vinesim/qp.hpp"
#include "vinesim/state.hpp"

namespace vinesim {

/// Pin-joint residual for every non-distal pair of links, two rows per pair:
///   r_k = p_k + d e(theta_k) - p_{k+1} + d e(theta_{k+1}),  d = d_segment/2,
/// which vanishes when the joint points of adjacent links coincide. The
/// distal pair is governed by the growth constraint and carries no rows.
Eigen::VectorXd revolute_residual(const Eigen::VectorXd& q, int n, double d_segment);

/// Analytic Jacobian of revolute_residual over the full 3n coordinates.
Eigen::MatrixXd revolute_jacobian(const Eigen::VectorXd& q, int n, double d_segment);

/// Scalar rate of change of the distal pair separation; the constrained
/// quantity of the growth input.
struct GrowthRate {
  double rate = 0.0;
  bool degenerate = false;  // separation below 1e-9 m, denominator clamped
};

GrowthRate growth_rate(const Eigen::VectorXd& q, const Eigen::VectorXd& v, int n);

/// Distal pair geometry used by the growth constraint row.
struct GrowthAxis {
  Eigen::Vector2d axis = Eigen::Vector2d::Zero();  // unit vector from link n-2 to n-1
  double separation = 0.0;
  bool degenerate = false;
};

GrowthAxis growth_axis(const Eigen::VectorXd& q, int n);

/// Generalized stiffness/damping forces over the full 3n coordinates, plus
/// the per-joint torque evaluations the gradient engine replays.
struct ForceAssembly {
  Eigen::VectorXd force;           // 3n; only theta rows are nonzero
  std::vector<TorqueEval> joints;  // n-1 entries, joint k couples links k and k+1
};

ForceAssembly assemble_forces_eval(const VineState& state, const PhysParams& params);
Eigen::VectorXd assemble_forces(const VineState& state, const PhysParams& params);

/// The per-step QP over the free velocities (base link excluded) together
/// with everything the backward pass needs to chain gradients into the
/// pre-step state. Constraint rows are scaled by 1/dt so the position
/// residual terms act as Baumgarte-style stabilization.
///
/// Row layout: equalities are 2(n-2) revolute rows followed by one growth
/// row; inequality row i belongs to contacts[i].
struct StepProblem {
  QpProblem qp;
  int n_links = 0;
  std::vector<Contact> contacts;  // contacts that produced rows (base link skipped)
  GrowthAxis growth;
  ForceAssembly forces;
  Eigen::MatrixXd revolute_jac_full;  // 2(n-2) x 3n, for the stabilization backward
};

StepProblem build_step_problem(const VineState& state, const PhysParams& params,
                               const std::vector<Contact>& contacts, double u_k);

/// Index of link i's coordinate c (0=x, 1=y, 2=theta) in the free vector, or
/// -1 for the pinned base link.
inline int free_index(int link, int coord) {
  return link == 0 ? -1 : 3 * (link - 1) + coord;
}

}  // namespace vinesim
