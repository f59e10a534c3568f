#pragma once

#include <Eigen/Dense>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "vinesim/stiffness.hpp"

namespace vinesim {

/// Maximal-coordinate state of one vine robot. Link i occupies entries
/// 3i..3i+2 of q and v as (x, y, theta); the base link 0 is pinned and never
/// moves. Arrays are padded to `capacity` links; entries beyond `n` are
/// masked and kept at zero.
///
/// Geometry convention: consecutive full links are joined by pin joints at
/// d_segment/2 from each center, so full centers sit d_segment apart. The
/// distal pair carries the growth constraint instead of a pin joint and its
/// center separation equals tip_length.
struct VineState {
  int n = 0;
  int capacity = 0;
  double d_segment = 0.0;
  double tip_length = 0.0;
  Eigen::VectorXd q;
  Eigen::VectorXd v;
  bool growth_halted = false;
  bool degenerate_tip = false;

  Eigen::Vector2d link_position(int i) const { return q.segment<2>(3 * i); }
  double link_angle(int i) const { return q[3 * i + 2]; }
  Eigen::Vector2d link_velocity(int i) const { return v.segment<2>(3 * i); }

  /// Decision-variable count of the step QP (base link excluded).
  int free_dof() const { return 3 * (n - 1); }

  /// Bookkept vine length measured from the base joint: half of the base
  /// link, (n - 2) full segments, and the growing tip.
  double total_length() const { return 0.5 * d_segment + (n - 2) * d_segment + tip_length; }

  /// Distal pair separation computed from the configuration; tracks
  /// tip_length up to integration drift.
  double distal_separation() const {
    return (link_position(n - 1) - link_position(n - 2)).norm();
  }

  void validate() const;
};

/// Straight chain along the base heading: links 0..n0-2 at multiples of
/// d_segment from the base pose, tip at tip_length0 beyond link n0-2.
VineState make_initial_state(const Eigen::Vector3d& base_pose, double d_segment, int n0,
                             double tip_length0, int capacity);

/// Re-pads the state arrays to a new capacity (>= n) and re-enables growth.
VineState with_capacity(const VineState& state, int capacity);

/// Physical parameters of one robot; shared across links.
struct PhysParams {
  double mass_kg = 0.0;
  double inertia_kgm2 = 0.0;
  double damping_nms = 0.0;
  double growth_mps = 0.0;        // growth-rate input u
  double collision_radius_m = 0.0;
  double dt_s = 0.0;
  double pressure_pa = 0.0;       // carried for the wrinkling model and serialization
  double tube_radius_m = 0.0;
  StiffnessModel stiffness = LinearStiffnessParams{};

  void validate() const;
};

PhysParams load_params(const std::string& path);
void save_params(const PhysParams& params, const std::string& path);
nlohmann::json params_to_json(const PhysParams& params);
PhysParams params_from_json(const nlohmann::json& j);

}  // namespace vinesim
