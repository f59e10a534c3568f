#include "vinesim/dynamics.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace vinesim {

namespace {
constexpr double kMinSeparation = 1e-9;
}

void VineState::validate() const {
  if (n < 2) throw std::invalid_argument("vine needs at least 2 links");
  if (capacity < n) throw std::invalid_argument("vine capacity below active link count");
  if (d_segment <= 0.0) throw std::invalid_argument("d_segment must be positive");
  if (!(tip_length > 0.0 && tip_length <= d_segment))
    throw std::invalid_argument("tip_length must lie in (0, d_segment]");
  if (q.size() != 3 * capacity || v.size() != 3 * capacity)
    throw std::invalid_argument("state arrays must be padded to capacity");
}

VineState make_initial_state(const Eigen::Vector3d& base_pose, double d_segment, int n0,
                             double tip_length0, int capacity) {
  if (n0 < 2) throw std::invalid_argument("initial state needs at least 2 links");
  if (capacity < n0) throw std::invalid_argument("capacity below initial link count");
  VineState s;
  s.n = n0;
  s.capacity = capacity;
  s.d_segment = d_segment;
  s.tip_length = tip_length0;
  s.q = Eigen::VectorXd::Zero(3 * capacity);
  s.v = Eigen::VectorXd::Zero(3 * capacity);
  const double th = base_pose.z();
  const Eigen::Vector2d dir(std::cos(th), std::sin(th));
  for (int i = 0; i + 1 < n0; ++i) {
    s.q.segment<2>(3 * i) = base_pose.head<2>() + i * d_segment * dir;
    s.q[3 * i + 2] = th;
  }
  s.q.segment<2>(3 * (n0 - 1)) =
      base_pose.head<2>() + ((n0 - 2) * d_segment + tip_length0) * dir;
  s.q[3 * (n0 - 1) + 2] = th;
  s.validate();
  return s;
}

void PhysParams::validate() const {
  if (mass_kg <= 0.0) throw std::invalid_argument("mass must be positive");
  if (inertia_kgm2 <= 0.0) throw std::invalid_argument("inertia must be positive");
  if (damping_nms < 0.0) throw std::invalid_argument("damping must be nonnegative");
  if (growth_mps < 0.0) throw std::invalid_argument("growth rate must be nonnegative");
  if (collision_radius_m <= 0.0) throw std::invalid_argument("collision radius must be positive");
  if (dt_s <= 0.0) throw std::invalid_argument("dt must be positive");
}

PhysParams params_from_json(const nlohmann::json& j) {
  PhysParams p;
  p.mass_kg = j.at("mass_kg").get<double>();
  p.inertia_kgm2 = j.at("inertia_kgm2").get<double>();
  p.damping_nms = j.at("damping_nms").get<double>();
  p.growth_mps = j.at("growth_mps").get<double>();
  p.dt_s = j.at("dt_s").get<double>();
  const double d_segment = j.at("d_segment_m").get<double>();
  p.collision_radius_m = j.value("collision_radius_m", 0.5 * d_segment);
  p.pressure_pa = j.value("pressure_pa", 0.0);
  p.tube_radius_m = j.value("tube_radius_m", 0.0);
  p.stiffness = stiffness_from_json(j, p.pressure_pa, p.tube_radius_m);
  p.validate();
  return p;
}

nlohmann::json params_to_json(const PhysParams& p) {
  nlohmann::json j = stiffness_to_json(p.stiffness);
  j["mass_kg"] = p.mass_kg;
  j["inertia_kgm2"] = p.inertia_kgm2;
  j["damping_nms"] = p.damping_nms;
  j["growth_mps"] = p.growth_mps;
  j["collision_radius_m"] = p.collision_radius_m;
  j["d_segment_m"] = 2.0 * p.collision_radius_m;
  j["dt_s"] = p.dt_s;
  j["pressure_pa"] = p.pressure_pa;
  j["tube_radius_m"] = p.tube_radius_m;
  return j;
}

PhysParams load_params(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open params file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("params file " + path + ": " + e.what());
  }
  try {
    return params_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("params file " + path + ": " + e.what());
  }
}

void save_params(const PhysParams& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::invalid_argument("cannot write params file: " + path);
  out << params_to_json(p).dump(2) << "\n";
}

Eigen::VectorXd revolute_residual(const Eigen::VectorXd& q, int n, double d_segment) {
  const int pairs = std::max(0, n - 2);
  const double d = 0.5 * d_segment;
  Eigen::VectorXd r(2 * pairs);
  for (int k = 0; k < pairs; ++k) {
    const auto pk = q.segment<2>(3 * k);
    const auto pk1 = q.segment<2>(3 * (k + 1));
    const double tk = q[3 * k + 2];
    const double tk1 = q[3 * (k + 1) + 2];
    r[2 * k] = pk.x() + d * std::cos(tk) - pk1.x() + d * std::cos(tk1);
    r[2 * k + 1] = pk.y() + d * std::sin(tk) - pk1.y() + d * std::sin(tk1);
  }
  return r;
}

Eigen::MatrixXd revolute_jacobian(const Eigen::VectorXd& q, int n, double d_segment) {
  const int pairs = std::max(0, n - 2);
  const double d = 0.5 * d_segment;
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(2 * pairs, 3 * n);
  for (int k = 0; k < pairs; ++k) {
    const double tk = q[3 * k + 2];
    const double tk1 = q[3 * (k + 1) + 2];
    jac(2 * k, 3 * k) = 1.0;
    jac(2 * k, 3 * k + 2) = -d * std::sin(tk);
    jac(2 * k, 3 * (k + 1)) = -1.0;
    jac(2 * k, 3 * (k + 1) + 2) = -d * std::sin(tk1);
    jac(2 * k + 1, 3 * k + 1) = 1.0;
    jac(2 * k + 1, 3 * k + 2) = d * std::cos(tk);
    jac(2 * k + 1, 3 * (k + 1) + 1) = -1.0;
    jac(2 * k + 1, 3 * (k + 1) + 2) = d * std::cos(tk1);
  }
  return jac;
}

GrowthAxis growth_axis(const Eigen::VectorXd& q, int n) {
  GrowthAxis g;
  const Eigen::Vector2d diff = q.segment<2>(3 * (n - 1)) - q.segment<2>(3 * (n - 2));
  g.separation = diff.norm();
  if (g.separation < kMinSeparation) {
    g.degenerate = true;
    g.axis = diff / kMinSeparation;
  } else {
    g.axis = diff / g.separation;
  }
  return g;
}

GrowthRate growth_rate(const Eigen::VectorXd& q, const Eigen::VectorXd& v, int n) {
  const GrowthAxis g = growth_axis(q, n);
  const Eigen::Vector2d dv = v.segment<2>(3 * (n - 1)) - v.segment<2>(3 * (n - 2));
  return {g.axis.dot(dv), g.degenerate};
}

ForceAssembly assemble_forces_eval(const VineState& state, const PhysParams& params) {
  ForceAssembly out;
  out.force = Eigen::VectorXd::Zero(3 * state.n);
  out.joints.reserve(state.n - 1);
  for (int k = 0; k + 1 < state.n; ++k) {
    const double theta = state.q[3 * (k + 1) + 2] - state.q[3 * k + 2];
    const double theta_dot = state.v[3 * (k + 1) + 2] - state.v[3 * k + 2];
    TorqueEval te = joint_torque(params.stiffness, k, theta, theta_dot, params.damping_nms);
    out.force[3 * (k + 1) + 2] += te.torque;
    out.force[3 * k + 2] -= te.torque;
    out.joints.push_back(std::move(te));
  }
  return out;
}

Eigen::VectorXd assemble_forces(const VineState& state, const PhysParams& params) {
  return assemble_forces_eval(state, params).force;
}

StepProblem build_step_problem(const VineState& state, const PhysParams& params,
                               const std::vector<Contact>& contacts, double u_k) {
  const int n = state.n;
  const int nf = state.free_dof();
  const double dt = params.dt_s;

  StepProblem sp;
  sp.n_links = n;
  sp.growth = growth_axis(state.q, n);
  sp.forces = assemble_forces_eval(state, params);
  sp.revolute_jac_full = revolute_jacobian(state.q, n, state.d_segment);

  // Mass matrix over the free coordinates (m, m, I per link).
  sp.qp.Q = Eigen::MatrixXd::Zero(nf, nf);
  for (int link = 1; link < n; ++link) {
    sp.qp.Q(free_index(link, 0), free_index(link, 0)) = params.mass_kg;
    sp.qp.Q(free_index(link, 1), free_index(link, 1)) = params.mass_kg;
    sp.qp.Q(free_index(link, 2), free_index(link, 2)) = params.inertia_kgm2;
  }

  // lin = -(M v_k + F dt) restricted to the free coordinates.
  sp.qp.lin = Eigen::VectorXd::Zero(nf);
  for (int link = 1; link < n; ++link) {
    for (int c = 0; c < 3; ++c) {
      const int fi = free_index(link, c);
      const double mass = c == 2 ? params.inertia_kgm2 : params.mass_kg;
      sp.qp.lin[fi] = -(mass * state.v[3 * link + c] + sp.forces.force[3 * link + c] * dt);
    }
  }

  // Equalities: revolute rows (c(q)/dt + J v = 0) then the growth row
  // ((s - tip)/dt + e.v_rel = u).
  const int pairs = std::max(0, n - 2);
  const Eigen::VectorXd resid = revolute_residual(state.q, n, state.d_segment);
  sp.qp.A_eq = Eigen::MatrixXd::Zero(2 * pairs + 1, nf);
  sp.qp.b_eq = Eigen::VectorXd::Zero(2 * pairs + 1);
  for (int row = 0; row < 2 * pairs; ++row) {
    for (int link = 1; link < n; ++link) {
      for (int c = 0; c < 3; ++c) {
        sp.qp.A_eq(row, free_index(link, c)) = sp.revolute_jac_full(row, 3 * link + c);
      }
    }
    sp.qp.b_eq[row] = -resid[row] / dt;
  }
  const int grow = 2 * pairs;
  sp.qp.A_eq(grow, free_index(n - 1, 0)) = sp.growth.axis.x();
  sp.qp.A_eq(grow, free_index(n - 1, 1)) = sp.growth.axis.y();
  if (n - 2 > 0) {
    sp.qp.A_eq(grow, free_index(n - 2, 0)) = -sp.growth.axis.x();
    sp.qp.A_eq(grow, free_index(n - 2, 1)) = -sp.growth.axis.y();
  }
  sp.qp.b_eq[grow] = u_k - (sp.growth.separation - state.tip_length) / dt;

  // Contacts on movable links: gap/dt + n.v >= 0, i.e. -n.v <= gap/dt.
  sp.contacts.reserve(contacts.size());
  for (const Contact& c : contacts) {
    if (c.link == 0) continue;  // pinned base cannot respond
    if (c.link < 0 || c.link >= n)
      throw std::invalid_argument("step problem: contact link out of range");
    sp.contacts.push_back(c);
  }
  const int mrows = static_cast<int>(sp.contacts.size());
  sp.qp.G_ineq = Eigen::MatrixXd::Zero(mrows, nf);
  sp.qp.h_ineq = Eigen::VectorXd::Zero(mrows);
  for (int i = 0; i < mrows; ++i) {
    const Contact& c = sp.contacts[static_cast<std::size_t>(i)];
    sp.qp.G_ineq(i, free_index(c.link, 0)) = -c.normal.x();
    sp.qp.G_ineq(i, free_index(c.link, 1)) = -c.normal.y();
    sp.qp.h_ineq[i] = c.gap / dt;
  }

  sp.qp.validate();
  return sp;
}

}  // namespace vinesim
