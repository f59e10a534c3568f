#include "vinesim/engine.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

namespace vinesim {

namespace {

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

Eigen::Vector2d heading(double theta) { return {std::cos(theta), std::sin(theta)}; }
Eigen::Vector2d heading_deriv(double theta) { return {-std::sin(theta), std::cos(theta)}; }

}  // namespace

void RolloutConfig::validate() const {
  if (steps < 0) throw std::invalid_argument("rollout steps must be nonnegative");
  if (batch < 1) throw std::invalid_argument("rollout batch must be at least 1");
  if (record_every < 1) throw std::invalid_argument("record_every must be at least 1");
  if (max_links != 0 && max_links < 2) throw std::invalid_argument("max_links must be at least 2");
}

VineState with_capacity(const VineState& state, int capacity) {
  if (capacity < state.n) throw std::invalid_argument("capacity below active link count");
  VineState out = state;
  out.capacity = capacity;
  out.q = Eigen::VectorXd::Zero(3 * capacity);
  out.v = Eigen::VectorXd::Zero(3 * capacity);
  out.q.head(3 * state.n) = state.q.head(3 * state.n);
  out.v.head(3 * state.n) = state.v.head(3 * state.n);
  out.growth_halted = false;
  return out;
}

VineState step_with_record(const VineState& state, const PhysParams& params, const Scene& scene,
                           double u_k, const QpSolution* warm_start, StepRecord& record) {
  const int n = state.n;
  const double dt = params.dt_s;

  const std::vector<Contact> contacts =
      vine_contacts(state, scene, params.collision_radius_m, state.d_segment);

  const double u_eff = state.growth_halted ? 0.0 : u_k;
  record.pre = state;
  record.pre_dt = dt;
  record.u_input = u_eff;
  record.growth_input_active = !state.growth_halted;
  record.problem = build_step_problem(state, params, contacts, u_eff);

  record.solution = qp_solve(record.problem.qp, warm_start);
  if (record.solution.status != QpStatus::solved) {
    throw StepError("step QP " + to_string(record.solution.status),
                    qp_dump(record.problem.qp, record.solution).dump(2));
  }

  VineState out = state;
  const Eigen::VectorXd& z = record.solution.z;
  for (int link = 1; link < n; ++link) {
    for (int c = 0; c < 3; ++c) {
      const int fi = free_index(link, c);
      out.v[3 * link + c] = z[fi];
      out.q[3 * link + c] = state.q[3 * link + c] + z[fi] * dt;
    }
  }

  const GrowthAxis& ga = record.problem.growth;
  Eigen::Vector2d v_rel = z.segment<2>(free_index(n - 1, 0));
  if (n >= 3) v_rel -= z.segment<2>(free_index(n - 2, 0));
  const double realized = ga.axis.dot(v_rel) + (ga.separation - state.tip_length) / dt;
  out.tip_length = state.tip_length + realized * dt;
  out.degenerate_tip = state.degenerate_tip || ga.degenerate;
  record.realized_growth = realized;

  StepDiagnostics& d = record.diagnostics;
  d.qp_status = record.solution.status;
  d.qp_iterations = record.solution.iterations;
  d.contact_count = static_cast<int>(record.problem.contacts.size());
  d.active_contacts = static_cast<int>(record.solution.active_set.size());
  const Eigen::VectorXd resid = revolute_residual(out.q, n, out.d_segment);
  d.max_revolute_residual = resid.size() > 0 ? resid.lpNorm<Eigen::Infinity>() : 0.0;
  d.realized_growth = realized;
  d.growth_halted = out.growth_halted;
  d.degenerate_tip = ga.degenerate;
  return out;
}

VineState step(const VineState& state, const PhysParams& params, const Scene& scene, double u_k) {
  StepRecord record;
  return step_with_record(state, params, scene, u_k, nullptr, record);
}

VineState maybe_add_link_with_record(const VineState& state, StepRecord& record) {
  record.inserted = false;
  if (state.tip_length < state.d_segment) return state;
  if (state.n >= state.capacity) {
    // At capacity the growth input is frozen from here on; the sliver of
    // length past one segment from the crossing step is dropped to keep the
    // state within its invariants.
    VineState out = state;
    out.growth_halted = true;
    out.tip_length = state.d_segment;
    record.diagnostics.growth_halted = true;
    return out;
  }

  const int n = state.n;
  const int a = n - 2;
  const int t = n - 1;
  const double d = 0.5 * state.d_segment;
  const double theta_a = state.q[3 * a + 2];

  // The grown tube runs from link a's front joint to the tip point. The
  // former tip becomes a full link lying along that segment, which closes
  // the freshly revolute joint exactly, and the tip point itself does not
  // move (the new tip frame keeps marking the everting front).
  const Eigen::Vector2d joint = state.q.segment<2>(3 * a) + d * heading(theta_a);
  const Eigen::Vector2d grown = state.q.segment<2>(3 * t) - joint;
  const double g = grown.norm();
  double tln = g - d;
  const bool reseeded = tln <= 1e-9 * state.d_segment;
  if (reseeded) tln = 1e-6 * state.d_segment;
  const Eigen::Vector2d dir =
      g > 1e-9 * state.d_segment ? (grown / g).eval() : heading(state.q[3 * t + 2]);
  const double theta_t = std::atan2(dir.y(), dir.x());

  VineState out = state;
  out.n = n + 1;
  out.q.segment<2>(3 * t) = joint + d * dir;
  out.q[3 * t + 2] = theta_t;
  out.q.segment<2>(3 * n) = joint + (d + tln) * dir;
  out.q[3 * n + 2] = theta_t;
  out.v.segment<3>(3 * n) = state.v.segment<3>(3 * t);
  out.tip_length = tln;

  record.inserted = true;
  record.insertion_reseeded = reseeded;
  record.ins_theta_a = theta_a;
  record.ins_theta_t = theta_t;
  record.ins_tip_length = tln;
  record.diagnostics.topology_changed = true;
  return out;
}

VineState maybe_add_link(const VineState& state) {
  StepRecord record;
  return maybe_add_link_with_record(state, record);
}

Trajectory rollout(const VineState& initial, const PhysParams& params, const Scene& scene,
                   const RolloutConfig& config, Tape* tape) {
  config.validate();
  params.validate();
  scene.validate();
  initial.validate();

  PhysParams resolved = params;
  if (config.dt_s > 0.0) resolved.dt_s = config.dt_s;
  if (resolved.growth_mps * resolved.dt_s >= initial.d_segment)
    throw std::invalid_argument("growth per step must stay below d_segment");

  VineState state = initial;
  if (config.max_links > 0 && config.max_links != state.capacity)
    state = with_capacity(state, config.max_links);

  Trajectory traj;
  traj.times.push_back(0.0);
  traj.snapshot_steps.push_back(0);
  traj.states.push_back(state);

  const double t0 = now_ms();
  QpSolution warm;
  bool have_warm = false;
  for (int t = 0; t < config.steps; ++t) {
    StepRecord rec;
    VineState next;
    try {
      next = step_with_record(state, resolved, scene, resolved.growth_mps,
                              have_warm ? &warm : nullptr, rec);
    } catch (StepError& e) {
      traj.failed = true;
      traj.failed_step = t;
      traj.error = e.what();
      throw StepError(e.what(), e.dump_json, t);
    }
    warm = rec.solution;
    have_warm = true;
    state = maybe_add_link_with_record(next, rec);
    traj.diagnostics.push_back(rec.diagnostics);
    if (tape != nullptr) tape->push_back(std::move(rec));
    if ((t + 1) % config.record_every == 0 || t + 1 == config.steps) {
      traj.times.push_back((t + 1) * resolved.dt_s);
      traj.snapshot_steps.push_back(t + 1);
      traj.states.push_back(state);
    }
  }
  traj.wall_ms = now_ms() - t0;
  return traj;
}

namespace {

std::vector<Trajectory> rollout_batch_impl(const std::vector<VineState>& initials,
                                           const std::vector<const PhysParams*>& params,
                                           const Scene& scene, const RolloutConfig& config,
                                           BatchTiming* timing) {
  const std::size_t batch = initials.size();
  std::vector<Trajectory> out(batch);
  const double t0 = now_ms();

  auto run_one = [&](std::size_t i) {
    try {
      out[i] = rollout(initials[i], *params[i], scene, config, nullptr);
    } catch (const StepError& e) {
      out[i].failed = true;
      out[i].failed_step = e.step_index;
      out[i].error = e.what();
      out[i].error_dump = e.dump_json;
    }
  };

  const int workers = std::max(1, config.workers);
  if (workers == 1 || batch <= 1) {
    for (std::size_t i = 0; i < batch; ++i) run_one(i);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (batch + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
      const std::size_t lo = w * chunk;
      const std::size_t hi = std::min(batch, lo + chunk);
      if (lo >= hi) break;
      pool.emplace_back([&, lo, hi] {
        for (std::size_t i = lo; i < hi; ++i) run_one(i);
      });
    }
    for (auto& th : pool) th.join();
  }

  if (timing != nullptr) {
    timing->wall_ms = now_ms() - t0;
    timing->ms_per_iteration = config.steps > 0 ? timing->wall_ms / config.steps : 0.0;
    timing->ms_per_iteration_per_element =
        batch > 0 ? timing->ms_per_iteration / static_cast<double>(batch) : 0.0;
  }
  return out;
}

}  // namespace

std::vector<Trajectory> rollout_batch(const std::vector<VineState>& initials,
                                      const PhysParams& params, const Scene& scene,
                                      const RolloutConfig& config, BatchTiming* timing) {
  std::vector<const PhysParams*> ptrs(initials.size(), &params);
  return rollout_batch_impl(initials, ptrs, scene, config, timing);
}

std::vector<Trajectory> rollout_batch(const std::vector<VineState>& initials,
                                      const std::vector<PhysParams>& params, const Scene& scene,
                                      const RolloutConfig& config, BatchTiming* timing) {
  if (params.size() != initials.size())
    throw std::invalid_argument("rollout_batch: params list size mismatch");
  std::vector<const PhysParams*> ptrs(initials.size());
  for (std::size_t i = 0; i < initials.size(); ++i) ptrs[i] = &params[i];
  return rollout_batch_impl(initials, ptrs, scene, config, timing);
}

namespace {

// Maps the adjoint of the state after a link insertion back onto the state
// before it (the post-step state). The insertion is a fixed event; its
// geometry is differentiable given the event index. The pre-insertion tip
// bookkeeping only gates the event, so its adjoint terminates here.
void insertion_backward(const StepRecord& rec, Eigen::VectorXd& qbar, Eigen::VectorXd& vbar,
                        double& tipbar) {
  const int n = rec.pre.n;  // link count before insertion (== after the step)
  const int a = n - 2;
  const int t = n - 1;
  const double d = 0.5 * rec.pre.d_segment;

  // Replay the post-step geometry the insertion consumed.
  auto post_coord = [&](int link, int c) {
    const int fi = free_index(link, c);
    double x = rec.pre.q[3 * link + c];
    if (fi >= 0) x += rec.solution.z[fi] * rec.pre_dt;
    return x;
  };
  const Eigen::Vector2d p_a(post_coord(a, 0), post_coord(a, 1));
  const double theta_a = rec.ins_theta_a;
  const Eigen::Vector2d joint = p_a + d * heading(theta_a);
  const Eigen::Vector2d p_t_old(post_coord(t, 0), post_coord(t, 1));
  const Eigen::Vector2d u = p_t_old - joint;
  const double g = u.norm();
  const Eigen::Vector2d e = g > 0.0 ? (u / g).eval() : heading(rec.ins_theta_t);
  const Eigen::Matrix2d proj =
      (Eigen::Matrix2d::Identity() - e * e.transpose()) / std::max(g, 1e-12);
  const Eigen::Vector2d perp(-e.y(), e.x());

  const Eigen::Vector2d w_t = qbar.segment<2>(3 * t);
  const Eigen::Vector2d w_n = qbar.segment<2>(3 * n);
  const double theta_t_bar = qbar[3 * t + 2];
  const double theta_n_bar = qbar[3 * n + 2];
  const Eigen::Vector3d v_n_bar = vbar.segment<3>(3 * n);
  const double tip_bar_post = tipbar;

  Eigen::VectorXd qb = qbar.head(3 * n).eval();
  Eigen::VectorXd vb = vbar.head(3 * n).eval();
  // The former tip's pose was overwritten by the insertion geometry.
  qb.segment<2>(3 * t).setZero();
  qb[3 * t + 2] = 0.0;

  Eigen::Vector2d ubar = d * proj * w_t;
  if (rec.insertion_reseeded) {
    ubar += (d + rec.ins_tip_length) * proj * w_n;
  } else {
    ubar += w_n;  // p_N = joint + u exactly
    ubar += tip_bar_post * e;
  }
  ubar += (theta_t_bar + theta_n_bar) / std::max(g, 1e-12) * perp;

  const Eigen::Vector2d joint_bar = w_t + w_n - ubar;
  qb.segment<2>(3 * t) += ubar;  // p_t_old
  qb.segment<2>(3 * a) += joint_bar;
  qb[3 * a + 2] += d * heading_deriv(theta_a).dot(joint_bar);
  vb.segment<3>(3 * t) += v_n_bar;

  qbar = std::move(qb);
  vbar = std::move(vb);
  tipbar = 0.0;
}

struct ParamAdjoints {
  double mass = 0.0;
  double inertia = 0.0;
  double damping = 0.0;
  double growth = 0.0;
  Eigen::VectorXd stiffness;
};

// Adjoint of one recorded step: consumes the adjoint of the post-step state
// and produces the adjoint of the pre-step state, accumulating parameter
// sensitivities along the way.
void step_backward(const StepRecord& rec, const PhysParams& params, Eigen::VectorXd& qbar,
                   Eigen::VectorXd& vbar, double& tipbar, ParamAdjoints& pbar) {
  const VineState& pre = rec.pre;
  const int n = pre.n;
  const int nf = pre.free_dof();
  const double dt = params.dt_s;
  const Eigen::VectorXd& z = rec.solution.z;
  const GrowthAxis& ga = rec.problem.growth;
  const Eigen::Vector2d e = ga.axis;
  const double sep = ga.degenerate ? 1e-9 : ga.separation;

  // Adjoint of the QP primal from v_{k+1}, q_{k+1} and the tip update.
  Eigen::VectorXd zbar = Eigen::VectorXd::Zero(nf);
  for (int link = 1; link < n; ++link) {
    for (int c = 0; c < 3; ++c) {
      const int fi = free_index(link, c);
      zbar[fi] = vbar[3 * link + c] + dt * qbar[3 * link + c];
    }
  }
  zbar.segment<2>(free_index(n - 1, 0)) += tipbar * dt * e;
  if (n >= 3) zbar.segment<2>(free_index(n - 2, 0)) -= tipbar * dt * e;

  // New adjoints for the pre-step state.
  Eigen::VectorXd qb = qbar.head(3 * n).eval();  // identity part of q_{k+1} = q_k + ...
  Eigen::VectorXd vb = Eigen::VectorXd::Zero(3 * n);
  double tb = 0.0;

  // tip_{k+1} = s(q_k) + dt * e(q_k).v_rel
  Eigen::Vector2d v_rel = z.segment<2>(free_index(n - 1, 0));
  if (n >= 3) v_rel -= z.segment<2>(free_index(n - 2, 0));
  const Eigen::Matrix2d proj = (Eigen::Matrix2d::Identity() - e * e.transpose()) / sep;
  const Eigen::Vector2d tip_q = tipbar * (e + dt * proj * v_rel);
  qb.segment<2>(3 * (n - 1)) += tip_q;
  qb.segment<2>(3 * (n - 2)) -= tip_q;

  const QpGradients qpg = qp_solve_backward(rec.problem.qp, rec.solution, zbar);

  // Mass matrix (diagonal) and lin = -(M v_k + F dt).
  for (int link = 1; link < n; ++link) {
    const int fx = free_index(link, 0);
    const int fy = free_index(link, 1);
    const int ft = free_index(link, 2);
    pbar.mass += qpg.d_Q(fx, fx) + qpg.d_Q(fy, fy);
    pbar.inertia += qpg.d_Q(ft, ft);
    for (int c = 0; c < 3; ++c) {
      const int fi = free_index(link, c);
      const double mass_c = c == 2 ? params.inertia_kgm2 : params.mass_kg;
      vb[3 * link + c] += -mass_c * qpg.d_lin[fi];
      const double dm = -pre.v[3 * link + c] * qpg.d_lin[fi];
      if (c == 2) {
        pbar.inertia += dm;
      } else {
        pbar.mass += dm;
      }
    }
  }

  // Stiffness and damping forces; F enters lin on the free theta rows with
  // weight -dt.
  std::vector<double> fbar(static_cast<std::size_t>(n), 0.0);
  for (int link = 1; link < n; ++link) {
    fbar[static_cast<std::size_t>(link)] = -dt * qpg.d_lin[free_index(link, 2)];
  }
  for (int k = 0; k + 1 < n; ++k) {
    const TorqueEval& te = rec.problem.forces.joints[static_cast<std::size_t>(k)];
    const double taubar =
        fbar[static_cast<std::size_t>(k) + 1] - fbar[static_cast<std::size_t>(k)];
    qb[3 * (k + 1) + 2] += taubar * te.d_theta;
    qb[3 * k + 2] -= taubar * te.d_theta;
    vb[3 * (k + 1) + 2] += taubar * te.d_theta_dot;
    vb[3 * k + 2] -= taubar * te.d_theta_dot;
    pbar.damping += taubar * te.d_damping;
    pbar.stiffness += taubar * te.d_params;
  }

  // Revolute Jacobian entries depend on the link angles.
  const double d_half = 0.5 * pre.d_segment;
  const int pairs = std::max(0, n - 2);
  for (int k = 0; k < pairs; ++k) {
    for (int link : {k, k + 1}) {
      if (link == 0) continue;  // pinned columns are absent from A_eq
      const int col = free_index(link, 2);
      const double th = pre.q[3 * link + 2];
      qb[3 * link + 2] += qpg.d_A_eq(2 * k, col) * (-d_half * std::cos(th)) +
                          qpg.d_A_eq(2 * k + 1, col) * (-d_half * std::sin(th));
    }
  }

  // Growth row entries (+-e) and right-hand sides.
  const int grow = 2 * pairs;
  Eigen::Vector2d ebar(qpg.d_A_eq(grow, free_index(n - 1, 0)),
                       qpg.d_A_eq(grow, free_index(n - 1, 1)));
  if (n >= 3) {
    ebar.x() -= qpg.d_A_eq(grow, free_index(n - 2, 0));
    ebar.y() -= qpg.d_A_eq(grow, free_index(n - 2, 1));
  }
  const Eigen::Vector2d grow_q = proj * ebar;
  qb.segment<2>(3 * (n - 1)) += grow_q;
  qb.segment<2>(3 * (n - 2)) -= grow_q;

  // b_eq: revolute rows are -c(q)/dt, the growth row is u - (s - tip)/dt.
  if (pairs > 0) {
    qb += (-1.0 / dt) * rec.problem.revolute_jac_full.transpose() * qpg.d_b_eq.head(2 * pairs);
  }
  const double gb = qpg.d_b_eq[grow];
  if (rec.growth_input_active) pbar.growth += gb;
  qb.segment<2>(3 * (n - 1)) += (-gb / dt) * e;
  qb.segment<2>(3 * (n - 2)) -= (-gb / dt) * e;
  tb += gb / dt;

  // Contact rows: G has -normal on the link's x,y columns, h = gap/dt.
  for (std::size_t i = 0; i < rec.problem.contacts.size(); ++i) {
    const Contact& c = rec.problem.contacts[i];
    const Eigen::Vector2d nbar(-qpg.d_G_ineq(static_cast<int>(i), free_index(c.link, 0)),
                               -qpg.d_G_ineq(static_cast<int>(i), free_index(c.link, 1)));
    qb.segment<2>(3 * c.link) += c.normal_jacobian.transpose() * nbar +
                                 (qpg.d_h_ineq[static_cast<int>(i)] / dt) * c.normal;
  }

  qbar = std::move(qb);
  vbar = std::move(vb);
  tipbar = tb;
}

}  // namespace

Gradients backward(const Tape& tape, const Trajectory& trajectory, const PhysParams& params,
                   const TrajectoryLoss& loss, const GradientRequest& request) {
  const std::vector<StateGrad> seeds = loss.state_gradients(trajectory);
  if (seeds.size() != trajectory.states.size())
    throw std::invalid_argument("loss must provide one gradient per recorded snapshot");

  Gradients g;
  g.loss = loss.value(trajectory);
  g.d_stiffness = Eigen::VectorXd::Zero(stiffness_param_count(params.stiffness));

  const int total_steps = static_cast<int>(tape.size());
  int n_last = trajectory.states.front().n;
  if (total_steps > 0) n_last = tape.back().pre.n + (tape.back().inserted ? 1 : 0);

  Eigen::VectorXd qbar = Eigen::VectorXd::Zero(3 * n_last);
  Eigen::VectorXd vbar = Eigen::VectorXd::Zero(3 * n_last);
  double tipbar = 0.0;
  ParamAdjoints pbar;
  pbar.stiffness = Eigen::VectorXd::Zero(g.d_stiffness.size());

  int snap = static_cast<int>(trajectory.states.size()) - 1;
  for (int t = total_steps - 1; t >= 0; --t) {
    const int state_step = t + 1;
    if (snap >= 0 && trajectory.snapshot_steps[static_cast<std::size_t>(snap)] == state_step) {
      const StateGrad& s = seeds[static_cast<std::size_t>(snap)];
      if (s.d_q.size() > 0) qbar += s.d_q;
      if (s.d_v.size() > 0) vbar += s.d_v;
      tipbar += s.d_tip;
      --snap;
    }
    const StepRecord& rec = tape[static_cast<std::size_t>(t)];
    g.topology_event_in_window = g.topology_event_in_window || rec.inserted;
    if (rec.inserted) insertion_backward(rec, qbar, vbar, tipbar);
    step_backward(rec, params, qbar, vbar, tipbar, pbar);
  }
  if (snap == 0 && seeds.front().d_v.size() > 0) vbar += seeds.front().d_v;

  if (request.mass) g.d_mass = pbar.mass;
  if (request.inertia) g.d_inertia = pbar.inertia;
  if (request.damping) g.d_damping = pbar.damping;
  if (request.growth) g.d_growth = pbar.growth;
  if (request.stiffness) g.d_stiffness = pbar.stiffness;
  if (request.initial_velocity) g.d_initial_velocity = vbar;
  return g;
}

Gradients loss_gradient(const VineState& initial, const PhysParams& params, const Scene& scene,
                        const RolloutConfig& config, const TrajectoryLoss& loss,
                        const GradientRequest& request) {
  Tape tape;
  const Trajectory traj = rollout(initial, params, scene, config, &tape);
  PhysParams resolved = params;
  if (config.dt_s > 0.0) resolved.dt_s = config.dt_s;
  return backward(tape, traj, resolved, loss, request);
}

void append_trajectory_csv(std::string& out, int trial_id, const Trajectory& trajectory) {
  char buf[160];
  for (std::size_t s = 0; s < trajectory.states.size(); ++s) {
    const VineState& st = trajectory.states[s];
    for (int link = 0; link < st.n; ++link) {
      std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%d,%.17g,%.17g,%.17g\n", trial_id,
                    trajectory.snapshot_steps[s], trajectory.times[s], link, st.q[3 * link],
                    st.q[3 * link + 1], st.q[3 * link + 2]);
      out += buf;
    }
  }
}

void write_trajectory_csv(const std::string& path, const std::vector<Trajectory>& trajectories) {
  std::string out = "trial_id,step,time_s,link_index,x_m,y_m,theta_rad\n";
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    append_trajectory_csv(out, static_cast<int>(i), trajectories[i]);
  }
  std::ofstream f(path);
  if (!f) throw std::invalid_argument("cannot write trajectory csv: " + path);
  f << out;
}

}  // namespace vinesim
