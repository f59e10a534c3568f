#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "vinesim/engine.hpp"

using namespace vinesim;

namespace {

PhysParams default_params() {
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

/// Loss: fixed linear functional of the final snapshot's configuration.
class LinearFinalLoss : public TrajectoryLoss {
public:
  explicit LinearFinalLoss(Eigen::VectorXd coeffs) : coeffs_(std::move(coeffs)) {}

  double value(const Trajectory& traj) const override {
    const VineState& s = traj.states.back();
    return coeffs_.head(3 * s.n).dot(s.q.head(3 * s.n));
  }

  std::vector<StateGrad> state_gradients(const Trajectory& traj) const override {
    std::vector<StateGrad> out(traj.states.size());
    const VineState& s = traj.states.back();
    out.back().d_q = coeffs_.head(3 * s.n);
    out.back().d_v = Eigen::VectorXd::Zero(3 * s.n);
    return out;
  }

private:
  Eigen::VectorXd coeffs_;
};

double rollout_loss(const VineState& init, const PhysParams& p, const Scene& scene,
                    const RolloutConfig& cfg, const TrajectoryLoss& loss) {
  return loss.value(rollout(init, p, scene, cfg, nullptr));
}

/// Chain with prescribed link angles and exactly closed pin joints; the tip
/// extends along its own heading.
VineState bent_chain(const std::vector<double>& angles, double d_segment, double tip,
                     int capacity) {
  const int n = static_cast<int>(angles.size());
  VineState s = make_initial_state({0, 0, angles[0]}, d_segment, n, tip, capacity);
  const double d = 0.5 * d_segment;
  for (int i = 0; i < n; ++i) s.q[3 * i + 2] = angles[static_cast<std::size_t>(i)];
  for (int i = 0; i + 2 < n; ++i) {
    const Eigen::Vector2d joint =
        s.q.segment<2>(3 * i) +
        d * Eigen::Vector2d(std::cos(angles[static_cast<std::size_t>(i)]),
                            std::sin(angles[static_cast<std::size_t>(i)]));
    s.q.segment<2>(3 * (i + 1)) =
        joint + d * Eigen::Vector2d(std::cos(angles[static_cast<std::size_t>(i) + 1]),
                                    std::sin(angles[static_cast<std::size_t>(i) + 1]));
  }
  s.q.segment<2>(3 * (n - 1)) =
      s.q.segment<2>(3 * (n - 2)) +
      tip * Eigen::Vector2d(std::cos(angles[static_cast<std::size_t>(n) - 1]),
                            std::sin(angles[static_cast<std::size_t>(n) - 1]));
  return s;
}

void check_rel(double analytic, double fd, double tol = 1e-3) {
  const double err = std::abs(analytic - fd);
  const double denom = std::max(std::abs(fd), std::abs(analytic));
  CAPTURE(analytic);
  CAPTURE(fd);
  CHECK((err < 1e-8 || err / denom < tol));
}

}  // namespace

TEST_CASE("step fixed point") {
  const PhysParams p = default_params();
  const Scene scene = make_free_space_scene();
  const VineState s = make_initial_state({0, 0, 0}, 0.0625, 4, 0.03125, 8);
  const VineState next = step(s, p, scene, 0.0);
  CHECK((next.q - s.q).lpNorm<Eigen::Infinity>() == 0.0);
  CHECK((next.v - s.v).lpNorm<Eigen::Infinity>() == 0.0);
  CHECK(next.tip_length == s.tip_length);
}

TEST_CASE("free-space growth bookkeeping") {
  const PhysParams p = default_params();
  const Scene scene = make_free_space_scene();
  const VineState init = make_initial_state({0, 0, 0}, 0.05, 2, 0.025, 40);

  RolloutConfig cfg;
  cfg.steps = 100;
  const Trajectory traj = rollout(init, p, scene, cfg);
  REQUIRE(!traj.failed);

  const double expected = init.total_length() + 100 * p.growth_mps * p.dt_s;
  CHECK(traj.states.back().total_length() == doctest::Approx(expected).epsilon(1e-9));
  // Per-step realized growth equals the input within QP tolerance.
  for (const StepDiagnostics& d : traj.diagnostics) {
    CHECK(std::abs(d.realized_growth - p.growth_mps) < 1e-6);
    CHECK(d.max_revolute_residual <= 1e-4 * init.d_segment);
  }
}

TEST_CASE("bent joint decays under restoring moment and damping") {
  PhysParams p = default_params();
  p.growth_mps = 0.0;
  const Scene scene = make_free_space_scene();
  VineState s = make_initial_state({0, 0, 0}, 0.05, 3, 0.04, 6);
  s.q[8] += 0.4;  // bend the distal joint

  const double initial_angle = std::abs(s.q[8] - s.q[5]);
  RolloutConfig cfg;
  cfg.steps = 500;
  const Trajectory traj = rollout(s, p, scene, cfg);
  const VineState& f = traj.states.back();
  const double final_angle = std::abs(f.q[8] - f.q[5]);
  CHECK(final_angle < 0.05 * initial_angle);
}

TEST_CASE("maybe_add_link") {
  SUBCASE("below threshold is the identity") {
    const VineState s = make_initial_state({0, 0, 0}, 0.05, 3, 0.025, 8);
    const VineState out = maybe_add_link(s);
    CHECK(out.n == s.n);
    CHECK(out.tip_length == s.tip_length);
    CHECK((out.q - s.q).lpNorm<Eigen::Infinity>() == 0.0);
  }

  SUBCASE("exact threshold splits and reseeds") {
    VineState s = make_initial_state({0, 0, 0}, 0.05, 3, 0.025, 8);
    s.tip_length = s.d_segment;
    s.q[3 * 2] = s.q[3 * 1] + s.d_segment;  // place tip consistently
    const VineState out = maybe_add_link(s);
    CHECK(out.n == s.n + 1);
    CHECK(out.tip_length == doctest::Approx(1e-6 * s.d_segment));
    const Eigen::VectorXd r = revolute_residual(out.q, out.n, out.d_segment);
    CHECK(r.lpNorm<Eigen::Infinity>() <= 1e-9);
  }

  SUBCASE("insertion on a bent chain closes the new joint exactly") {
    VineState s = bent_chain({0.0, 0.1, 0.2, 0.3}, 0.05, 0.05, 8);
    s.v.segment<3>(3 * (s.n - 1)) << 0.03, -0.02, 0.4;
    const VineState out = maybe_add_link(s);
    REQUIRE(out.n == s.n + 1);
    const Eigen::VectorXd r = revolute_residual(out.q, out.n, out.d_segment);
    CHECK(r.lpNorm<Eigen::Infinity>() <= 1e-9);
    // New tip inherits the former tip's velocity.
    CHECK((out.v.segment<3>(3 * s.n) - s.v.segment<3>(3 * (s.n - 1))).norm() == 0.0);
  }

  SUBCASE("capacity halts growth with a flag") {
    VineState s = make_initial_state({0, 0, 0}, 0.05, 3, 0.025, 3);
    s.tip_length = s.d_segment;
    const VineState out = maybe_add_link(s);
    CHECK(out.n == s.n);
    CHECK(out.growth_halted);
    CHECK_NOTHROW(out.validate());
    CHECK(!with_capacity(out, 8).growth_halted);
  }

  SUBCASE("per-joint stiffness extends to joints created by growth") {
    PhysParams p = default_params();
    p.stiffness = LinearStiffnessParams{Eigen::VectorXd::LinSpaced(2, 0.05, 0.1)};
    const Scene scene = make_free_space_scene();
    const VineState init = make_initial_state({0, 0, 0}, 0.05, 3, 0.045, 12);
    RolloutConfig cfg;
    cfg.steps = 60;  // grows well past the two configured joints
    const Trajectory traj = rollout(init, p, scene, cfg);
    CHECK(traj.states.back().n > 4);
  }
}

TEST_CASE("rollout basics") {
  const PhysParams p = default_params();
  const Scene scene = make_free_space_scene();
  const VineState init = make_initial_state({0, 0, 0}, 0.05, 2, 0.025, 20);

  SUBCASE("zero steps records only the initial snapshot") {
    RolloutConfig cfg;
    cfg.steps = 0;
    const Trajectory traj = rollout(init, p, scene, cfg);
    CHECK(traj.states.size() == 1);
    CHECK(traj.times == std::vector<double>{0.0});
  }

  SUBCASE("equal seeds are bitwise identical") {
    RolloutConfig cfg;
    cfg.steps = 60;
    const Trajectory a = rollout(init, p, scene, cfg);
    const Trajectory b = rollout(init, p, scene, cfg);
    REQUIRE(a.states.size() == b.states.size());
    for (std::size_t i = 0; i < a.states.size(); ++i) {
      CHECK(a.states[i].q == b.states[i].q);
      CHECK(a.states[i].v == b.states[i].v);
      CHECK(a.states[i].tip_length == b.states[i].tip_length);
    }
  }

  SUBCASE("record_every thins snapshots but keeps the final state") {
    RolloutConfig cfg;
    cfg.steps = 10;
    cfg.record_every = 4;
    const Trajectory traj = rollout(init, p, scene, cfg);
    CHECK(traj.snapshot_steps == std::vector<int>{0, 4, 8, 10});
  }

  SUBCASE("growth inserts links along the way") {
    RolloutConfig cfg;
    cfg.steps = 100;
    const Trajectory traj = rollout(init, p, scene, cfg);
    CHECK(traj.states.back().n > init.n);
    bool changed = false;
    for (const auto& d : traj.diagnostics) changed = changed || d.topology_changed;
    CHECK(changed);
    // Snapshots stay valid states with monotone timestamps.
    double prev = -1.0;
    for (std::size_t i = 0; i < traj.states.size(); ++i) {
      CHECK_NOTHROW(traj.states[i].validate());
      CHECK(traj.times[i] > prev);
      prev = traj.times[i];
    }
  }
}

TEST_CASE("rollout_batch equals sequential rollouts exactly") {
  const PhysParams p = default_params();
  const Scene scene = make_cluttered_scene();
  RolloutConfig cfg;
  cfg.steps = 60;
  cfg.workers = 2;

  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> angle(-M_PI / 4, M_PI / 4);
  std::vector<VineState> initials;
  for (int i = 0; i < 8; ++i) {
    Eigen::Vector3d base = scene.base_pose;
    base.z() = angle(rng);
    initials.push_back(make_initial_state(base, 0.05, 2, 0.025, 20));
  }

  BatchTiming timing;
  const auto batch = rollout_batch(initials, p, scene, cfg, &timing);
  REQUIRE(batch.size() == initials.size());
  CHECK(timing.wall_ms > 0.0);
  for (std::size_t i = 0; i < initials.size(); ++i) {
    const Trajectory seq = rollout(initials[i], p, scene, cfg);
    REQUIRE(batch[i].states.size() == seq.states.size());
    for (std::size_t s = 0; s < seq.states.size(); ++s) {
      CHECK(batch[i].states[s].q == seq.states[s].q);
      CHECK(batch[i].states[s].v == seq.states[s].v);
    }
  }

  SUBCASE("recorded states stay penetration-free") {
    for (const Trajectory& traj : batch) {
      REQUIRE(!traj.failed);
      for (const VineState& s : traj.states) {
        for (int link = 0; link < s.n; ++link) {
          for (const Obstacle& o : scene.obstacles) {
            CHECK(signed_distance(s.link_position(link), o) - p.collision_radius_m >=
                  -1e-4);
          }
        }
      }
    }
  }
}

TEST_CASE("batch accepts per-element parameters") {
  const Scene scene = make_free_space_scene();
  RolloutConfig cfg;
  cfg.steps = 20;
  std::vector<VineState> initials;
  std::vector<PhysParams> params;
  for (double u : {0.1, 0.3}) {
    initials.push_back(make_initial_state({0, 0, 0}, 0.05, 2, 0.025, 16));
    PhysParams p = default_params();
    p.growth_mps = u;
    params.push_back(p);
  }
  const auto batch = rollout_batch(initials, params, scene, cfg);
  REQUIRE(batch.size() == 2);
  const double base_len = initials[0].total_length();
  CHECK(batch[0].states.back().total_length() ==
        doctest::Approx(base_len + 20 * 0.1 * 0.01).epsilon(1e-9));
  CHECK(batch[1].states.back().total_length() ==
        doctest::Approx(base_len + 20 * 0.3 * 0.01).epsilon(1e-9));
  CHECK_THROWS_AS(rollout_batch(initials, std::vector<PhysParams>{params[0]}, scene, cfg),
                  std::invalid_argument);
}

TEST_CASE("batch isolates per-element failures") {
  PhysParams p = default_params();
  p.collision_radius_m = 0.05;
  p.growth_mps = 0.0;
  Scene scene;
  scene.bounds = {-2, -2, 2, 2};
  scene.base_pose = {0.75, -0.5, M_PI / 2};
  scene.obstacles = {make_box(0.0, 0.0, 1.0, 1.0), make_box(0.5, 0.0, 1.5, 1.0)};

  // Element 0 is wedged: its tip starts deep inside two overlapping boxes
  // whose nearest faces oppose, so the contact rows are inconsistent.
  VineState wedged = make_initial_state(scene.base_pose, 0.7, 2, 0.6, 4);
  VineState fine = make_initial_state({0.75, -0.5, -M_PI / 2}, 0.1, 2, 0.05, 4);

  RolloutConfig cfg;
  cfg.steps = 3;
  const auto batch = rollout_batch({wedged, fine}, p, scene, cfg);
  CHECK(batch[0].failed);
  CHECK(batch[0].failed_step == 0);
  CHECK(!batch[1].failed);
}

TEST_CASE("loss gradients match finite differences") {
  const Scene scene = make_free_space_scene();

  SUBCASE("constant loss gives zero stiffness gradient") {
    PhysParams p = default_params();
    p.growth_mps = 0.0;
    const VineState init = make_initial_state({0, 0, 0}, 0.0625, 3, 0.03125, 6);
    RolloutConfig cfg;
    cfg.steps = 5;
    // Straight resting vine: the trajectory is constant, so any loss of the
    // final configuration has zero parameter gradients.
    Eigen::VectorXd c = Eigen::VectorXd::Zero(3 * 3);
    c[3 * 2] = 1.0;
    const Gradients g = loss_gradient(init, p, scene, cfg, LinearFinalLoss(c));
    CHECK(g.d_stiffness.lpNorm<Eigen::Infinity>() == 0.0);
    CHECK(g.d_damping == 0.0);
  }

  SUBCASE("growth-rate gradient on a 5-step free-space rollout") {
    PhysParams p = default_params();
    const VineState init = make_initial_state({0, 0, 0.3}, 0.05, 2, 0.025, 8);
    RolloutConfig cfg;
    cfg.steps = 5;
    Eigen::VectorXd c = Eigen::VectorXd::Zero(6);
    c[3] = 1.0;  // final tip x-coordinate
    const LinearFinalLoss loss(c);
    const Gradients g = loss_gradient(init, p, scene, cfg, loss);

    const double h = 1e-6;
    PhysParams up = p, dn = p;
    up.growth_mps += h;
    dn.growth_mps -= h;
    const double fd =
        (rollout_loss(init, up, scene, cfg, loss) - rollout_loss(init, dn, scene, cfg, loss)) /
        (2 * h);
    check_rel(g.d_growth, fd);
    CHECK(!g.topology_event_in_window);
  }

  SUBCASE("all parameter gradients on a bent-joint rollout") {
    PhysParams p = default_params();
    p.growth_mps = 0.05;
    VineState init = make_initial_state({0, 0, 0}, 0.05, 4, 0.03, 8);
    init.q[8] += 0.25;
    init.q[11] -= 0.15;
    init.v[9] = 0.1;
    RolloutConfig cfg;
    cfg.steps = 10;

    std::mt19937_64 rng(5);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::VectorXd c(3 * 4);
    for (int i = 0; i < c.size(); ++i) c[i] = gauss(rng);
    const LinearFinalLoss loss(c);
    const Gradients g = loss_gradient(init, p, scene, cfg, loss);

    // Central differences with parameter-scaled widths.
    auto fd_param = [&](double h, auto&& mutate) {
      PhysParams up = p, dn = p;
      mutate(up, h);
      mutate(dn, -h);
      return (rollout_loss(init, up, scene, cfg, loss) -
              rollout_loss(init, dn, scene, cfg, loss)) /
             (2 * h);
    };

    check_rel(g.d_growth, fd_param(1e-7, [](PhysParams& q, double d) { q.growth_mps += d; }));
    check_rel(g.d_damping,
              fd_param(1e-8, [](PhysParams& q, double d) { q.damping_nms += d; }));
    check_rel(g.d_mass, fd_param(1e-7, [](PhysParams& q, double d) { q.mass_kg += d; }));
    check_rel(g.d_inertia,
              fd_param(1e-9, [](PhysParams& q, double d) { q.inertia_kgm2 += d; }));
    check_rel(g.d_stiffness[0], fd_param(1e-7, [](PhysParams& q, double d) {
                Eigen::VectorXd s = get_stiffness_params(q.stiffness);
                s[0] += d;
                set_stiffness_params(q.stiffness, s);
              }));

    // Initial velocity gradient.
    for (int idx : {3, 5, 9}) {
      const double h = 1e-7;
      VineState up = init, dn = init;
      up.v[idx] += h;
      dn.v[idx] -= h;
      const double fd = (rollout_loss(up, p, scene, cfg, loss) -
                         rollout_loss(dn, p, scene, cfg, loss)) /
                        (2 * h);
      check_rel(g.d_initial_velocity[idx], fd);
    }
  }

  SUBCASE("wrinkling stiffness gradient") {
    PhysParams p = default_params();
    p.growth_mps = 0.0;
    p.pressure_pa = 2000.0;
    p.tube_radius_m = 0.02;
    WrinklingParams w;
    w.pressure_pa = p.pressure_pa;
    w.tube_radius_m = p.tube_radius_m;
    w.eps_override = 0.08;
    p.stiffness = w;

    VineState init = make_initial_state({0, 0, 0}, 0.05, 3, 0.03, 6);
    init.q[8] += 0.5;
    RolloutConfig cfg;
    cfg.steps = 10;
    Eigen::VectorXd c = Eigen::VectorXd::Zero(9);
    c[8] = 1.0;
    const LinearFinalLoss loss(c);
    const Gradients g = loss_gradient(init, p, scene, cfg, loss);

    const double h = 1e-6;
    PhysParams up = p, dn = p;
    std::get<WrinklingParams>(up.stiffness).eps_override = 0.08 + h;
    std::get<WrinklingParams>(dn.stiffness).eps_override = 0.08 - h;
    const double fd =
        (rollout_loss(init, up, scene, cfg, loss) - rollout_loss(init, dn, scene, cfg, loss)) /
        (2 * h);
    check_rel(g.d_stiffness[0], fd);
  }

  SUBCASE("mlp stiffness weight gradients") {
    PhysParams p = default_params();
    p.growth_mps = 0.0;
    NeuralStiffnessParams mlp;
    std::mt19937_64 rng(9);
    std::normal_distribution<double> gauss(0.0, 0.1);
    for (int i = 0; i < mlp.kHidden; ++i) {
      mlp.w1[i] = gauss(rng);
      mlp.b1[i] = gauss(rng);
      mlp.w2[i] = gauss(rng);
    }
    mlp.b2 = 0.0;
    p.stiffness = mlp;

    VineState init = make_initial_state({0, 0, 0}, 0.05, 3, 0.03, 6);
    init.q[8] += 0.4;
    RolloutConfig cfg;
    cfg.steps = 6;
    Eigen::VectorXd c = Eigen::VectorXd::Zero(9);
    c[8] = 1.0;
    c[7] = 0.5;
    const LinearFinalLoss loss(c);
    const Gradients g = loss_gradient(init, p, scene, cfg, loss);

    const double h = 1e-6;
    const Eigen::VectorXd s0 = get_stiffness_params(p.stiffness);
    for (int k : {0, 7, 12, 21, 30}) {
      PhysParams up = p, dn = p;
      Eigen::VectorXd su = s0, sd = s0;
      su[k] += h;
      sd[k] -= h;
      set_stiffness_params(up.stiffness, su);
      set_stiffness_params(dn.stiffness, sd);
      const double fd = (rollout_loss(init, up, scene, cfg, loss) -
                         rollout_loss(init, dn, scene, cfg, loss)) /
                        (2 * h);
      check_rel(g.d_stiffness[k], fd);
    }
  }

  SUBCASE("gradients through a link insertion (event time frozen)") {
    PhysParams p = default_params();
    const VineState init = make_initial_state({0, 0, 0}, 0.05, 2, 0.045, 8);
    RolloutConfig cfg;
    cfg.steps = 8;  // the tip crosses d_segment mid-window
    Eigen::VectorXd c = Eigen::VectorXd::Zero(9);
    c[6] = 1.0;
    const LinearFinalLoss loss(c);

    Tape tape;
    const Trajectory traj = rollout(init, p, scene, cfg, &tape);
    REQUIRE(traj.states.back().n == 3);
    const Gradients g = backward(tape, traj, p, loss);
    CHECK(g.topology_event_in_window);

    const double h = 1e-7;
    PhysParams up = p, dn = p;
    up.growth_mps += h;
    dn.growth_mps -= h;
    const double fd =
        (rollout_loss(init, up, scene, cfg, loss) - rollout_loss(init, dn, scene, cfg, loss)) /
        (2 * h);
    check_rel(g.d_growth, fd, 2e-3);
  }

  SUBCASE("gradients with an active contact") {
    PhysParams p = default_params();
    // Curved vine pressing obliquely into a wall placed right at its tip;
    // sustained growth keeps the tip contact active while the bent chain
    // buckles to absorb the blocked extension.
    VineState init = bent_chain({0.0, 0.12, 0.25, 0.4, 0.55, 0.7}, 0.05, 0.045, 8);
    const Eigen::Vector2d tip = init.link_position(5);
    Scene wall;
    wall.bounds = {-1.0, -1.0, 2.0, 2.0};
    wall.base_pose = {0.0, 0.0, 0.0};
    wall.obstacles = {make_box(tip.x() + p.collision_radius_m + 1e-4, tip.y() - 0.4,
                               tip.x() + p.collision_radius_m + 0.2, tip.y() + 0.4)};
    RolloutConfig cfg;
    cfg.steps = 6;
    Eigen::VectorXd c = Eigen::VectorXd::Zero(18);
    c[3 * 5 + 1] = 1.0;
    c[3 * 4] = -0.5;
    const LinearFinalLoss loss(c);

    Tape tape;
    const Trajectory traj = rollout(init, p, wall, cfg, &tape);
    bool touched = false;
    for (const auto& d : traj.diagnostics) touched = touched || d.active_contacts > 0;
    REQUIRE(touched);
    const Gradients g = backward(tape, traj, p, loss);

    auto fd_param = [&](double h, auto&& mutate) {
      PhysParams up = p, dn = p;
      mutate(up, h);
      mutate(dn, -h);
      return (rollout_loss(init, up, wall, cfg, loss) -
              rollout_loss(init, dn, wall, cfg, loss)) /
             (2 * h);
    };
    check_rel(g.d_stiffness[0], fd_param(1e-7, [](PhysParams& q, double d) {
                Eigen::VectorXd s = get_stiffness_params(q.stiffness);
                s[0] += d;
                set_stiffness_params(q.stiffness, s);
              }),
              2e-3);
    check_rel(g.d_damping,
              fd_param(1e-8, [](PhysParams& q, double d) { q.damping_nms += d; }), 2e-3);
    check_rel(g.d_growth,
              fd_param(1e-7, [](PhysParams& q, double d) { q.growth_mps += d; }), 2e-3);
  }
}
