#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "vinesim/dynamics.hpp"
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

VineState straight_chain(int n, double d_segment = 0.05, double tip = 0.03) {
  return make_initial_state({0.0, 0.0, 0.0}, d_segment, n, tip, n + 4);
}

VineState random_chain(std::mt19937_64& rng, int n) {
  VineState s = straight_chain(n);
  std::normal_distribution<double> g(0.0, 0.02);
  for (int i = 1; i < n; ++i) {
    s.q[3 * i] += g(rng);
    s.q[3 * i + 1] += g(rng);
    s.q[3 * i + 2] += 4.0 * g(rng);
    s.v[3 * i] = g(rng);
    s.v[3 * i + 1] = g(rng);
    s.v[3 * i + 2] = 4.0 * g(rng);
  }
  return s;
}

}  // namespace

TEST_CASE("revolute residual") {
  SUBCASE("collinear chain at rest is exactly closed") {
    const VineState s = straight_chain(5);
    const Eigen::VectorXd r = revolute_residual(s.q, s.n, s.d_segment);
    REQUIRE(r.size() == 2 * (s.n - 2));
    CHECK(r.lpNorm<Eigen::Infinity>() < 1e-14);
  }

  SUBCASE("displacing a link shows up directly") {
    VineState s = straight_chain(4);
    s.q[3] += 0.01;  // link 1 x
    const Eigen::VectorXd r = revolute_residual(s.q, s.n, s.d_segment);
    // Pair (0,1): r_x = x_0 + d - x_1 + d = -0.01; pair (1,2): +0.01.
    CHECK(r[0] == doctest::Approx(-0.01).epsilon(1e-12));
    CHECK(r[1] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r[2] == doctest::Approx(0.01).epsilon(1e-12));
  }

  SUBCASE("right-angle chain with coincident joints is closed") {
    VineState s = straight_chain(4);
    const double d = 0.5 * s.d_segment;
    // Links 0,1 along +x, link 2 along +y, joint points coincident.
    s.q.segment<3>(0) << 0.0, 0.0, 0.0;
    s.q.segment<3>(3) << s.d_segment, 0.0, 0.0;
    s.q.segment<3>(6) << s.d_segment + d, d, M_PI / 2.0;
    const Eigen::VectorXd r = revolute_residual(s.q, s.n, s.d_segment);
    CHECK(r.lpNorm<Eigen::Infinity>() < 1e-14);
  }
}

TEST_CASE("revolute jacobian") {
  std::mt19937_64 rng(17);
  const VineState s = random_chain(rng, 5);
  const Eigen::MatrixXd jac = revolute_jacobian(s.q, s.n, s.d_segment);

  SUBCASE("linear terms") {
    CHECK(jac(0, 0) == 1.0);
    CHECK(jac(0, 3) == -1.0);
  }
  SUBCASE("theta entry vanishes at zero angle") {
    const VineState z = straight_chain(4);
    const Eigen::MatrixXd j0 = revolute_jacobian(z.q, z.n, z.d_segment);
    CHECK(j0(0, 2) == doctest::Approx(0.0));
  }
  SUBCASE("matches central differences") {
    const double h = 1e-7;
    double worst = 0.0;
    for (int col = 0; col < 3 * s.n; ++col) {
      Eigen::VectorXd qp = s.q, qm = s.q;
      qp[col] += h;
      qm[col] -= h;
      const Eigen::VectorXd fd =
          (revolute_residual(qp, s.n, s.d_segment) - revolute_residual(qm, s.n, s.d_segment)) /
          (2 * h);
      worst = std::max(worst, (fd - jac.col(col)).lpNorm<Eigen::Infinity>());
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("growth rate") {
  VineState s = straight_chain(3);
  const int n = s.n;

  SUBCASE("radial recession gives the speed") {
    s.v.segment<2>(3 * (n - 1)) << 0.7, 0.0;
    CHECK(growth_rate(s.q, s.v, n).rate == doctest::Approx(0.7).epsilon(1e-12));
  }
  SUBCASE("perpendicular motion gives zero") {
    s.v.setZero();
    s.v.segment<2>(3 * (n - 1)) << 0.0, 0.9;
    CHECK(growth_rate(s.q, s.v, n).rate == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("direct substitution") {
    VineState t = straight_chain(2, 1.0, 1.0);
    t.v.segment<2>(3) << 1.0, 1.0;
    CHECK(growth_rate(t.q, t.v, 2).rate == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("degenerate separation is clamped and flagged") {
    VineState t = straight_chain(3);
    t.q.segment<2>(6) = t.q.segment<2>(3);
    const GrowthRate g = growth_rate(t.q, t.v, 3);
    CHECK(g.degenerate);
    CHECK(std::isfinite(g.rate));
  }

  SUBCASE("separation gradient matches central differences") {
    std::mt19937_64 rng(41);
    const VineState t = random_chain(rng, 4);
    const GrowthAxis axis = growth_axis(t.q, t.n);
    const double h = 1e-7;
    // d(sep)/dq is +axis on the tip, -axis on its neighbour.
    for (int link : {t.n - 2, t.n - 1}) {
      for (int c = 0; c < 2; ++c) {
        Eigen::VectorXd qp = t.q, qm = t.q;
        qp[3 * link + c] += h;
        qm[3 * link + c] -= h;
        const double fd =
            (growth_axis(qp, t.n).separation - growth_axis(qm, t.n).separation) / (2 * h);
        const double analytic = (link == t.n - 1 ? 1.0 : -1.0) * axis.axis[c];
        CHECK(analytic == doctest::Approx(fd).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("force assembly") {
  PhysParams params = default_params();

  SUBCASE("straight resting vine has zero forces") {
    const VineState s = straight_chain(5);
    CHECK(assemble_forces(s, params).lpNorm<Eigen::Infinity>() == 0.0);
  }

  SUBCASE("single bent joint produces one torque pair") {
    VineState s = straight_chain(3);
    const double dtheta = 0.2;
    s.q[8] += dtheta;  // bend joint 1 (between links 1 and 2)
    const Eigen::VectorXd f = assemble_forces(s, params);
    const double k = 0.1;
    int nonzero = 0;
    for (int i = 0; i < f.size(); ++i) nonzero += f[i] != 0.0;
    CHECK(nonzero == 2);
    CHECK(f[8] == doctest::Approx(-k * dtheta).epsilon(1e-12));
    CHECK(f[5] == doctest::Approx(k * dtheta).epsilon(1e-12));
  }

  SUBCASE("flipping all angles flips all torque rows") {
    std::mt19937_64 rng(23);
    VineState s = random_chain(rng, 5);
    s.v.setZero();
    VineState flipped = s;
    for (int i = 0; i < s.n; ++i) flipped.q[3 * i + 2] = -s.q[3 * i + 2];
    const Eigen::VectorXd f = assemble_forces(s, params);
    const Eigen::VectorXd g = assemble_forces(flipped, params);
    for (int i = 0; i < s.n; ++i) {
      CHECK(g[3 * i + 2] == doctest::Approx(-f[3 * i + 2]).epsilon(1e-12));
    }
  }
}

TEST_CASE("step problem") {
  PhysParams params = default_params();
  const Scene free_scene = make_free_space_scene();

  SUBCASE("straight vine at rest with zero input solves to zero velocity") {
    // Binary-exact geometry so the constraint residuals are exactly zero.
    const VineState s = straight_chain(4, 0.0625, 0.03125);
    const auto contacts = vine_contacts(s, free_scene, params.collision_radius_m, s.d_segment);
    const StepProblem sp = build_step_problem(s, params, contacts, 0.0);
    const QpSolution sol = qp_solve(sp.qp);
    REQUIRE(sol.status == QpStatus::solved);
    CHECK(sol.z.lpNorm<Eigen::Infinity>() == 0.0);
  }

  SUBCASE("two-link growth separates the distal pair at the input rate") {
    const VineState s = straight_chain(2);
    const double g0 = 0.15;
    const StepProblem sp = build_step_problem(s, params, {}, g0);
    const QpSolution sol = qp_solve(sp.qp);
    REQUIRE(sol.status == QpStatus::solved);
    // Analytic solution of the equality-constrained QP: velocity g0 along
    // the pair axis, nothing else.
    CHECK(sol.z[0] == doctest::Approx(g0).epsilon(1e-10));
    CHECK(sol.z[1] == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(sol.z[2] == doctest::Approx(0.0).epsilon(1e-10));
  }

  SUBCASE("penetrating contact is pushed back out") {
    const Scene wall = make_single_wall_scene();
    VineState s = straight_chain(4);
    // Place the tip just inside the wall face.
    s.q[3 * 3] = 0.36;
    s.q[3 * 3 + 1] = 0.0;
    const auto contacts = vine_contacts(s, wall, params.collision_radius_m, s.d_segment);
    REQUIRE(!contacts.empty());
    const StepProblem sp = build_step_problem(s, params, contacts, 0.0);
    const QpSolution sol = qp_solve(sp.qp);
    REQUIRE(sol.status == QpStatus::solved);
    for (std::size_t i = 0; i < sp.contacts.size(); ++i) {
      const Contact& c = sp.contacts[i];
      const double v_n = c.normal.dot(sol.z.segment<2>(free_index(c.link, 0)));
      CHECK(c.gap + v_n * params.dt_s >= -1e-6);
    }
  }

  SUBCASE("dimension guards") {
    const VineState s = straight_chain(3);
    Contact bogus;
    bogus.link = 99;
    bogus.obstacle = 0;
    CHECK_THROWS_AS(build_step_problem(s, params, {bogus}, 0.0), std::invalid_argument);
  }
}

TEST_CASE("state validation and construction") {
  CHECK_THROWS_AS(make_initial_state({0, 0, 0}, 0.05, 1, 0.02, 8), std::invalid_argument);
  VineState s = straight_chain(3);
  s.tip_length = 0.2;  // > d_segment
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);

  const VineState angled = make_initial_state({0.2, -0.1, 0.7}, 0.04, 4, 0.02, 10);
  CHECK(revolute_residual(angled.q, angled.n, angled.d_segment).lpNorm<Eigen::Infinity>() <
        1e-14);
  CHECK(angled.distal_separation() == doctest::Approx(angled.tip_length).epsilon(1e-12));

  PhysParams bad = default_params();
  bad.mass_kg = -1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("params json round trip") {
  PhysParams p = default_params();
  p.pressure_pa = 2000.0;
  p.tube_radius_m = 0.02;
  WrinklingParams w;
  w.pressure_pa = p.pressure_pa;
  w.tube_radius_m = p.tube_radius_m;
  w.eps_override = 0.08;
  p.stiffness = w;
  const std::string path = "test_params_roundtrip.json";
  save_params(p, path);
  const PhysParams r = load_params(path);
  CHECK(r.mass_kg == p.mass_kg);
  CHECK(r.dt_s == p.dt_s);
  CHECK(stiffness_model_name(r.stiffness) == "wrinkling");
  CHECK(get_stiffness_params(r.stiffness)[0] == doctest::Approx(0.08));
}
