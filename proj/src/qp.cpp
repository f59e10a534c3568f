#include "vinesim/qp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>

#include <nlohmann/json.hpp>

namespace vinesim {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kMachEps = std::numeric_limits<double>::epsilon();

std::vector<double> to_std(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

std::vector<std::vector<double>> to_std(const Eigen::MatrixXd& m) {
  std::vector<std::vector<double>> out(m.rows());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    out[i].assign(m.row(i).begin(), m.row(i).end());
  }
  return out;
}

// Working state of the Goldfarb-Idnani dual active-set method. J starts as
// the inverse Cholesky factor of Q; Givens rotations keep its trailing
// columns spanning the Q-orthogonal complement of the active normals, and R
// is the triangular factor of the active normals in that basis.
struct GiWorkspace {
  Eigen::MatrixXd J;
  Eigen::MatrixXd R;
  Eigen::VectorXd d, z, r, u, np;
  std::vector<int> active;  // global ids: [0, p) equalities, [p, p+m) inequalities
  double r_norm = 1.0;

  int iq() const { return static_cast<int>(active.size()); }

  void compute_directions(int n) {
    d.noalias() = J.transpose() * np;
    const int q = iq();
    z.noalias() = J.rightCols(n - q) * d.tail(n - q);
    if (q > 0) {
      r.head(q) = R.topLeftCorner(q, q).triangularView<Eigen::Upper>().solve(d.head(q));
    }
  }

  // Rotates the new constraint's coordinates into the first iq+1 slots and
  // appends the column to R. Returns false if the normal is linearly
  // dependent on the active set.
  bool add_constraint(int id, int n) {
    const int q = iq();
    for (int j = n - 1; j >= q + 1; --j) {
      const double a = d[j - 1];
      const double b = d[j];
      const double h = std::hypot(a, b);
      if (h == 0.0) continue;
      const double cc = a / h;
      const double ss = b / h;
      d[j - 1] = h;
      d[j] = 0.0;
      for (Eigen::Index k = 0; k < J.rows(); ++k) {
        const double t1 = J(k, j - 1);
        const double t2 = J(k, j);
        J(k, j - 1) = cc * t1 + ss * t2;
        J(k, j) = -ss * t1 + cc * t2;
      }
    }
    active.push_back(id);
    R.col(q).head(q + 1) = d.head(q + 1);
    r_norm = std::max(r_norm, std::abs(d[q]));
    return std::abs(d[q]) > 128.0 * kMachEps * r_norm;
  }

  // Removes the active constraint at position pos and restores R to upper
  // triangular form. The pending candidate dual parked at u[iq] shifts down
  // with everything else.
  void delete_constraint(int pos) {
    const int q = iq();
    for (int i = pos; i < q - 1; ++i) {
      active[static_cast<std::size_t>(i)] = active[static_cast<std::size_t>(i) + 1];
      u[i] = u[i + 1];
      R.col(i) = R.col(i + 1);
    }
    u[q - 1] = u[q];
    active.pop_back();
    const int q2 = iq();
    for (int j = pos; j < q2; ++j) {
      const double a = R(j, j);
      const double b = R(j + 1, j);
      const double h = std::hypot(a, b);
      if (h == 0.0) continue;
      const double cc = a / h;
      const double ss = b / h;
      R(j, j) = h;
      R(j + 1, j) = 0.0;
      for (int k = j + 1; k < q2; ++k) {
        const double t1 = R(j, k);
        const double t2 = R(j + 1, k);
        R(j, k) = cc * t1 + ss * t2;
        R(j + 1, k) = -ss * t1 + cc * t2;
      }
      for (Eigen::Index k = 0; k < J.rows(); ++k) {
        const double t1 = J(k, j);
        const double t2 = J(k, j + 1);
        J(k, j) = cc * t1 + ss * t2;
        J(k, j + 1) = -ss * t1 + cc * t2;
      }
    }
  }
};

}  // namespace

void QpProblem::validate() const {
  const int n = vars();
  if (Q.rows() != n || Q.cols() != n) throw std::invalid_argument("qp: Q dimension mismatch");
  if (A_eq.rows() != b_eq.size() || (A_eq.rows() > 0 && A_eq.cols() != n))
    throw std::invalid_argument("qp: equality dimension mismatch");
  if (G_ineq.rows() != h_ineq.size() || (G_ineq.rows() > 0 && G_ineq.cols() != n))
    throw std::invalid_argument("qp: inequality dimension mismatch");
}

std::string to_string(QpStatus status) {
  switch (status) {
    case QpStatus::solved: return "solved";
    case QpStatus::infeasible: return "infeasible";
    case QpStatus::max_iter: return "max_iter";
  }
  return "unknown";
}

void QpSolution::fill_residuals(const QpProblem& p) {
  stationarity_residual =
      (p.Q * z + p.lin + p.A_eq.transpose() * nu + p.G_ineq.transpose() * mu)
          .lpNorm<Eigen::Infinity>();
  equality_residual =
      p.equalities() > 0 ? (p.A_eq * z - p.b_eq).lpNorm<Eigen::Infinity>() : 0.0;
  if (p.inequalities() > 0) {
    const Eigen::VectorXd slack = p.G_ineq * z - p.h_ineq;
    inequality_residual = std::max(0.0, slack.maxCoeff());
    complementarity_residual = (mu.array() * slack.array()).abs().maxCoeff();
  } else {
    inequality_residual = 0.0;
    complementarity_residual = 0.0;
  }
}

QpSolution qp_solve(const QpProblem& problem, const QpSolution* warm_start, int max_iterations) {
  problem.validate();
  const int n = problem.vars();
  const int p = problem.equalities();
  const int m = problem.inequalities();
  if (max_iterations <= 0) max_iterations = 50 + 20 * (p + m);

  QpSolution sol;
  sol.nu = Eigen::VectorXd::Zero(p);
  sol.mu = Eigen::VectorXd::Zero(m);

  Eigen::LLT<Eigen::MatrixXd> llt(problem.Q);
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument("qp: Q is not positive definite");

  GiWorkspace w;
  w.J = llt.matrixU().solve(Eigen::MatrixXd::Identity(n, n));  // L^{-T}
  w.R.setZero(n, n);
  w.d.setZero(n);
  w.z.setZero(n);
  w.r.setZero(n);
  w.u.setZero(p + m + 1);
  w.active.reserve(p + m);

  Eigen::VectorXd x = -llt.solve(problem.lin);

  const double feas_scale =
      1.0 + std::max(p > 0 ? problem.b_eq.cwiseAbs().maxCoeff() : 0.0,
                     m > 0 ? problem.h_ineq.cwiseAbs().maxCoeff() : 0.0);
  const double feas_tol = 1e-10 * feas_scale;

  int iterations = 0;
  auto finish = [&](QpStatus status) {
    sol.status = status;
    sol.z = x;
    sol.iterations = iterations;
    for (int k = 0; k < w.iq(); ++k) {
      const int id = w.active[static_cast<std::size_t>(k)];
      if (id < p) {
        sol.nu[id] = -w.u[k];
      } else {
        sol.mu[id - p] = w.u[k];
        sol.active_set.push_back(id - p);
      }
    }
    std::sort(sol.active_set.begin(), sol.active_set.end());
    sol.fill_residuals(problem);
    return sol;
  };

  // Equality phase: activate every equality row, full steps only.
  for (int i = 0; i < p; ++i) {
    w.np = problem.A_eq.row(i);
    w.compute_directions(n);
    const double viol = problem.b_eq[i] - w.np.dot(x);
    const double ztnp = w.z.dot(w.np);
    if (std::abs(ztnp) <= 1e-14 * (1.0 + w.np.norm() * w.z.norm())) {
      // Normal lies in the span of the active set: consistent rows are
      // redundant and skipped, inconsistent rows certify infeasibility.
      if (std::abs(viol) > feas_tol) {
        sol.infeasibility = std::abs(viol);
        return finish(QpStatus::infeasible);
      }
      continue;
    }
    const double t2 = viol / ztnp;
    x += t2 * w.z;
    if (w.iq() > 0) w.u.head(w.iq()) -= t2 * w.r.head(w.iq());
    w.u[w.iq()] = t2;
    if (!w.add_constraint(i, n)) {
      sol.infeasibility = std::abs(viol);
      return finish(QpStatus::infeasible);
    }
    ++iterations;
  }

  std::vector<int> hint;
  if (warm_start != nullptr) {
    hint = warm_start->active_set;
    std::sort(hint.begin(), hint.end());
  }

  // Inequality phase.
  while (true) {
    if (iterations >= max_iterations) return finish(QpStatus::max_iter);

    // Most violated inequality; warm-start hints are examined first so a
    // good hint reproduces the previous active set with fewer iterations.
    int ip = -1;
    double worst = feas_tol;
    for (int id : hint) {
      if (id < 0 || id >= m) continue;
      const double s = problem.G_ineq.row(id).dot(x) - problem.h_ineq[id];
      if (s > worst) {
        worst = s;
        ip = id;
      }
    }
    if (ip < 0) {
      for (int i = 0; i < m; ++i) {
        const double s = problem.G_ineq.row(i).dot(x) - problem.h_ineq[i];
        if (s > worst) {
          worst = s;
          ip = i;
        }
      }
    }
    if (ip < 0) return finish(QpStatus::solved);

    w.np = -problem.G_ineq.row(ip);
    w.u[w.iq()] = 0.0;

    while (true) {
      if (iterations >= max_iterations) return finish(QpStatus::max_iter);
      ++iterations;
      w.compute_directions(n);

      // Dual blocking step over active inequalities.
      double t1 = kInf;
      int blocking = -1;
      for (int k = 0; k < w.iq(); ++k) {
        if (w.active[static_cast<std::size_t>(k)] < p) continue;
        if (w.r[k] > 0.0 && w.u[k] / w.r[k] < t1) {
          t1 = w.u[k] / w.r[k];
          blocking = k;
        }
      }

      const double viol = problem.G_ineq.row(ip).dot(x) - problem.h_ineq[ip];
      const double ztnp = w.z.dot(w.np);
      const double t2 =
          ztnp > 1e-14 * (1.0 + w.z.norm() * w.np.norm()) ? viol / ztnp : kInf;

      const double t = std::min(t1, t2);
      if (t == kInf) {
        sol.infeasibility = viol;
        return finish(QpStatus::infeasible);
      }

      if (t2 == kInf) {
        // Step in the dual only, drop the blocking constraint, retry.
        w.u.head(w.iq()) -= t * w.r.head(w.iq());
        w.u[w.iq()] += t;
        w.delete_constraint(blocking);
        continue;
      }

      x += t * w.z;
      w.u.head(w.iq()) -= t * w.r.head(w.iq());
      w.u[w.iq()] += t;

      if (t == t2) {
        const double unew = w.u[w.iq()];
        if (!w.add_constraint(p + ip, n)) return finish(QpStatus::max_iter);
        w.u[w.iq() - 1] = unew;
        break;  // constraint satisfied; look for the next violation
      }
      w.delete_constraint(blocking);
    }
  }
}

std::vector<QpSolution> qp_solve_batch(const std::vector<QpProblem>& problems, int workers) {
  std::vector<QpSolution> out(problems.size());
  workers = std::max(1, workers);
  if (workers == 1 || problems.size() <= 1) {
    for (std::size_t i = 0; i < problems.size(); ++i) out[i] = qp_solve(problems[i]);
    return out;
  }
  std::vector<std::thread> pool;
  std::size_t chunk = (problems.size() + workers - 1) / workers;
  for (int t = 0; t < workers; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(problems.size(), lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&, lo, hi] {
      for (std::size_t i = lo; i < hi; ++i) out[i] = qp_solve(problems[i]);
    });
  }
  for (auto& th : pool) th.join();
  return out;
}

QpGradients qp_solve_backward(const QpProblem& problem, const QpSolution& solution,
                              const Eigen::VectorXd& dloss_dz, double dual_tol,
                              double primal_tol) {
  if (solution.status != QpStatus::solved)
    throw std::invalid_argument("qp backward requires a solved problem");
  const int n = problem.vars();
  const int p = problem.equalities();
  const int m = problem.inequalities();
  if (dloss_dz.size() != n) throw std::invalid_argument("qp backward: gradient size mismatch");

  // Strictly active inequalities; weakly active rows are treated as inactive.
  std::vector<int> act;
  for (int i : solution.active_set) {
    const double gap = problem.G_ineq.row(i).dot(solution.z) - problem.h_ineq[i];
    if (solution.mu[i] > dual_tol || std::abs(gap) > primal_tol) act.push_back(i);
  }

  const int a = static_cast<int>(act.size());
  Eigen::MatrixXd C(p + a, n);
  C.topRows(p) = problem.A_eq;
  for (int k = 0; k < a; ++k) C.row(p + k) = problem.G_ineq.row(act[static_cast<std::size_t>(k)]);

  Eigen::LLT<Eigen::MatrixXd> llt(problem.Q);
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument("qp backward: Q is not positive definite");

  Eigen::VectorXd w_z;
  Eigen::VectorXd w_c = Eigen::VectorXd::Zero(p + a);
  if (p + a == 0) {
    w_z = llt.solve(dloss_dz);
  } else {
    const Eigen::MatrixXd Y = llt.solve(C.transpose());  // Q^{-1} C'
    const Eigen::MatrixXd S = C * Y;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(S);
    const Eigen::VectorXd diag = ldlt.vectorD().cwiseAbs();
    const double dmax = diag.maxCoeff();
    const double dmin = diag.minCoeff();
    if (ldlt.info() != Eigen::Success || dmax <= 0.0 || dmin <= 1e-14 * dmax) {
      throw SingularKktError("qp backward: reduced KKT matrix is singular",
                             dmax > 0.0 ? dmin / dmax : 0.0);
    }
    const Eigen::VectorXd qg = llt.solve(dloss_dz);
    w_c = ldlt.solve(C * qg);
    w_z = qg - Y * w_c;
  }

  QpGradients g;
  g.d_lin = -w_z;
  g.d_Q = -0.5 * (w_z * solution.z.transpose() + solution.z * w_z.transpose());
  g.d_b_eq = w_c.head(p);
  g.d_A_eq = -(solution.nu * w_z.transpose() + w_c.head(p) * solution.z.transpose());
  g.d_G_ineq = Eigen::MatrixXd::Zero(m, n);
  g.d_h_ineq = Eigen::VectorXd::Zero(m);
  for (int k = 0; k < a; ++k) {
    const int i = act[static_cast<std::size_t>(k)];
    const double wmu = w_c[p + k];
    g.d_h_ineq[i] = wmu;
    g.d_G_ineq.row(i) =
        -(solution.mu[i] * w_z.transpose() + wmu * solution.z.transpose());
  }
  return g;
}

nlohmann::json qp_dump(const QpProblem& problem, const QpSolution& solution) {
  nlohmann::json j;
  j["problem"] = {{"Q", to_std(problem.Q)},          {"lin", to_std(problem.lin)},
                  {"A_eq", to_std(problem.A_eq)},    {"b_eq", to_std(problem.b_eq)},
                  {"G_ineq", to_std(problem.G_ineq)}, {"h_ineq", to_std(problem.h_ineq)}};
  j["solution"] = {{"status", to_string(solution.status)},
                   {"z", to_std(solution.z)},
                   {"nu", to_std(solution.nu)},
                   {"mu", to_std(solution.mu)},
                   {"active_set", solution.active_set},
                   {"iterations", solution.iterations},
                   {"stationarity_residual", solution.stationarity_residual},
                   {"equality_residual", solution.equality_residual},
                   {"inequality_residual", solution.inequality_residual},
                   {"complementarity_residual", solution.complementarity_residual},
                   {"infeasibility", solution.infeasibility}};
  return j;
}

}  // namespace vinesim
