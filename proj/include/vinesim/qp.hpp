#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace vinesim {

/// Dense strictly convex quadratic program
///   min_z  1/2 z'Qz + lin'z
///   s.t.   A_eq z = b_eq,  G_ineq z <= h_ineq.
struct QpProblem {
  Eigen::MatrixXd Q;
  Eigen::VectorXd lin;
  Eigen::MatrixXd A_eq;
  Eigen::VectorXd b_eq;
  Eigen::MatrixXd G_ineq;
  Eigen::VectorXd h_ineq;

  int vars() const { return static_cast<int>(lin.size()); }
  int equalities() const { return static_cast<int>(b_eq.size()); }
  int inequalities() const { return static_cast<int>(h_ineq.size()); }

  /// Throws std::invalid_argument on inconsistent dimensions.
  void validate() const;
};

enum class QpStatus { solved, infeasible, max_iter };

std::string to_string(QpStatus status);

/// Primal/dual solution with the KKT residuals used by the tests and the
/// differentiation metadata (active set) used by the backward pass.
/// Sign conventions: stationarity is Qz + lin + A_eq'nu + G_ineq'mu = 0 with
/// mu >= 0.
struct QpSolution {
  QpStatus status = QpStatus::max_iter;
  Eigen::VectorXd z;
  Eigen::VectorXd nu;
  Eigen::VectorXd mu;
  std::vector<int> active_set;  // inequality rows tight at the solution
  int iterations = 0;
  double stationarity_residual = 0.0;
  double equality_residual = 0.0;
  double inequality_residual = 0.0;
  double complementarity_residual = 0.0;
  double infeasibility = 0.0;  // certificate residual when status == infeasible

  void fill_residuals(const QpProblem& problem);
};

/// Solves the QP with a dual active-set method (Goldfarb-Idnani). Requires Q
/// positive definite (checked by Cholesky). Deterministic given identical
/// inputs and warm start; the warm start biases the constraint activation
/// order and can only change the iteration count, not the solution.
QpSolution qp_solve(const QpProblem& problem, const QpSolution* warm_start = nullptr,
                    int max_iterations = 0);

/// Elementwise identical to calling qp_solve on each problem; elements may
/// be solved on `workers` threads. A failed element reports through its own
/// status and does not abort the batch.
std::vector<QpSolution> qp_solve_batch(const std::vector<QpProblem>& problems, int workers = 1);

/// Gradients of a scalar loss with respect to every problem parameter, given
/// the loss gradient with respect to the primal solution.
struct QpGradients {
  Eigen::MatrixXd d_Q;
  Eigen::VectorXd d_lin;
  Eigen::MatrixXd d_A_eq;
  Eigen::VectorXd d_b_eq;
  Eigen::MatrixXd d_G_ineq;
  Eigen::VectorXd d_h_ineq;
};

class SingularKktError : public std::runtime_error {
public:
  SingularKktError(const std::string& what, double condition_estimate)
      : std::runtime_error(what), condition_estimate(condition_estimate) {}
  double condition_estimate;
};

/// Reverse-mode sensitivities via implicit differentiation of the KKT system
/// restricted to the active set. Weakly active constraints (mu <= dual_tol
/// and |gap| <= primal_tol) are treated as inactive; this is a deterministic
/// subgradient choice. Throws SingularKktError when the reduced KKT matrix
/// is rank deficient.
QpGradients qp_solve_backward(const QpProblem& problem, const QpSolution& solution,
                              const Eigen::VectorXd& dloss_dz, double dual_tol = 1e-7,
                              double primal_tol = 1e-7);

/// Debug dump (problem + solution) for failure reproduction.
nlohmann::json qp_dump(const QpProblem& problem, const QpSolution& solution);

}  // namespace vinesim
