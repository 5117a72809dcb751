#pragma once

#include <Eigen/Dense>

#include <functional>

namespace gidd {

// Fills the residual vector r (size m) and its Jacobian J (m x n) at x.
using ResidualFn = std::function<void(const Eigen::VectorXd& x, Eigen::VectorXd& r, Eigen::MatrixXd& J)>;

struct LsqOptions {
    int max_iterations = 500;
    double relative_step = 1e-10;
    double gradient_tol = 1e-15;
};

struct LsqResult {
    Eigen::VectorXd x;
    double cost = 0.0;  // 0.5 * |r|^2
    int iterations = 0;
    bool converged = false;
};

// Levenberg-Marquardt with Marquardt scaling. Trial points are projected onto
// the box [lower, upper]; pass +-infinity for unbounded coordinates.
LsqResult levenberg_marquardt(const ResidualFn& fn, Eigen::VectorXd x0, const Eigen::VectorXd& lower,
                              const Eigen::VectorXd& upper, const LsqOptions& opts = {});

LsqResult levenberg_marquardt(const ResidualFn& fn, Eigen::VectorXd x0, const LsqOptions& opts = {});

} // namespace gidd
