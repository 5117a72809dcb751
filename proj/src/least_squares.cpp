#include "gidd/least_squares.hpp"

#include "gidd/error.hpp"

#include <cmath>
#include <limits>

namespace gidd {

namespace {

Eigen::VectorXd project(const Eigen::VectorXd& x, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
    return x.cwiseMax(lo).cwiseMin(hi);
}

// Projected gradient norm: components pushing against an active bound are dropped.
double projected_gradient_norm(const Eigen::VectorXd& x, const Eigen::VectorXd& g, const Eigen::VectorXd& lo,
                               const Eigen::VectorXd& hi) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const bool at_lo = x[i] <= lo[i] && g[i] > 0.0;
        const bool at_hi = x[i] >= hi[i] && g[i] < 0.0;
        if (!at_lo && !at_hi) {
            worst = std::max(worst, std::abs(g[i]));
        }
    }
    return worst;
}

} // namespace

LsqResult levenberg_marquardt(const ResidualFn& fn, Eigen::VectorXd x0, const Eigen::VectorXd& lower,
                              const Eigen::VectorXd& upper, const LsqOptions& opts) {
    const Eigen::Index n = x0.size();
    if (lower.size() != n || upper.size() != n) {
        throw RangeError("levenberg_marquardt: bound sizes do not match the parameter vector");
    }
    if ((lower.array() > upper.array()).any()) {
        throw RangeError("levenberg_marquardt: lower bound exceeds upper bound");
    }

    LsqResult res;
    res.x = project(x0, lower, upper);
    Eigen::VectorXd r;
    Eigen::MatrixXd J;
    fn(res.x, r, J);
    if (!r.allFinite() || !J.allFinite()) {
        throw NumericalError("levenberg_marquardt: non-finite residual at the starting point");
    }
    res.cost = 0.5 * r.squaredNorm();

    double mu = -1.0;
    double nu = 2.0;
    Eigen::VectorXd r_trial;
    Eigen::MatrixXd J_trial;
    for (int it = 0; it < opts.max_iterations; ++it) {
        res.iterations = it + 1;
        const Eigen::MatrixXd A = J.transpose() * J;
        const Eigen::VectorXd g = J.transpose() * r;
        if (projected_gradient_norm(res.x, g, lower, upper) <= opts.gradient_tol * std::max(1.0, res.cost)) {
            res.converged = true;
            return res;
        }
        Eigen::VectorXd diag = A.diagonal().cwiseMax(1e-12 * std::max(1.0, A.diagonal().maxCoeff()));
        if (mu < 0.0) {
            mu = 1e-3;
        }

        bool accepted = false;
        while (!accepted) {
            Eigen::MatrixXd damped = A;
            damped.diagonal() += mu * diag;
            const Eigen::VectorXd step = damped.ldlt().solve(-g);
            const Eigen::VectorXd trial = project(res.x + step, lower, upper);
            const Eigen::VectorXd taken = trial - res.x;
            const double scale = res.x.norm() + opts.relative_step;
            if (taken.norm() <= opts.relative_step * scale) {
                res.converged = true;
                return res;
            }
            fn(trial, r_trial, J_trial);
            const double cost = r_trial.allFinite() ? 0.5 * r_trial.squaredNorm()
                                                    : std::numeric_limits<double>::infinity();
            const double predicted = -(g.dot(taken) + 0.5 * taken.dot(A * taken));
            if (cost < res.cost && J_trial.allFinite()) {
                const double rho = predicted > 0.0 ? (res.cost - cost) / predicted : 1.0;
                mu *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3));
                nu = 2.0;
                res.x = trial;
                r = r_trial;
                J = J_trial;
                res.cost = cost;
                accepted = true;
            } else {
                mu *= nu;
                nu *= 2.0;
                if (mu > 1e20) {
                    // No descent direction left at this resolution.
                    res.converged = true;
                    return res;
                }
            }
        }
    }
    return res;
}

LsqResult levenberg_marquardt(const ResidualFn& fn, Eigen::VectorXd x0, const LsqOptions& opts) {
    const Eigen::Index n = x0.size();
    const double inf = std::numeric_limits<double>::infinity();
    return levenberg_marquardt(fn, std::move(x0), Eigen::VectorXd::Constant(n, -inf),
                               Eigen::VectorXd::Constant(n, inf), opts);
}

} // namespace gidd
