#pragma once

#include "gidd/runs.hpp"

#include <cstdint>
#include <vector>

namespace gidd {

// L(M, D) = E + A M^-a + B D^-b with M in FLOPs per token and D in tokens.
struct ChinchillaForm {
    double E = 1.8;
    double A = 50.0;
    double a = 0.4;
    double B = 300.0;
    double b = 0.4;

    double loss(double M, double D) const;
    double alpha_M() const { return b / (a + b); }
    double alpha_D() const { return a / (a + b); }
    // Closed-form argmin over M of loss(M, C / M).
    double optimal_M(double C) const;
    // Inverse of optimal_M.
    double budget_for_M(double M) const;
};

// Dense-grid argmin over log M of loss(M, C / M) in [M_lo, M_hi].
double brute_force_optimal_M(const ChinchillaForm& form, double C, double M_lo, double M_hi,
                             std::size_t grid = 200001);

struct SyntheticGrid {
    std::size_t n_sizes = 24;
    double size_ratio = 1.4142135623730951;
    double smallest_params = 1e6;
    std::size_t points_per_curve = 60;
    long seq_len = 2048;
    long batch_size_seqs = 1;
    std::size_t n_targets = 8;
    std::size_t edge_margin = 3;  // sizes kept between the analytic optimum and either end of the grid
    double noise = 0.0;           // relative Gaussian noise on each loss
    std::uint64_t seed = 0;
};

struct SyntheticStudy {
    std::vector<RunRecord> runs;
    std::vector<double> targets;  // log-spaced, optima at least edge_margin sizes from the ends
};

// One run per size on the d = 64 L family (L rounded, P kept free). Losses are
// evaluated at the method's own M so the analytic exponents hold per method.
SyntheticStudy synthetic_isoflop_runs(const ChinchillaForm& form, FlopMethod method, const SyntheticGrid& grid = {});

} // namespace gidd
