#include "gidd/synthetic.hpp"

#include "gidd/error.hpp"
#include "gidd/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace gidd {

double ChinchillaForm::loss(double M, double D) const {
    return E + A * std::pow(M, -a) + B * std::pow(D, -b);
}

double ChinchillaForm::optimal_M(double C) const {
    return std::pow(a * A / (b * B), 1.0 / (a + b)) * std::pow(C, b / (a + b));
}

double ChinchillaForm::budget_for_M(double M) const {
    return std::pow(M / std::pow(a * A / (b * B), 1.0 / (a + b)), (a + b) / b);
}

double brute_force_optimal_M(const ChinchillaForm& form, double C, double M_lo, double M_hi, std::size_t grid) {
    if (!(M_lo > 0.0) || !(M_hi > M_lo) || grid < 2) {
        throw RangeError("brute_force_optimal_M: bad grid");
    }
    const double l0 = std::log(M_lo);
    const double step = (std::log(M_hi) - l0) / static_cast<double>(grid - 1);
    double best_m = M_lo;
    double best = form.loss(M_lo, C / M_lo);
    for (std::size_t i = 1; i < grid; ++i) {
        const double m = std::exp(l0 + step * static_cast<double>(i));
        const double v = form.loss(m, C / m);
        if (v < best) {
            best = v;
            best_m = m;
        }
    }
    return best_m;
}

SyntheticStudy synthetic_isoflop_runs(const ChinchillaForm& form, FlopMethod method, const SyntheticGrid& grid) {
    if (grid.n_sizes < 2 * grid.edge_margin + 2 || grid.points_per_curve < 2 || grid.n_targets < 2) {
        throw RangeError("synthetic_isoflop_runs: grid too small");
    }
    std::vector<ModelSpec> models;
    for (std::size_t k = 0; k < grid.n_sizes; ++k) {
        ModelSpec m;
        m.params = grid.smallest_params * std::pow(grid.size_ratio, static_cast<double>(k));
        m.layers = std::max(1L, std::lround(std::cbrt(m.params / (12.0 * 64.0 * 64.0))));
        m.hidden = 64 * m.layers;
        m.heads = m.layers;
        m.seq_len = grid.seq_len;
        m.vocab_size = 131072;
        char name[32];
        std::snprintf(name, sizeof name, "S%02zu", k);
        m.name = name;
        models.push_back(m);
    }
    SyntheticStudy out;
    const double m_lo = flops_per_token(models[grid.edge_margin], method);
    const double m_hi = flops_per_token(models[grid.n_sizes - 1 - grid.edge_margin], method);
    const double c_lo = std::log(form.budget_for_M(m_lo));
    const double c_hi = std::log(form.budget_for_M(m_hi));
    for (std::size_t t = 0; t < grid.n_targets; ++t) {
        out.targets.push_back(
            std::exp(c_lo + (c_hi - c_lo) * static_cast<double>(t) / static_cast<double>(grid.n_targets - 1)));
    }

    const double per_step = static_cast<double>(grid.batch_size_seqs * grid.seq_len);
    Rng rng(grid.seed);
    for (const ModelSpec& m : models) {
        const double M = flops_per_token(m, method);
        const double s_lo = std::log(std::max(1.0, 0.5 * out.targets.front() / M / per_step));
        const double s_hi = std::log(std::max(2.0, 2.0 * out.targets.back() / M / per_step));
        RunRecord run;
        run.run_id = "syn-" + std::string(flop_method_name(method)) + "-" + m.name;
        run.model = m;
        run.batch_size_seqs = grid.batch_size_seqs;
        run.lr_base = 1.0;
        long last = 0;
        for (std::size_t i = 0; i < grid.points_per_curve; ++i) {
            const double u = static_cast<double>(i) / static_cast<double>(grid.points_per_curve - 1);
            const long step = std::max(last + 1, std::lround(std::exp(s_lo + (s_hi - s_lo) * u)));
            last = step;
            CurvePoint p;
            p.step = step;
            p.tokens = per_step * static_cast<double>(step);
            p.loss = form.loss(M, p.tokens);
            if (grid.noise > 0.0) {
                p.loss *= 1.0 + grid.noise * rng.normal();
            }
            run.points.push_back(p);
        }
        out.runs.push_back(std::move(run));
    }
    return out;
}

} // namespace gidd
