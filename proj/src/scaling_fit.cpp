#include "gidd/scaling_fit.hpp"

#include "gidd/error.hpp"
#include "gidd/least_squares.hpp"
#include "gidd/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>

namespace gidd {

std::string_view smoothing_name(Smoothing s) { return s == Smoothing::raw ? "raw" : "sq_fit"; }

Smoothing parse_smoothing(std::string_view name) {
    if (name == "raw") {
        return Smoothing::raw;
    }
    if (name == "sq_fit" || name == "sq-fit") {
        return Smoothing::sq_fit;
    }
    throw RangeError("unknown smoothing '" + std::string(name) + "' (expected raw or sq_fit)");
}

namespace {

struct Line {
    double intercept = 0.0;
    double slope = 0.0;
};

Line ols_line(std::span<const double> x, std::span<const double> y) {
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxx = 0.0;
    double sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    if (!(sxx > 0.0)) {
        throw NumericalError("degenerate x-range in line fit");
    }
    const double slope = sxy / sxx;
    return {my - slope * mx, slope};
}

struct CurveView {
    std::vector<double> log_c;
    std::vector<double> f;  // loss or log loss
    std::vector<double> loss;
};

CurveView view_of(const RunRecord& run, FlopMethod method, bool log_loss) {
    CurveView v;
    const double m = flops_per_token(run.model, method);
    for (const CurvePoint& p : run.points) {
        v.log_c.push_back(std::log(m * p.tokens));
        v.loss.push_back(p.loss);
        v.f.push_back(log_loss ? std::log(p.loss) : p.loss);
    }
    return v;
}

// [begin, end) of a window of w points centred on `centre`, clipped to the curve.
std::pair<std::size_t, std::size_t> window_around(std::size_t centre, std::size_t w, std::size_t n) {
    w = std::min(std::max<std::size_t>(w, 1), n);
    const std::size_t half = w / 2;
    std::size_t begin = centre > half ? centre - half : 0;
    begin = std::min(begin, n - w);
    return {begin, begin + w};
}

} // namespace

std::optional<CurveReading> loss_at_flops(const RunRecord& run, FlopMethod method, double flops,
                                          const CurveReadOptions& opts) {
    if (!(flops > 0.0)) {
        throw RangeError("target FLOPs must be positive");
    }
    if (run.points.empty()) {
        return std::nullopt;
    }
    const CurveView v = view_of(run, method, opts.log_loss);
    const double lc = std::log(flops);
    constexpr double kKnotTol = 1e-12;
    const std::size_t n = v.log_c.size();
    if (lc < v.log_c.front() - kKnotTol || lc > v.log_c.back() + kKnotTol) {
        return std::nullopt;
    }
    std::size_t closest = 0;
    for (std::size_t i = 1; i < n; ++i) {
        if (std::abs(v.log_c[i] - lc) < std::abs(v.log_c[closest] - lc)) {
            closest = i;
        }
    }
    if (std::abs(v.log_c[closest] - lc) <= kKnotTol) {
        return CurveReading{v.loss[closest], false};
    }
    const auto [b, e] = window_around(closest, opts.window, n);
    if (e - b < 2) {
        return CurveReading{v.loss[closest], true};
    }
    const Line line = ols_line(std::span(v.log_c).subspan(b, e - b), std::span(v.f).subspan(b, e - b));
    const double f = line.intercept + line.slope * lc;
    return CurveReading{opts.log_loss ? std::exp(f) : f, false};
}

std::optional<CurveReading> flops_at_loss(const RunRecord& run, FlopMethod method, double target_loss,
                                          const CurveReadOptions& opts) {
    if (!(target_loss > 0.0)) {
        throw RangeError("target loss must be positive");
    }
    if (run.points.empty()) {
        return std::nullopt;
    }
    const CurveView v = view_of(run, method, opts.log_loss);
    const std::size_t n = v.log_c.size();
    std::size_t hit = n;
    for (std::size_t i = 0; i < n; ++i) {
        if (v.loss[i] <= target_loss) {
            hit = i;
            break;
        }
    }
    if (hit == n) {
        return std::nullopt;
    }
    if (v.loss[hit] == target_loss) {
        return CurveReading{std::exp(v.log_c[hit]), false};
    }
    if (hit == 0) {
        return std::nullopt;
    }
    const double ft = opts.log_loss ? std::log(target_loss) : target_loss;
    const std::size_t prev = hit - 1;
    const std::size_t centre = std::abs(v.loss[prev] - target_loss) < std::abs(v.loss[hit] - target_loss) ? prev : hit;
    const auto [b, e] = window_around(centre, opts.window, n);
    if (e - b < 2) {
        return CurveReading{std::exp(v.log_c[centre]), true};
    }
    const Line line = ols_line(std::span(v.log_c).subspan(b, e - b), std::span(v.f).subspan(b, e - b));
    double lc = line.slope < 0.0 ? (ft - line.intercept) / line.slope : std::nan("");
    if (!(lc >= v.log_c[prev] && lc <= v.log_c[hit])) {
        // Local line disagrees with the bracketing segment; interpolate on it instead.
        const double t = (ft - v.f[prev]) / (v.f[hit] - v.f[prev]);
        lc = v.log_c[prev] + t * (v.log_c[hit] - v.log_c[prev]);
    }
    return CurveReading{std::exp(lc), false};
}

IsoFlopExtraction extract_isoflop(std::span<const RunRecord> runs, std::span<const double> targets,
                                  FlopMethod method, const CurveReadOptions& opts) {
    if (runs.empty()) {
        throw RangeError("extract_isoflop: no runs");
    }
    for (const RunRecord& r : runs) {
        if (r.noise_b != runs.front().noise_b) {
            throw RangeError("extract_isoflop: runs mix noise types; filter by noise_b first");
        }
    }
    std::map<std::string, std::vector<const RunRecord*>> by_model;
    for (const RunRecord& r : runs) {
        by_model[r.model.name].push_back(&r);
    }
    IsoFlopExtraction out;
    for (double c : targets) {
        std::vector<IsoFlopPoint> row;
        for (const auto& [name, group] : by_model) {
            std::optional<IsoFlopPoint> best;
            for (const RunRecord* r : group) {
                const auto reading = loss_at_flops(*r, method, c, opts);
                if (!reading) {
                    out.skipped.push_back(r->run_id + " @ " + format_double(c));
                    continue;
                }
                if (!best || reading->value < best->loss) {
                    IsoFlopPoint p;
                    p.target_C = c;
                    p.model_M = flops_per_token(r->model, method);
                    p.loss = reading->value;
                    p.tokens_D = c / p.model_M;
                    p.params_P = r->model.params;
                    p.source = Smoothing::raw;
                    p.model = name;
                    p.run_id = r->run_id;
                    p.low_quality = reading->low_quality;
                    best = p;
                }
            }
            if (best) {
                row.push_back(*best);
            }
        }
        std::sort(row.begin(), row.end(),
                  [](const IsoFlopPoint& a, const IsoFlopPoint& b) { return a.model_M < b.model_M; });
        out.points.insert(out.points.end(), row.begin(), row.end());
    }
    return out;
}

ParabolaOptimum parabola_optimum(std::span<const double> log_M, std::span<const double> loss, std::size_t window) {
    if (log_M.size() != loss.size()) {
        throw RangeError("parabola_optimum: size mismatch");
    }
    std::vector<std::size_t> order(log_M.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return log_M[a] < log_M[b]; });
    std::vector<double> x;
    std::vector<double> y;
    for (std::size_t i : order) {
        x.push_back(log_M[i]);
        y.push_back(loss[i]);
    }
    std::set<double> distinct(x.begin(), x.end());
    if (distinct.size() < 3) {
        throw RangeError("parabola_optimum: need at least 3 distinct model sizes");
    }
    const std::size_t k = static_cast<std::size_t>(std::min_element(y.begin(), y.end()) - y.begin());
    ParabolaOptimum raw{x[k], std::exp(x[k]), y[k], true, {}};

    const auto [b, e] = window_around(k, std::max<std::size_t>(window, 3), x.size());
    const Eigen::Index m = static_cast<Eigen::Index>(e - b);
    Eigen::MatrixXd V(m, 3);
    Eigen::VectorXd rhs(m);
    for (Eigen::Index i = 0; i < m; ++i) {
        const double dx = x[b + static_cast<std::size_t>(i)] - x[k];
        V(i, 0) = 1.0;
        V(i, 1) = dx;
        V(i, 2) = dx * dx;
        rhs[i] = y[b + static_cast<std::size_t>(i)];
    }
    const Eigen::VectorXd c = V.colPivHouseholderQr().solve(rhs);
    if (!c.allFinite() || !(c[2] > 1e-14 * std::max(1.0, std::abs(c[0])))) {
        raw.warning = "concave or degenerate parabola; using raw minimum";
        return raw;
    }
    const double u = -c[1] / (2.0 * c[2]);
    const double vertex = x[k] + u;
    if (vertex < x[b] || vertex > x[e - 1]) {
        raw.warning = "parabola vertex outside the fitted window; using raw minimum";
        return raw;
    }
    return ParabolaOptimum{vertex, std::exp(vertex), c[0] - c[1] * c[1] / (4.0 * c[2]), false, {}};
}

double PowerLawFit::operator()(double x) const { return A * std::pow(x, alpha) + E; }

namespace {

double r_squared_log(std::span<const double> ys, const std::vector<double>& log_pred) {
    std::vector<double> ly(ys.size());
    for (std::size_t i = 0; i < ys.size(); ++i) {
        ly[i] = std::log(ys[i]);
    }
    const double mean = std::accumulate(ly.begin(), ly.end(), 0.0) / static_cast<double>(ly.size());
    double ss_res = 0.0;
    double ss_tot = 0.0;
    for (std::size_t i = 0; i < ly.size(); ++i) {
        ss_res += (ly[i] - log_pred[i]) * (ly[i] - log_pred[i]);
        ss_tot += (ly[i] - mean) * (ly[i] - mean);
    }
    if (ss_tot <= 0.0) {
        return ss_res <= 0.0 ? 1.0 : 0.0;
    }
    return 1.0 - ss_res / ss_tot;
}

} // namespace

PowerLawFit fit_power_law(std::span<const double> xs, std::span<const double> ys, bool with_intercept) {
    if (xs.size() != ys.size()) {
        throw RangeError("fit_power_law: size mismatch");
    }
    const std::size_t need = with_intercept ? 4 : 3;
    if (xs.size() < need) {
        throw RangeError("fit_power_law: need at least " + std::to_string(need) + " points");
    }
    std::vector<double> lx(xs.size());
    std::vector<double> ly(ys.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (!(xs[i] > 0.0) || !(ys[i] > 0.0) || !std::isfinite(xs[i]) || !std::isfinite(ys[i])) {
            throw RangeError("fit_power_law: data must be positive and finite");
        }
        lx[i] = std::log(xs[i]);
        ly[i] = std::log(ys[i]);
    }
    const Line line = ols_line(lx, ly);
    PowerLawFit fit;
    fit.n_points = xs.size();
    fit.A = std::exp(line.intercept);
    fit.alpha = line.slope;
    fit.with_intercept = with_intercept;

    if (with_intercept) {
        const ResidualFn residual = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r, Eigen::MatrixXd& J) {
            const auto n = static_cast<Eigen::Index>(lx.size());
            r.resize(n);
            J.resize(n, 3);
            const double a = std::exp(p[0]);
            for (Eigen::Index i = 0; i < n; ++i) {
                const double pw = a * std::exp(p[1] * lx[static_cast<std::size_t>(i)]);
                const double f = pw + p[2];
                r[i] = std::log(f) - ly[static_cast<std::size_t>(i)];
                J(i, 0) = pw / f;
                J(i, 1) = pw * lx[static_cast<std::size_t>(i)] / f;
                J(i, 2) = 1.0 / f;
            }
        };
        const double inf = std::numeric_limits<double>::infinity();
        Eigen::Vector3d x0(line.intercept, line.slope, 0.0);
        Eigen::Vector3d lo(-inf, -inf, 0.0);
        Eigen::Vector3d hi(inf, inf, inf);
        const LsqResult res = levenberg_marquardt(residual, x0, lo, hi);
        if (!res.converged) {
            throw NumericalError("fit_power_law: intercept fit did not converge in " +
                                 std::to_string(res.iterations) + " iterations");
        }
        fit.A = std::exp(res.x[0]);
        fit.alpha = res.x[1];
        fit.E = res.x[2];
    }
    std::vector<double> pred(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        pred[i] = with_intercept ? std::log(fit(xs[i])) : line.intercept + line.slope * lx[i];
    }
    fit.r_squared = r_squared_log(ys, pred);
    return fit;
}

std::string_view ci_level_name(CiLevel level) {
    switch (level) {
    case CiLevel::two_sigma:
        return "2sigma";
    case CiLevel::p95:
        return "95";
    case CiLevel::p99:
        return "99";
    }
    return "";
}

CiLevel parse_ci_level(std::string_view name) {
    if (name == "2sigma") {
        return CiLevel::two_sigma;
    }
    if (name == "95") {
        return CiLevel::p95;
    }
    if (name == "99") {
        return CiLevel::p99;
    }
    throw RangeError("unknown CI level '" + std::string(name) + "' (expected 2sigma, 95 or 99)");
}

double ci_coverage(CiLevel level) {
    switch (level) {
    case CiLevel::two_sigma:
        return std::erf(2.0 / std::sqrt(2.0));
    case CiLevel::p95:
        return 0.95;
    case CiLevel::p99:
        return 0.99;
    }
    return 0.0;
}

namespace {

// Linear interpolation between order statistics (Hyndman-Fan type 7).
double quantile_sorted(const std::vector<double>& s, double q) {
    const double h = (static_cast<double>(s.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, s.size() - 1);
    return s[lo] + (h - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

} // namespace

std::vector<Interval> bootstrap_ci(const FitProcedure& fit, std::span<const double> xs, std::span<const double> ys,
                                   const BootstrapOptions& opts) {
    if (xs.size() != ys.size()) {
        throw RangeError("bootstrap_ci: size mismatch");
    }
    if (xs.size() < 3) {
        throw RangeError("bootstrap_ci: need at least 3 points");
    }
    if (opts.n_resamples < 2) {
        throw RangeError("bootstrap_ci: need at least 2 resamples");
    }
    const std::vector<double> estimate = fit(xs, ys);
    const std::size_t k = estimate.size();
    const std::size_t n = xs.size();
    std::vector<std::vector<double>> draws(opts.n_resamples);

    for_each_index(opts.exec, opts.n_resamples, [&](std::size_t r) {
        Rng rng(derive_seed(opts.seed, r));
        std::vector<double> bx(n);
        std::vector<double> by(n);
        for (std::size_t attempt = 0; attempt <= opts.max_redraws; ++attempt) {
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t j = rng.index(n);
                bx[i] = xs[j];
                by[i] = ys[j];
            }
            if (std::set<double>(bx.begin(), bx.end()).size() < opts.min_distinct_x) {
                continue;
            }
            try {
                std::vector<double> c = fit(bx, by);
                if (c.size() != k) {
                    throw RangeError("bootstrap_ci: fit returned a different coefficient count");
                }
                draws[r] = std::move(c);
                return;
            } catch (const NumericalError&) {
            }
        }
        throw NumericalError("bootstrap_ci: resample " + std::to_string(r) + " stayed degenerate after " +
                             std::to_string(opts.max_redraws) + " redraws");
    });

    const double coverage = ci_coverage(opts.level);
    std::vector<Interval> out(k);
    std::vector<double> col(opts.n_resamples);
    for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t r = 0; r < opts.n_resamples; ++r) {
            col[r] = draws[r][c];
        }
        std::sort(col.begin(), col.end());
        out[c].low = std::min(quantile_sorted(col, 0.5 * (1.0 - coverage)), estimate[c]);
        out[c].high = std::max(quantile_sorted(col, 0.5 * (1.0 + coverage)), estimate[c]);
    }
    return out;
}

void attach_bootstrap(PowerLawFit& fit, std::span<const double> xs, std::span<const double> ys,
                      const BootstrapOptions& opts) {
    const bool intercept = fit.with_intercept;
    const FitProcedure proc = [intercept](std::span<const double> x, std::span<const double> y) {
        const PowerLawFit f = fit_power_law(x, y, intercept);
        std::vector<double> c{f.A, f.alpha};
        if (intercept) {
            c.push_back(f.E);
        }
        return c;
    };
    const std::vector<Interval> ci = bootstrap_ci(proc, xs, ys, opts);
    fit.ci_A = ci[0];
    fit.ci_alpha = ci[1];
    if (intercept) {
        fit.ci_E = ci[2];
    }
}

namespace {

// Piecewise-linear interpolation of log P against log M with end-segment extrapolation.
double interpolate_params(const std::vector<std::pair<double, double>>& log_mp, double log_m) {
    if (log_mp.size() == 1) {
        return std::exp(log_mp.front().second);
    }
    std::size_t i = 1;
    while (i + 1 < log_mp.size() && log_mp[i].first < log_m) {
        ++i;
    }
    const auto& [x0, y0] = log_mp[i - 1];
    const auto& [x1, y1] = log_mp[i];
    return std::exp(y0 + (log_m - x0) * (y1 - y0) / (x1 - x0));
}

} // namespace

ComputeOptimalLaws compute_optimal_laws(std::span<const RunRecord> runs, std::span<const double> targets,
                                        FlopMethod method, const ScalingFitOptions& opts) {
    if (targets.size() < 4) {
        throw RangeError("compute_optimal_laws: need at least 4 targets");
    }
    std::map<double, double> m_to_p;
    for (const RunRecord& r : runs) {
        m_to_p[std::log(flops_per_token(r.model, method))] = std::log(r.model.params);
    }
    if (m_to_p.size() < 3) {
        throw RangeError("compute_optimal_laws: need at least 3 model sizes");
    }
    const std::vector<std::pair<double, double>> log_mp(m_to_p.begin(), m_to_p.end());

    ComputeOptimalLaws out;
    out.method = method;
    out.smoothing = opts.smoothing;
    const IsoFlopExtraction ex = extract_isoflop(runs, targets, method, opts.read);
    if (!ex.skipped.empty()) {
        out.warnings.push_back(std::to_string(ex.skipped.size()) + " (run, target) pairs outside the FLOP range");
    }
    for (double c : targets) {
        std::vector<double> lm;
        std::vector<double> loss;
        for (const IsoFlopPoint& p : ex.points) {
            if (p.target_C == c) {
                lm.push_back(std::log(p.model_M));
                loss.push_back(p.loss);
            }
        }
        if (lm.size() < 3) {
            out.warnings.push_back("target " + format_double(c) + " skipped: fewer than 3 model sizes cover it");
            continue;
        }
        FrontierPoint fp;
        fp.C = c;
        if (opts.smoothing == Smoothing::raw) {
            const std::size_t k = static_cast<std::size_t>(std::min_element(loss.begin(), loss.end()) - loss.begin());
            fp.M = std::exp(lm[k]);
            fp.loss = loss[k];
        } else {
            const ParabolaOptimum po = parabola_optimum(lm, loss, opts.parabola_window);
            fp.M = po.M;
            fp.loss = po.loss;
            fp.fallback = po.fallback;
            if (po.fallback) {
                out.warnings.push_back("target " + format_double(c) + ": " + po.warning);
            }
        }
        fp.D = c / fp.M;
        fp.P = interpolate_params(log_mp, std::log(fp.M));
        out.frontier.push_back(fp);
    }
    if (out.frontier.size() < 3) {
        throw RangeError("compute_optimal_laws: fewer than 3 targets produced an optimum");
    }
    std::vector<double> cs;
    std::vector<double> ms;
    std::vector<double> ds;
    std::vector<double> ps;
    std::vector<double> ls;
    for (const FrontierPoint& fp : out.frontier) {
        cs.push_back(fp.C);
        ms.push_back(fp.M);
        ds.push_back(fp.D);
        ps.push_back(fp.P);
        ls.push_back(fp.loss);
    }
    out.M = fit_power_law(cs, ms);
    out.D = fit_power_law(cs, ds);
    out.P = fit_power_law(cs, ps);
    out.L = fit_power_law(cs, ls);
    if (opts.bootstrap) {
        BootstrapOptions b = *opts.bootstrap;
        attach_bootstrap(out.M, cs, ms, b);
        b.seed = derive_seed(b.seed, 1);
        attach_bootstrap(out.D, cs, ds, b);
        b.seed = derive_seed(b.seed, 2);
        attach_bootstrap(out.P, cs, ps, b);
        b.seed = derive_seed(b.seed, 3);
        attach_bootstrap(out.L, cs, ls, b);
    }
    out.complementarity = out.M.alpha + out.D.alpha;
    if (std::abs(out.complementarity - 1.0) > 0.01) {
        out.warnings.push_back("alpha_M + alpha_D = " + format_double(out.complementarity) + " deviates from 1");
    }
    return out;
}

} // namespace gidd
