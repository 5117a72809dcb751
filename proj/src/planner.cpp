#include "gidd/planner.hpp"

#include "gidd/elbo.hpp"
#include "gidd/error.hpp"
#include "gidd/least_squares.hpp"
#include "gidd/math.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <set>

namespace gidd {

using nlohmann::json;

LawFit fit_log_law(std::span<const double> xs, std::span<const double> ys, double level) {
    if (xs.size() != ys.size()) {
        throw RangeError("law fit: size mismatch");
    }
    if (xs.size() < 3) {
        throw RangeError("law fit: need at least 3 points");
    }
    if (!(level > 0.0 && level < 1.0)) {
        throw RangeError("law fit: confidence level must be in (0, 1)");
    }
    if (std::set<double>(xs.begin(), xs.end()).size() < 2) {
        throw RangeError("law fit: degenerate x-range");
    }
    LawFit out;
    out.level = level;
    out.fit = fit_power_law(xs, ys);

    const std::size_t n = xs.size();
    std::vector<double> lx(n);
    std::vector<double> ly(n);
    for (std::size_t i = 0; i < n; ++i) {
        lx[i] = std::log(xs[i]);
        ly[i] = std::log(ys[i]);
    }
    const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / static_cast<double>(n);
    double sxx = 0.0;
    double ss_res = 0.0;
    const double intercept = std::log(out.fit.A);
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (lx[i] - mx) * (lx[i] - mx);
        const double e = ly[i] - intercept - out.fit.alpha * lx[i];
        ss_res += e * e;
    }
    const double dof = static_cast<double>(n - 2);
    const double s2 = ss_res / dof;
    out.slope_stderr = std::sqrt(s2 / sxx);
    const double se_int = std::sqrt(s2 * (1.0 / static_cast<double>(n) + mx * mx / sxx));
    const boost::math::students_t dist(dof);
    const double t = boost::math::quantile(dist, 0.5 * (1.0 + level));
    out.alpha_ci = {out.fit.alpha - t * out.slope_stderr, out.fit.alpha + t * out.slope_stderr};
    out.A_ci = {std::exp(intercept - t * se_int), std::exp(intercept + t * se_int)};
    return out;
}

LawFit fit_batch_law(std::span<const double> tokens_D, std::span<const double> batch_tokens, double level) {
    LawFit f = fit_log_law(tokens_D, batch_tokens, level);
    f.x_unit = "tokens";
    f.y_unit = "batch tokens";
    return f;
}

LawFit fit_lr_law(std::span<const double> batch_tokens, std::span<const double> lr, double level) {
    LawFit f = fit_log_law(batch_tokens, lr, level);
    f.x_unit = "batch tokens";
    f.y_unit = "eta_base";
    return f;
}

std::vector<double> auto_loss_levels(std::span<const RunRecord> runs, std::size_t n_levels) {
    if (runs.empty() || n_levels == 0) {
        throw RangeError("auto_loss_levels: need runs and at least one level");
    }
    // model -> batch size -> lowest loss over learning rates
    std::map<std::string, std::map<long, double>> floor;
    double hi = std::numeric_limits<double>::infinity();
    for (const RunRecord& r : runs) {
        if (r.points.empty()) {
            continue;
        }
        double mn = r.points.front().loss;
        double mx = mn;
        for (const CurvePoint& p : r.points) {
            mn = std::min(mn, p.loss);
            mx = std::max(mx, p.loss);
        }
        auto [it, fresh] = floor[r.model.name].try_emplace(r.batch_size_seqs, mn);
        if (!fresh) {
            it->second = std::min(it->second, mn);
        }
        hi = std::min(hi, mx);
    }
    // Lowest level that at least two batch sizes of some model still reach.
    double lo = std::numeric_limits<double>::infinity();
    for (const auto& [name, per_batch] : floor) {
        if (per_batch.size() < 2) {
            throw RangeError("auto_loss_levels: model '" + name + "' has fewer than two batch sizes");
        }
        std::vector<double> mins;
        for (const auto& [b, m] : per_batch) {
            mins.push_back(m);
        }
        std::sort(mins.begin(), mins.end());
        lo = std::min(lo, mins[1]);
    }
    if (!(lo < hi)) {
        throw RangeError("auto_loss_levels: no loss level is reached by two batch sizes of any model; pass explicit levels");
    }
    std::vector<double> out;
    for (std::size_t k = 1; k <= n_levels; ++k) {
        const double u = static_cast<double>(k) / static_cast<double>(n_levels + 1);
        out.push_back(std::exp(std::log(lo) + u * (std::log(hi) - std::log(lo))));
    }
    return out;
}

HparamExtraction optimal_hparam_points(std::span<const RunRecord> runs, std::span<const double> target_losses,
                                       const CurveReadOptions& read) {
    std::map<std::string, std::vector<const RunRecord*>> by_model;
    for (const RunRecord& r : runs) {
        by_model[r.model.name].push_back(&r);
    }
    HparamExtraction out;
    out.target_losses.assign(target_losses.begin(), target_losses.end());
    for (const auto& [name, group] : by_model) {
        for (double target : target_losses) {
            // batch size -> (tokens, lr) of its best learning rate
            std::map<long, std::pair<double, double>> best;
            for (const RunRecord* r : group) {
                const auto c = flops_at_loss(*r, FlopMethod::method2, target, read);
                if (!c) {
                    continue;
                }
                const double tokens = c->value / flops_per_token(r->model, FlopMethod::method2);
                auto it = best.find(r->batch_size_seqs);
                if (it == best.end() || tokens < it->second.first) {
                    best[r->batch_size_seqs] = {tokens, r->lr_base};
                }
            }
            if (best.size() < 2) {
                continue;
            }
            const long seq_len = group.front()->model.seq_len;
            IsoLossCurve iso;
            iso.model = name;
            iso.target_loss = target;
            HparamPoint hp;
            hp.tokens_D = std::numeric_limits<double>::infinity();
            for (const auto& [b, tl] : best) {
                const double per_step = static_cast<double>(b) * static_cast<double>(seq_len);
                iso.batch_seqs.push_back(static_cast<double>(b));
                iso.steps.push_back(tl.first / per_step);
                if (tl.first < hp.tokens_D) {
                    hp.tokens_D = tl.first;
                    hp.batch_seqs = b;
                    hp.batch_tokens = per_step;
                    hp.lr = tl.second;
                }
            }
            hp.model = name;
            hp.target_loss = target;
            out.points.push_back(hp);
            out.iso_loss.push_back(std::move(iso));
        }
    }
    return out;
}

double HyperbolaFit::steps_at(double B) const {
    const double u = std::pow(B / B_min, alpha) - 1.0;
    if (!(u > 0.0)) {
        return std::numeric_limits<double>::infinity();
    }
    return S_min * std::pow(1.0 + 1.0 / u, 1.0 / alpha);
}

HyperbolaFit fit_hyperbola(std::span<const double> B, std::span<const double> S, std::string unit,
                           double target_loss) {
    if (B.size() != S.size()) {
        throw RangeError("fit_hyperbola: size mismatch");
    }
    const std::size_t n = B.size();
    if (n < 4) {
        throw RangeError("fit_hyperbola: need at least 4 points");
    }
    std::vector<double> x(n);
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!(B[i] > 0.0) || !(S[i] > 0.0) || !std::isfinite(B[i]) || !std::isfinite(S[i])) {
            throw RangeError("fit_hyperbola: batch sizes and steps must be positive and finite");
        }
        x[i] = std::log(B[i]);
        y[i] = std::log(S[i]);
    }
    // Curve: log B = log B_min + softplus(tau) / alpha, log S = log S_min + softplus(-tau) / alpha.
    const auto np = static_cast<Eigen::Index>(n + 3);
    Eigen::VectorXd p0(np);
    const double alpha0 = 0.15;
    p0[0] = std::log(0.9 * *std::min_element(B.begin(), B.end()));
    p0[1] = std::log(0.9 * *std::min_element(S.begin(), S.end()));
    p0[2] = std::log(alpha0);
    for (std::size_t i = 0; i < n; ++i) {
        const double tb = std::log(std::expm1(alpha0 * (x[i] - p0[0])));
        const double ts = -std::log(std::expm1(alpha0 * (y[i] - p0[1])));
        p0[static_cast<Eigen::Index>(i) + 3] = 0.5 * (tb + ts);
    }
    const ResidualFn residual = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r, Eigen::MatrixXd& J) {
        const double a = std::exp(p[2]);
        r.resize(static_cast<Eigen::Index>(2 * n));
        J.setZero(static_cast<Eigen::Index>(2 * n), np);
        for (std::size_t i = 0; i < n; ++i) {
            const auto rx = static_cast<Eigen::Index>(2 * i);
            const auto ti = static_cast<Eigen::Index>(i) + 3;
            const double tau = p[ti];
            const double sp = softplus(tau);
            const double sm = softplus(-tau);
            r[rx] = p[0] + sp / a - x[i];
            r[rx + 1] = p[1] + sm / a - y[i];
            J(rx, 0) = 1.0;
            J(rx, 2) = -sp / a;
            J(rx, ti) = sigmoid(tau) / a;
            J(rx + 1, 1) = 1.0;
            J(rx + 1, 2) = -sm / a;
            J(rx + 1, ti) = -sigmoid(-tau) / a;
        }
    };
    const double inf = std::numeric_limits<double>::infinity();
    Eigen::VectorXd lo = Eigen::VectorXd::Constant(np, -50.0);
    Eigen::VectorXd hi = Eigen::VectorXd::Constant(np, 50.0);
    lo[0] = lo[1] = -inf;
    hi[0] = hi[1] = inf;
    lo[2] = std::log(1e-3);
    hi[2] = std::log(10.0);
    p0 = p0.cwiseMax(lo).cwiseMin(hi);
    const LsqResult res = levenberg_marquardt(residual, p0, lo, hi);
    if (!res.converged) {
        throw NumericalError("fit_hyperbola: no convergence after " + std::to_string(res.iterations) + " iterations");
    }
    const Eigen::VectorXd taus = res.x.tail(static_cast<Eigen::Index>(n));
    if (!(taus.minCoeff() < 0.0 && taus.maxCoeff() > 0.0)) {
        throw NumericalError("fit_hyperbola: all points lie on one arm of the hyperbola");
    }
    HyperbolaFit fit;
    fit.B_min = std::exp(res.x[0]);
    fit.S_min = std::exp(res.x[1]);
    fit.alpha = std::exp(res.x[2]);
    fit.residual = std::sqrt(2.0 * res.cost / static_cast<double>(n));
    fit.target_loss = target_loss;
    fit.unit = std::move(unit);
    fit.iterations = res.iterations;
    return fit;
}

TokenOptimal token_optimal(const HyperbolaFit& fit) {
    const double k = std::pow(2.0, 1.0 / fit.alpha);
    TokenOptimal t;
    t.B = k * fit.B_min;
    t.S = k * fit.S_min;
    t.D = t.B * t.S;
    return t;
}

CriticalSummary summarize_hyperbolas(std::span<const HyperbolaFit> fits) {
    if (fits.size() < 3) {
        throw RangeError("summarize_hyperbolas: need at least 3 fits");
    }
    std::vector<double> loss;
    std::vector<double> s;
    std::vector<double> b;
    for (const HyperbolaFit& f : fits) {
        loss.push_back(f.target_loss);
        s.push_back(f.S_min);
        b.push_back(f.B_min);
    }
    CriticalSummary out;
    out.S_min = fit_power_law(loss, s);
    out.B_min = fit_power_law(loss, b);
    out.loss_low = *std::min_element(loss.begin(), loss.end());
    out.loss_high = *std::max_element(loss.begin(), loss.end());
    out.warning = "summary fitted on losses in [" + format_double(out.loss_low) + ", " +
                  format_double(out.loss_high) + "]; do not extrapolate";
    return out;
}

CompletePSettings completep_lrs(const CompletePRules& rules, long d, long L, double eta_base) {
    if (d <= 0 || L <= 0) {
        throw RangeError("completep_lrs: d and L must be positive");
    }
    if (!(eta_base > 0.0)) {
        throw RangeError("completep_lrs: eta_base must be positive");
    }
    const double dd = static_cast<double>(d);
    const double ll = static_cast<double>(L);
    CompletePSettings s;
    s.eta_bulk = eta_base / dd;
    s.eta_aux = rules.eta_aux_factor * eta_base;
    s.eps = rules.eps_base / (dd * ll);
    s.sigma_bulk = rules.sigma_base / std::sqrt(dd);
    s.sigma_aux = rules.sigma_aux;
    s.residual_multiplier = rules.residual_numerator / ll;
    s.output_multiplier = rules.output_multiplier;
    return s;
}

double anneal_adjust(double loss) {
    if (!(loss > 0.0)) {
        throw RangeError("anneal_adjust: loss must be positive");
    }
    return loss * (1.0 - kAnnealImprovement);
}

double anneal_unadjust(double loss) {
    if (!(loss > 0.0)) {
        throw RangeError("anneal_unadjust: loss must be positive");
    }
    return loss / (1.0 - kAnnealImprovement);
}

namespace {

PowerLawFit law_from(double A, double alpha) {
    PowerLawFit f;
    f.A = A;
    f.alpha = alpha;
    return f;
}

PowerLawFit law_from_json(const json& j) {
    PowerLawFit f = law_from(j.at("A").get<double>(), j.at("alpha").get<double>());
    f.E = j.value("E", 0.0);
    f.with_intercept = f.E != 0.0;
    return f;
}

PowerLawFit anchored_law(const json& j) {
    const double e = j.at("exponent").get<double>();
    return law_from(j.at("anchor_y").get<double>() / std::pow(j.at("anchor_x").get<double>(), e), e);
}

} // namespace

void load_planner_laws(std::istream& in, const std::string& noise, FlopMethod method, Smoothing smoothing,
                       PlannerLaws& laws) {
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("laws file is not valid JSON: ") + e.what());
    }
    if (j.is_object() && j.contains("result") && j.contains("command")) {
        j = json(j.at("result"));  // CLI envelope
    }
    try {
        if (j.contains("scaling_coefficients")) {
            const json& sc = j.at("scaling_coefficients");
            const std::string table = sc.value("table", "scaling coefficients");
            for (const json& e : sc.at("entries")) {
                if (e.at("noise") != noise || e.at("method") != flop_method_name(method) ||
                    e.at("smoothing") != smoothing_name(smoothing)) {
                    continue;
                }
                const std::string metric = e.at("metric");
                std::optional<PowerLawFit>* slot = metric == "M" ? &laws.M : metric == "L" ? &laws.L : nullptr;
                if (slot && !*slot) {
                    *slot = law_from(e.at("A").get<double>(), e.at("alpha").get<double>());
                    laws.provenance.push_back(metric + "*: " + table + " [" + noise + ", " +
                                              std::string(flop_method_name(method)) + ", " +
                                              std::string(smoothing_name(smoothing)) + "]");
                }
            }
        }
        if (j.contains("hparam_laws")) {
            const json& h = j.at("hparam_laws");
            const std::string table = h.value("table", "hyperparameter laws");
            if (!laws.batch) {
                laws.batch = anchored_law(h.at("batch"));
                laws.provenance.push_back(std::string("B*: ") + table +
                                          (h.at("batch").value("approximate", false) ? " (approximate anchor)" : ""));
            }
            if (!laws.lr) {
                laws.lr = anchored_law(h.at("lr"));
                laws.provenance.push_back("eta*: " + table);
            }
        }
        if (j.contains("laws")) {
            const json& l = j.at("laws");
            if (!laws.M && l.contains("M")) {
                laws.M = law_from_json(l.at("M"));
                laws.provenance.push_back("M*: fit-scaling output");
            }
            if (!laws.L && l.contains("L")) {
                laws.L = law_from_json(l.at("L"));
                laws.provenance.push_back("L*: fit-scaling output");
            }
        }
        if (!laws.batch && j.contains("batch_law")) {
            laws.batch = law_from_json(j.at("batch_law"));
            laws.provenance.push_back("B*: fit-hparams output");
        }
        if (!laws.lr && j.contains("lr_law")) {
            laws.lr = law_from_json(j.at("lr_law"));
            laws.provenance.push_back("eta*: fit-hparams output");
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("laws file: ") + e.what());
    }
}

double invert_flops_per_token(double M, FlopMethod method, long seq_len) {
    if (!(M > 0.0)) {
        throw RangeError("invert_flops_per_token: M must be positive");
    }
    if (method == FlopMethod::method2) {
        return M / 6.0;
    }
    // d = 64 L: P = 12 d^3 / 64, M = 6 P + 12 (d / 64) d N.
    const double n = static_cast<double>(seq_len);
    const auto m_of = [n](double d) { return 1.125 * d * d * d + 0.1875 * n * d * d; };
    double lo = 0.0;
    double hi = 1.0;
    while (m_of(hi) < M) {
        hi *= 2.0;
        if (!std::isfinite(hi)) {
            throw NumericalError("invert_flops_per_token: no width reaches M");
        }
    }
    for (int it = 0; it < 200 && hi - lo > 1e-14 * hi; ++it) {
        const double mid = 0.5 * (lo + hi);
        (m_of(mid) < M ? lo : hi) = mid;
    }
    const double d = 0.5 * (lo + hi);
    return 0.1875 * d * d * d;
}

std::vector<ModelSpec> default_family(long seq_len, long vocab_size) {
    std::vector<ModelSpec> out;
    for (long L = 1; L <= 128; ++L) {
        ModelSpec m;
        m.layers = L;
        m.hidden = 64 * L;
        m.heads = L;
        m.seq_len = seq_len;
        m.vocab_size = vocab_size;
        m.params = 12.0 * static_cast<double>(L) * static_cast<double>(m.hidden) * static_cast<double>(m.hidden);
        m.name = "L" + std::to_string(L) + "-D" + std::to_string(m.hidden);
        out.push_back(m);
    }
    return out;
}

PlanResult plan_run(double C, const PlannerLaws& laws, const PlanOptions& opts) {
    if (!(C > 0.0) || !std::isfinite(C)) {
        throw RangeError("plan_run: budget must be positive and finite");
    }
    if (!laws.M) {
        throw RangeError("plan_run: missing law M*(C)");
    }
    if (!laws.L) {
        throw RangeError("plan_run: missing law L*(C)");
    }
    if (!laws.batch) {
        throw RangeError("plan_run: missing batch-size law");
    }
    if (!laws.lr) {
        throw RangeError("plan_run: missing learning-rate law");
    }
    PlanResult r;
    r.C = C;
    r.M = (*laws.M)(C);
    r.D = C / r.M;
    r.P = invert_flops_per_token(r.M, opts.method, opts.seq_len);
    r.loss = (*laws.L)(C);
    r.bpb = nats_to_bpb(r.loss);
    r.loss_annealed = anneal_adjust(r.loss);

    const std::vector<ModelSpec> family = opts.family.empty() ? default_family(opts.seq_len) : opts.family;
    double best = std::numeric_limits<double>::infinity();
    for (const ModelSpec& m : family) {
        const double fm = flops_per_token(m, opts.method);
        const double dist = std::abs(std::log(fm) - std::log(r.M));
        if (dist < best) {
            best = dist;
            r.architecture = m;
            r.architecture_M = fm;
        }
    }

    r.batch_tokens = (*laws.batch)(r.D);
    r.batch_seqs = std::max(1L, std::lround(r.batch_tokens / static_cast<double>(opts.seq_len)));
    r.eta_base = (*laws.lr)(r.batch_tokens);
    r.groups = completep_lrs(opts.rules, r.architecture.hidden, r.architecture.layers, r.eta_base);
    r.beta2 = opts.beta2(r.batch_seqs);
    r.provenance = laws.provenance;
    return r;
}

} // namespace gidd
