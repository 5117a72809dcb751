#include "gidd/elbo.hpp"
#include "gidd/error.hpp"
#include "gidd/planner.hpp"
#include "gidd/rng.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

using namespace gidd;

namespace {

std::vector<double> log_spaced(double lo, double hi, std::size_t n) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        v[i] = lo * std::pow(hi / lo, static_cast<double>(i) / static_cast<double>(n - 1));
    }
    return v;
}

// Steps on the iso-loss hyperbola at batch size B > B_min.
double hyperbola_steps(double S_min, double B_min, double alpha, double B) {
    const double u = std::pow(B / B_min, alpha) - 1.0;
    return S_min * std::pow(1.0 + 1.0 / u, 1.0 / alpha);
}

// Golden-section minimum of D = B S(B) over log B.
double numeric_min_tokens(double S_min, double B_min, double alpha) {
    double lo = std::log(B_min) + 1e-6;
    double hi = std::log(B_min) + 60.0 / alpha;
    const double g = 0.5 * (std::sqrt(5.0) - 1.0);
    auto D = [&](double x) { return std::exp(x) * hyperbola_steps(S_min, B_min, alpha, std::exp(x)); };
    for (int it = 0; it < 300; ++it) {
        const double a = hi - g * (hi - lo);
        const double b = lo + g * (hi - lo);
        (D(a) < D(b) ? hi : lo) = D(a) < D(b) ? b : a;
    }
    return D(0.5 * (lo + hi));
}

PlannerLaws fixture_laws(const std::string& noise = "uniform") {
    std::ifstream in(std::string(GIDD_SOURCE_DIR) + "/fixtures/published_laws.json");
    REQUIRE(in);
    PlannerLaws laws;
    load_planner_laws(in, noise, FlopMethod::method1, Smoothing::sq_fit, laws);
    return laws;
}

} // namespace

TEST_CASE("batch and learning-rate laws") {
    const auto D = log_spaced(1e8, 1e11, 10);
    std::vector<double> B;
    for (double d : D) {
        B.push_back(0.01 * std::pow(d, 0.82));
    }
    const LawFit batch = fit_batch_law(D, B);
    CHECK(std::abs(batch.fit.alpha - 0.82) <= 1e-10);
    CHECK(batch.fit.A == doctest::Approx(0.01).epsilon(1e-9));
    CHECK(batch.alpha_ci.high - batch.alpha_ci.low <= 1e-8);

    std::vector<double> seqs;
    for (double b : B) {
        seqs.push_back(b / 2048.0);
    }
    CHECK(std::abs(fit_batch_law(D, seqs).fit.alpha - 0.82) <= 1e-10);
    std::vector<double> D_seqs;
    for (double d : D) {
        D_seqs.push_back(d / 2048.0);
    }
    CHECK(std::abs(fit_batch_law(D_seqs, B).fit.alpha - 0.82) <= 1e-10);

    const auto Bt = log_spaced(8192, 4e6, 8);
    std::vector<double> lr;
    for (double b : Bt) {
        lr.push_back(0.3 * std::pow(b / 131072.0, 0.34));
    }
    const LawFit l = fit_lr_law(Bt, lr);
    CHECK(std::abs(l.fit.alpha - 0.34) <= 1e-10);
    CHECK(l.fit(64.0 * 2048) == doctest::Approx(0.3).epsilon(1e-12));

    Rng rng(12);
    std::vector<double> slopes;
    const auto Dn = log_spaced(1e8, 1e11, 20);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> Bn;
        for (double d : Dn) {
            Bn.push_back(0.01 * std::pow(d, 0.82) * std::exp(0.1 * rng.normal()));
        }
        slopes.push_back(fit_batch_law(Dn, Bn).fit.alpha);
    }
    std::nth_element(slopes.begin(), slopes.begin() + 50, slopes.end());
    CHECK(std::abs(slopes[50] - 0.82) <= 0.05);

    const double flat[] = {5.0, 5.0, 5.0};
    CHECK_THROWS_AS(fit_batch_law(flat, flat), RangeError);
    const double two[] = {1.0, 2.0};
    CHECK_THROWS_AS(fit_lr_law(two, two), RangeError);
}

TEST_CASE("fixture laws carry the published exponents and the reference anchor") {
    const PlannerLaws laws = fixture_laws();
    REQUIRE(laws.batch);
    REQUIRE(laws.lr);
    CHECK(laws.batch->alpha == 0.82);
    CHECK(laws.lr->alpha == 0.34);
    CHECK((*laws.lr)(64.0 * 2048) == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(laws.M->A == 0.00618);
    CHECK(laws.M->alpha == 0.58879);
    CHECK(laws.L->A == 31.26171);
    CHECK(laws.L->alpha == -0.05219);
    CHECK(laws.provenance.size() == 4);
}

TEST_CASE("hyperbola fit recovers generated parameters") {
    for (double alpha : {0.1, 0.15, 0.2}) {
        // Both arms: the token-optimal batch sits at 2^(1/alpha) B_min.
        const auto B = log_spaced(16.0 * 1.05, 16.0 * std::pow(4.0, 1.0 / alpha), 12);
        std::vector<double> S;
        for (double b : B) {
            S.push_back(hyperbola_steps(500.0, 16.0, alpha, b));
        }
        const HyperbolaFit f = fit_hyperbola(B, S);
        CHECK(std::abs(f.S_min / 500.0 - 1.0) <= 1e-6);
        CHECK(std::abs(f.B_min / 16.0 - 1.0) <= 1e-6);
        CHECK(std::abs(f.alpha / alpha - 1.0) <= 1e-6);
        CHECK(f.residual <= 1e-8);
        CHECK(f.steps_at(200.0) == doctest::Approx(hyperbola_steps(500.0, 16.0, alpha, 200.0)).epsilon(1e-6));
    }

    Rng rng(21);
    std::vector<double> errs;
    const auto B = log_spaced(16.0 * 1.05, 16.0 * std::pow(4.0, 1.0 / 0.15), 12);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> S;
        for (double b : B) {
            S.push_back(hyperbola_steps(500.0, 16.0, 0.15, b) * std::exp(0.02 * rng.normal()));
        }
        try {
            errs.push_back(std::abs(fit_hyperbola(B, S).B_min / 16.0 - 1.0));
        } catch (const NumericalError&) {
            errs.push_back(1.0);
        }
    }
    std::nth_element(errs.begin(), errs.begin() + 50, errs.end());
    CHECK(errs[50] <= 0.05);

    const auto arm = log_spaced(1e5, 1e6, 6);
    std::vector<double> flat;
    for (double b : arm) {
        flat.push_back(hyperbola_steps(500.0, 16.0, 0.15, b));
    }
    CHECK_THROWS(fit_hyperbola(arm, flat));
    const double three[] = {1.0, 2.0, 3.0};
    CHECK_THROWS_AS(fit_hyperbola(three, three), RangeError);
}

TEST_CASE("token-optimal point") {
    HyperbolaFit h;
    h.S_min = 500.0;
    h.B_min = 16.0;
    h.alpha = 0.2;
    TokenOptimal t = token_optimal(h);
    CHECK(t.B == doctest::Approx(32.0 * 16.0).epsilon(1e-12));
    CHECK(t.B * t.S == doctest::Approx(t.D).epsilon(1e-14));
    h.alpha = 1.0;
    t = token_optimal(h);
    CHECK(t.B == 32.0);
    CHECK(t.S == 1000.0);
    CHECK(t.D == 4.0 * 16.0 * 500.0);

    Rng rng(50);
    for (int draw = 0; draw < 50; ++draw) {
        HyperbolaFit r;
        r.S_min = std::exp(4.0 + 6.0 * rng.uniform());
        r.B_min = std::exp(1.0 + 5.0 * rng.uniform());
        r.alpha = 0.05 + 0.95 * rng.uniform();
        const double closed = token_optimal(r).D;
        CHECK(std::abs(numeric_min_tokens(r.S_min, r.B_min, r.alpha) / closed - 1.0) <= 1e-3);
        CHECK(hyperbola_steps(r.S_min, r.B_min, r.alpha, token_optimal(r).B) ==
              doctest::Approx(token_optimal(r).S).epsilon(1e-9));
    }
}

TEST_CASE("critical-batch summaries") {
    std::vector<HyperbolaFit> fits;
    for (double loss : {3.0, 2.8, 2.6, 2.4}) {
        HyperbolaFit f;
        f.target_loss = loss;
        f.S_min = 100.0 * std::pow(loss, -4.0);
        f.B_min = 2.0 * std::pow(loss, -3.0);
        f.alpha = 0.15;
        fits.push_back(f);
    }
    const CriticalSummary s = summarize_hyperbolas(fits);
    CHECK(s.S_min.alpha == doctest::Approx(-4.0).epsilon(1e-10));
    CHECK(s.B_min.alpha == doctest::Approx(-3.0).epsilon(1e-10));
    CHECK(s.loss_low == 2.4);
    CHECK(s.loss_high == 3.0);
    CHECK_FALSE(s.warning.empty());
    fits.resize(2);
    CHECK_THROWS_AS(summarize_hyperbolas(fits), RangeError);
}

TEST_CASE("CompleteP settings") {
    const CompletePRules rules;
    const CompletePSettings s = completep_lrs(rules, 512, 8, 0.3);
    CHECK(s.eta_bulk == doctest::Approx(5.859e-4).epsilon(1e-3));
    CHECK(s.eta_bulk == 0.3 / 512);
    CHECK(s.eps == doctest::Approx(2.441e-12).epsilon(1e-3));
    CHECK(s.sigma_bulk == doctest::Approx(0.01768).epsilon(1e-3));
    CHECK(s.residual_multiplier == 0.5);
    CHECK(s.eta_aux == doctest::Approx(0.006).epsilon(1e-14));
    CHECK(s.sigma_aux == 0.02);
    CHECK(s.output_multiplier == 512.0);
    const CompletePSettings wide = completep_lrs(rules, 2048, 8, 0.3);
    CHECK(wide.sigma_bulk == doctest::Approx(s.sigma_bulk / 2.0).epsilon(1e-14));
    CHECK(wide.eta_bulk == doctest::Approx(s.eta_bulk / 4.0).epsilon(1e-14));
    for (const ModelSpec& m : reference_shapes()) {
        const CompletePSettings c = completep_lrs(rules, m.hidden, m.layers, 0.3);
        CHECK(c.eta_bulk == 0.3 / static_cast<double>(m.hidden));
        CHECK(c.eps == 1e-8 / static_cast<double>(m.hidden * m.layers));
        CHECK(c.sigma_bulk == 0.4 / std::sqrt(static_cast<double>(m.hidden)));
        CHECK(c.residual_multiplier == 4.0 / static_cast<double>(m.layers));
    }
    CHECK_THROWS_AS(completep_lrs(rules, 0, 8, 0.3), RangeError);
}

TEST_CASE("annealing correction") {
    CHECK(anneal_adjust(1.0) == doctest::Approx(0.9755).epsilon(1e-15));
    CHECK_THROWS_AS(anneal_adjust(0.0), RangeError);
    Rng rng(1);
    for (int k = 0; k < 100; ++k) {
        const double l = 0.1 + 10.0 * rng.uniform();
        CHECK(std::abs(anneal_unadjust(anneal_adjust(l)) - l) <= 1e-12);
    }
}

TEST_CASE("plan at 1e21 FLOPs with the uniform smoothed coefficients") {
    const PlannerLaws laws = fixture_laws();
    const PlanResult r = plan_run(1e21, laws);
    CHECK(r.M == doctest::Approx(1.43e10).epsilon(0.01));
    CHECK(std::abs(r.loss / 2.51 - 1.0) <= 0.005);
    CHECK(r.bpb == doctest::Approx(0.855).epsilon(0.002));
    CHECK(r.bpb == nats_to_bpb(r.loss));
    CHECK(std::abs(r.M * r.D / 1e21 - 1.0) <= 1e-9);
    CHECK(flops_per_token(ModelSpec{"x", 1, 64, 1, 2048, r.P, 1}, FlopMethod::method1) > 0.0);
    CHECK(r.loss_annealed == anneal_adjust(r.loss));
    CHECK(std::abs(std::log(r.architecture_M / r.M)) <= std::log(1.2));
    CHECK(r.beta2 == (r.batch_seqs >= 256 ? 0.98 : 0.99));
    CHECK(r.eta_base == doctest::Approx((*laws.lr)(r.batch_tokens)).epsilon(1e-14));

    PlannerLaws missing = laws;
    missing.lr.reset();
    CHECK_THROWS_AS(plan_run(1e21, missing), RangeError);
    CHECK_THROWS_AS(plan_run(-1.0, laws), RangeError);
}

TEST_CASE("FLOP inversion on the d = 64 L family") {
    for (double d : {256.0, 1000.0, 4096.0}) {
        const double P = 0.1875 * d * d * d;
        const double M = 6.0 * P + 12.0 * (d / 64.0) * d * 2048.0;
        CHECK(invert_flops_per_token(M, FlopMethod::method1, 2048) == doctest::Approx(P).epsilon(1e-10));
    }
    CHECK(invert_flops_per_token(600.0, FlopMethod::method2, 2048) == 100.0);
    for (const ModelSpec& m : default_family()) {
        CHECK(m.hidden == 64 * m.layers);
    }
}

TEST_CASE("plans are monotone in the budget and set beta2 by batch size") {
    const PlannerLaws laws = fixture_laws();
    PlanResult prev = plan_run(1e17, laws);
    for (double C : log_spaced(2e17, 1e25, 30)) {
        const PlanResult r = plan_run(C, laws);
        CHECK(r.M >= prev.M);
        CHECK(r.D >= prev.D);
        CHECK(r.loss <= prev.loss);
        CHECK(r.batch_seqs >= prev.batch_seqs);
        CHECK(r.beta2 == (r.batch_seqs >= 256 ? 0.98 : 0.99));
        prev = r;
    }
    CHECK(plan_run(1e25, laws).beta2 == 0.98);
    const Beta2Policy policy;
    CHECK(policy(255) == 0.99);
    CHECK(policy(256) == 0.98);
}

TEST_CASE("laws file from fit outputs") {
    std::stringstream ss(R"({"laws": {"M": {"A": 2.0, "alpha": 0.5}, "L": {"A": 30.0, "alpha": -0.05}},
                            "batch_law": {"A": 1.0, "alpha": 0.8}, "lr_law": {"A": 0.001, "alpha": 0.3}})");
    PlannerLaws laws;
    load_planner_laws(ss, "uniform", FlopMethod::method1, Smoothing::sq_fit, laws);
    const PlanResult r = plan_run(1e20, laws);
    CHECK(r.M == doctest::Approx(2e10));
    std::stringstream bad("{not json");
    CHECK_THROWS_AS(load_planner_laws(bad, "uniform", FlopMethod::method1, Smoothing::sq_fit, laws),
                    ValidationError);
}
