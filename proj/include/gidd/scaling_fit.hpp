#pragma once

#include "gidd/parallel.hpp"
#include "gidd/runs.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gidd {

enum class Smoothing { raw, sq_fit };

std::string_view smoothing_name(Smoothing s);
Smoothing parse_smoothing(std::string_view name);

struct CurveReadOptions {
    std::size_t window = 5;  // points in the local line fit; 1 means nearest neighbour
    bool log_loss = true;    // fit in (log C, log loss) instead of (log C, loss)
};

struct CurveReading {
    double value = 0.0;
    bool low_quality = false;  // nearest-neighbour reading (window 1 or a single-point curve)
};

// Loss of one run at cumulative compute C. Empty when C lies outside the
// run's FLOP range. A target that coincides with a curve point returns
// that point's loss.
std::optional<CurveReading> loss_at_flops(const RunRecord& run, FlopMethod method, double flops,
                                          const CurveReadOptions& opts = {});

// Compute at which the run first reaches target_loss, read on the local line
// around the first crossing. Empty if the curve never gets there.
std::optional<CurveReading> flops_at_loss(const RunRecord& run, FlopMethod method, double target_loss,
                                          const CurveReadOptions& opts = {});

struct IsoFlopPoint {
    double target_C = 0.0;
    double model_M = 0.0;   // FLOPs per token
    double loss = 0.0;      // nats
    double tokens_D = 0.0;  // target_C / model_M
    double params_P = 0.0;
    Smoothing source = Smoothing::raw;
    std::string model;
    std::string run_id;     // best (batch, lr) configuration for this model and target
    bool low_quality = false;
};

struct IsoFlopExtraction {
    std::vector<IsoFlopPoint> points;  // ordered by target, then model_M
    std::vector<std::string> skipped;  // "run_id @ C" for targets outside a run's range
};

// One raw point per (model, target). Runs must share a single noise type.
IsoFlopExtraction extract_isoflop(std::span<const RunRecord> runs, std::span<const double> targets,
                                  FlopMethod method, const CurveReadOptions& opts = {});

struct ParabolaOptimum {
    double log_M = 0.0;
    double M = 0.0;
    double loss = 0.0;
    bool fallback = false;  // raw minimum was used
    std::string warning;
};

// Least-squares quadratic in (log M, loss) over `window` sizes centred on the
// raw minimum. Concave, degenerate or out-of-range vertices fall back to the
// raw minimum.
ParabolaOptimum parabola_optimum(std::span<const double> log_M, std::span<const double> loss,
                                 std::size_t window = 5);

struct Interval {
    double low = 0.0;
    double high = 0.0;
};

// y = A x^alpha + E. R^2 is measured in log-log space.
struct PowerLawFit {
    double A = 0.0;
    double alpha = 0.0;
    double E = 0.0;
    bool with_intercept = false;
    double r_squared = 0.0;
    std::size_t n_points = 0;
    std::optional<Interval> ci_A;
    std::optional<Interval> ci_alpha;
    std::optional<Interval> ci_E;

    double operator()(double x) const;
};

PowerLawFit fit_power_law(std::span<const double> xs, std::span<const double> ys, bool with_intercept = false);

enum class CiLevel { two_sigma, p95, p99 };

std::string_view ci_level_name(CiLevel level);
CiLevel parse_ci_level(std::string_view name);
double ci_coverage(CiLevel level);

// Returns the coefficients of one fit; may throw on a degenerate resample.
using FitProcedure = std::function<std::vector<double>(std::span<const double>, std::span<const double>)>;

struct BootstrapOptions {
    std::size_t n_resamples = 1000;
    CiLevel level = CiLevel::two_sigma;
    std::uint64_t seed = 0;
    std::size_t min_distinct_x = 3;
    std::size_t max_redraws = 100;
    Exec exec = Exec::parallel;
};

// Case-resampling percentile intervals, one per coefficient. Each interval is
// widened if needed so that it contains the full-sample estimate.
std::vector<Interval> bootstrap_ci(const FitProcedure& fit, std::span<const double> xs, std::span<const double> ys,
                                   const BootstrapOptions& opts = {});

// Attaches bootstrap intervals for (A, alpha[, E]) to fit.
void attach_bootstrap(PowerLawFit& fit, std::span<const double> xs, std::span<const double> ys,
                      const BootstrapOptions& opts);

struct FrontierPoint {
    double C = 0.0;
    double M = 0.0;
    double D = 0.0;
    double P = 0.0;
    double loss = 0.0;
    bool fallback = false;
};

struct ScalingFitOptions {
    Smoothing smoothing = Smoothing::sq_fit;
    CurveReadOptions read;
    std::size_t parabola_window = 5;
    std::optional<BootstrapOptions> bootstrap;  // no intervals when empty
};

struct ComputeOptimalLaws {
    PowerLawFit M;
    PowerLawFit D;
    PowerLawFit P;
    PowerLawFit L;
    double complementarity = 0.0;  // alpha_M + alpha_D
    FlopMethod method = FlopMethod::method1;
    Smoothing smoothing = Smoothing::sq_fit;
    std::vector<FrontierPoint> frontier;
    std::vector<std::string> warnings;
};

// P* is read off the observed (M, P) pairs by piecewise log-log interpolation.
ComputeOptimalLaws compute_optimal_laws(std::span<const RunRecord> runs, std::span<const double> targets,
                                        FlopMethod method, const ScalingFitOptions& opts = {});

} // namespace gidd
