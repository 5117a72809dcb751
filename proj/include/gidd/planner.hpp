#pragma once

#include "gidd/runs.hpp"
#include "gidd/scaling_fit.hpp"

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gidd {

// y = A x^alpha fitted by log-log OLS, with Student-t intervals.
struct LawFit {
    PowerLawFit fit;
    Interval alpha_ci;
    Interval A_ci;
    double level = 0.99;
    double slope_stderr = 0.0;
    std::string x_unit;
    std::string y_unit;
};

LawFit fit_log_law(std::span<const double> xs, std::span<const double> ys, double level = 0.99);

// B* (tokens) against training tokens D.
LawFit fit_batch_law(std::span<const double> tokens_D, std::span<const double> batch_tokens, double level = 0.99);
// eta_base* against batch size in tokens.
LawFit fit_lr_law(std::span<const double> batch_tokens, std::span<const double> lr, double level = 0.99);

struct HparamPoint {
    std::string model;
    double target_loss = 0.0;
    double tokens_D = 0.0;  // tokens the best configuration needs to reach target_loss
    long batch_seqs = 0;
    double batch_tokens = 0.0;
    double lr = 0.0;
};

// Steps needed by each batch size (best lr) to reach one loss level on one model.
struct IsoLossCurve {
    std::string model;
    double target_loss = 0.0;
    std::vector<double> batch_seqs;
    std::vector<double> steps;
};

struct HparamExtraction {
    std::vector<HparamPoint> points;
    std::vector<IsoLossCurve> iso_loss;
    std::vector<double> target_losses;
};

// Log-spaced levels below every run's starting loss and above the lowest level
// that two batch sizes of some model reach. RangeError if empty.
std::vector<double> auto_loss_levels(std::span<const RunRecord> runs, std::size_t n_levels);

// For every (model, target loss): the best lr per batch size, then the batch
// size that reaches the target with the fewest tokens.
HparamExtraction optimal_hparam_points(std::span<const RunRecord> runs, std::span<const double> target_losses,
                                       const CurveReadOptions& read = {});

// ((S / S_min)^alpha - 1)((B / B_min)^alpha - 1) = 1
struct HyperbolaFit {
    double S_min = 0.0;
    double B_min = 0.0;
    double alpha = 0.0;
    double residual = 0.0;  // RMS orthogonal distance in (log B, log S)
    double target_loss = 0.0;
    std::string unit = "sequences";
    int iterations = 0;

    // Steps needed at batch size B (> B_min).
    double steps_at(double B) const;
};

// Orthogonal least squares in (log B, log S) with one curve parameter per point.
HyperbolaFit fit_hyperbola(std::span<const double> B, std::span<const double> S, std::string unit = "sequences",
                           double target_loss = 0.0);

struct TokenOptimal {
    double B = 0.0;
    double S = 0.0;
    double D = 0.0;
};

TokenOptimal token_optimal(const HyperbolaFit& fit);

// Power-law summaries of S_min and B_min against the target loss.
struct CriticalSummary {
    PowerLawFit S_min;
    PowerLawFit B_min;
    double loss_low = 0.0;
    double loss_high = 0.0;
    std::string warning;
};

CriticalSummary summarize_hyperbolas(std::span<const HyperbolaFit> fits);

struct CompletePRules {
    double sigma_base = 0.4;
    double sigma_aux = 0.02;
    double eta_base_ref = 0.3;
    long eta_base_ref_batch_seqs = 64;
    double eta_aux_factor = 0.02;
    double eps_base = 1e-8;
    double residual_numerator = 4.0;
    double output_multiplier = 512.0;
};

struct CompletePSettings {
    double eta_bulk = 0.0;
    double eta_aux = 0.0;
    double eps = 0.0;
    double sigma_bulk = 0.0;
    double sigma_aux = 0.0;
    double residual_multiplier = 0.0;
    double output_multiplier = 0.0;
};

CompletePSettings completep_lrs(const CompletePRules& rules, long d, long L, double eta_base);

inline constexpr double kAnnealImprovement = 0.0245;
inline constexpr double kAnnealImprovementCi = 0.00138;

double anneal_adjust(double loss);
double anneal_unadjust(double loss);

struct Beta2Policy {
    double base = 0.99;
    double large_batch = 0.98;
    long threshold_seqs = 256;

    double operator()(long batch_seqs) const { return batch_seqs >= threshold_seqs ? large_batch : base; }
};

// Laws consumed by plan_run. batch maps tokens D to batch tokens; lr maps
// batch tokens to eta_base.
struct PlannerLaws {
    std::optional<PowerLawFit> M;
    std::optional<PowerLawFit> L;
    std::optional<PowerLawFit> batch;
    std::optional<PowerLawFit> lr;
    std::vector<std::string> provenance;
};

// Reads the laws present in either the bundled table fixture (selecting
// noise, method and smoothing) or a fit-scaling / fit-hparams output, and
// fills only the fields that are still empty.
void load_planner_laws(std::istream& in, const std::string& noise, FlopMethod method, Smoothing smoothing,
                       PlannerLaws& laws);

// Parameters on the d = 64 L family whose flops_per_token equals M.
double invert_flops_per_token(double M, FlopMethod method, long seq_len);

// d = 64 L for L in [1, 128].
std::vector<ModelSpec> default_family(long seq_len = 2048, long vocab_size = 131072);

struct PlanOptions {
    FlopMethod method = FlopMethod::method1;
    long seq_len = 2048;
    std::vector<ModelSpec> family;  // default_family() when empty
    Beta2Policy beta2;
    CompletePRules rules;
};

struct PlanResult {
    double C = 0.0;
    double M = 0.0;
    double P = 0.0;
    double D = 0.0;
    double loss = 0.0;
    double bpb = 0.0;
    double loss_annealed = 0.0;
    ModelSpec architecture;
    double architecture_M = 0.0;
    double batch_tokens = 0.0;
    long batch_seqs = 0;
    double eta_base = 0.0;
    CompletePSettings groups;
    double beta2 = 0.0;
    std::vector<std::string> provenance;
};

// Throws RangeError naming the first missing law.
PlanResult plan_run(double C, const PlannerLaws& laws, const PlanOptions& opts = {});

} // namespace gidd
