#pragma once

#include "gidd/denoiser.hpp"
#include "gidd/noise_process.hpp"
#include "gidd/parallel.hpp"
#include "gidd/rng.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace gidd {

// Sum p_i log(p_i / q_i). Throws if q has no mass where p does.
double kl_divergence(std::span<const double> p, std::span<const double> q);

// Point-wise Itakura-Saito divergence p/q - log(p/q) - 1.
double is_divergence(double p, double q);

// Floor applied to the Itakura-Saito inputs so exact zeros in a denoiser's
// output give a large finite loss instead of inf/nan.
inline constexpr double kIsFloor = 1e-30;

// w_lambda(x)_z * [KL(q(x) || q(x_hat)) + D_IS(q(x)_z || q(x_hat)_z)] at one
// position. q(x_hat) = s(lambda) x_hat + s(-lambda) pi_lambda.
double pointwise_loss(const MixingSchedule& sched, const Vocab& vocab, Token x, Token z, double lambda,
                      std::span<const double> x_hat);

// Same, over a precomputed noise level. If grad is non-empty it receives
// d loss / d x_hat (one entry per vocabulary symbol).
double pointwise_loss(const NoiseLevel& lvl, Token x, Token z, std::span<const double> x_hat,
                      std::span<double> grad = {});

// Proposal over log-SNR used by the Monte Carlo estimator. Proper densities
// are truncated to [lambda_min, lambda_max] and renormalized there.
struct LambdaDistribution {
    enum class Kind { linear_schedule, uniform_on_range, unit };

    Kind kind = Kind::linear_schedule;
    double lambda_min = -9.0;
    double lambda_max = 9.0;

    static LambdaDistribution for_schedule(const MixingSchedule& sched, Kind kind);

    bool proper() const { return kind != Kind::unit; }
    double density(double lambda) const;
    // Unit density samples uniformly on the range but weights by 1.
    double sample(Rng& rng) const;
};

struct ElboEstimate {
    enum class Estimator { monte_carlo, quadrature };

    double value = 0.0;      // nats per token, integral term only
    double std_error = 0.0;  // zero for quadrature
    std::size_t n_samples = 0;
    Estimator estimator = Estimator::quadrature;
};

ElboEstimate nelbo_monte_carlo(const TokenSequence& seq, const Denoiser& denoiser,
                               const MixingSchedule& sched, const Vocab& vocab,
                               const LambdaDistribution& p_lambda, std::size_t n_samples,
                               std::uint64_t seed, Exec exec = Exec::parallel);

enum class QuadratureRule { trapezoid, simpson };

struct QuadratureOptions {
    std::size_t n_grid = 512;
    QuadratureRule rule = QuadratureRule::simpson;
    Exec exec = Exec::parallel;
};

// Deterministic integral over the clamped log-SNR range; the expectation over
// z is taken exactly by enumerating every noisy sequence with positive mass.
ElboEstimate nelbo_quadrature(const TokenSequence& seq, const Denoiser& denoiser,
                              const MixingSchedule& sched, const Vocab& vocab,
                              const QuadratureOptions& opts = {});

struct DatasetElbo {
    double mean = 0.0;                 // weighted mean over the dataset, nats per token
    std::vector<double> per_sequence;  // nats per token
};

// Quadrature NELBO for every sequence of a dataset, sharing one denoiser call
// per (lambda, z) across all sequences.
DatasetElbo dataset_nelbo_quadrature(const EnumerableDataset& data, const Denoiser& denoiser,
                                     const MixingSchedule& sched, const Vocab& vocab,
                                     const QuadratureOptions& opts = {});

// Clean-token distribution implied by x_hat for a token observed at level lvl:
// p(x = v | z) proportional to x_hat(v) * q_lambda(z | v). This is the decoder
// consistent with the q_lambda(x_hat) parameterization.
void clean_posterior(const NoiseLevel& lvl, Token z, std::span<const double> x_hat, std::span<double> out);

// The terms outside the integral for the clamped process, in nats per token:
// reconstruction -E[log p(x | z)] at lambda_max (decoder from clean_posterior)
// plus KL(q(x) || prior) at lambda_min.
// Adding them to the integral term gives a proper upper bound on -log p(x).
struct EndpointTerms {
    double reconstruction = 0.0;
    double prior_kl = 0.0;
    double total() const { return reconstruction + prior_kl; }
};

EndpointTerms nelbo_endpoint_terms(const TokenSequence& seq, const Denoiser& denoiser,
                                   const MixingSchedule& sched, const Vocab& vocab);

// Unweighted training objective (unit density): sum of pointwise losses over
// the positions where loss_mask is non-zero (empty mask = all positions).
double surrogate_loss(const TokenSequence& x, const TokenSequence& z, std::span<const double> lambdas,
                      const DenoiserOutput& x_hat, const MixingSchedule& sched, const Vocab& vocab,
                      std::span<const std::uint8_t> loss_mask = {});

// Draws z ~ q_lambda(x) per position, then evaluates the surrogate loss.
double surrogate_loss(const TokenSequence& x, const Denoiser& denoiser, const MixingSchedule& sched,
                      const Vocab& vocab, std::span<const double> lambdas, Rng& rng);

TokenSequence sample_forward(const TokenSequence& x, std::span<const double> lambdas,
                             const MixingSchedule& sched, const Vocab& vocab, Rng& rng);

inline constexpr double kNatsToBpb = 0.34124;

double nats_to_bpb(double nll, double factor = kNatsToBpb);

} // namespace gidd
