#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace gidd {

using Token = std::uint32_t;

// Symbol inventory. The mask is an ordinary index; the optional empty/pad
// symbol is a regular non-mask token and takes part in uniform noise.
struct Vocab {
    std::size_t size = 0;
    Token mask_id = 0;
    std::optional<Token> empty_id;

    // Mask defaults to the last index.
    static Vocab with_mask_last(std::size_t size, std::optional<Token> empty_id = std::nullopt);

    void validate() const;
    bool is_mask(Token t) const { return t == mask_id; }
    std::size_t n_clean() const { return size - 1; }
};

// Hybrid mixing distribution pi_lambda = s(a*lambda + b) * u + (1 - s(a*lambda + b)) * m,
// with s the logistic sigmoid, u uniform over non-mask symbols and m the mask one-hot.
struct MixingSchedule {
    double a = 1.0;
    double b = 0.0;
    double lambda_min = -9.0;
    double lambda_max = 9.0;

    void validate() const;
    bool in_range(double lambda) const { return lambda >= lambda_min && lambda <= lambda_max; }
    void require_in_range(double lambda) const;

    // Diffusion time t (linear schedule alpha = 1 - t) at which masking and
    // uniform noise are mixed 50/50: t = s(b / a).
    double transition_time() const;
};

enum class NoiseType { masked, low_uniform, balanced, high_uniform, uniform };

double noise_shift(NoiseType type);
std::string_view noise_name(NoiseType type);
NoiseType parse_noise_type(std::string_view name);
MixingSchedule schedule_for(NoiseType type);
inline constexpr NoiseType kAllNoiseTypes[] = {NoiseType::masked, NoiseType::low_uniform,
                                               NoiseType::balanced, NoiseType::high_uniform,
                                               NoiseType::uniform};

// Probability vector over the full vocabulary (mask included).
struct CategoricalVec {
    std::vector<double> probs;

    CategoricalVec() = default;
    explicit CategoricalVec(std::size_t n, double fill = 0.0) : probs(n, fill) {}
    explicit CategoricalVec(std::vector<double> p) : probs(std::move(p)) {}

    std::size_t size() const { return probs.size(); }
    double operator[](std::size_t i) const { return probs[i]; }
    double& operator[](std::size_t i) { return probs[i]; }
    double sum() const;
    bool is_valid(double tol = 1e-12) const;

    static CategoricalVec one_hot(std::size_t n, Token t);
};

// Everything the forward process needs at one log-SNR. Because pi_lambda only
// takes two distinct values (non-mask, mask), marginals, transitions and the
// ELBO weight reduce to closed forms over this record.
struct NoiseLevel {
    double lambda = 0.0;
    double alpha = 0.0;      // s(lambda), signal mass
    double beta = 0.0;       // s(-lambda), noise mass
    double pi_clean = 0.0;   // pi_lambda on every non-mask symbol
    double pi_mask = 0.0;    // pi_lambda on the mask
    double dpi_clean = 0.0;  // d pi / d lambda on every non-mask symbol
    double dpi_mask = 0.0;
    Token mask_id = 0;

    double pi(Token z) const { return z == mask_id ? pi_mask : pi_clean; }
    double dpi(Token z) const { return z == mask_id ? dpi_mask : dpi_clean; }

    // q_lambda(z | x)
    double marginal(Token x, Token z) const { return (x == z ? alpha : 0.0) + beta * pi(z); }

    // Numerator of the ELBO weight: s(-lambda) * (pi - pi')_z.
    double weight_numerator(Token z) const { return beta * (pi(z) - dpi(z)); }
};

NoiseLevel noise_level(const MixingSchedule& sched, const Vocab& vocab, double lambda);

CategoricalVec mixing_dist(const MixingSchedule& sched, const Vocab& vocab, double lambda);

// Signed derivative of pi_lambda; entries sum to zero.
std::vector<double> mixing_dist_deriv(const MixingSchedule& sched, const Vocab& vocab, double lambda);

CategoricalVec forward_marginal(const MixingSchedule& sched, const Vocab& vocab, Token x, double lambda);

// q(z_t | z_s) for lambda_s >= lambda_t (s is the cleaner of the two levels).
CategoricalVec forward_transition(const MixingSchedule& sched, const Vocab& vocab, Token z_s,
                                  double lambda_s, double lambda_t);

// w_lambda(x)_z = [s(-lambda)(pi - pi')]_z / q_lambda(x)_z
double elbo_weight(const MixingSchedule& sched, const Vocab& vocab, Token x, Token z, double lambda);

// Generative prior: the clamped marginal q_{lambda_min}(x) averaged over a
// uniform clean reference token. Keeps the residual signal mass s(lambda_min)
// so the prior covers the support of every q_{lambda_min}(x).
CategoricalVec prior_dist(const MixingSchedule& sched, const Vocab& vocab);

// Pure noise distribution pi_{lambda_min}, without residual signal. Used as
// p_prior by the confidence heuristic (exactly the mask one-hot under masking)
// and as the sampler's starting distribution.
CategoricalVec noise_prior(const MixingSchedule& sched, const Vocab& vocab);

} // namespace gidd
