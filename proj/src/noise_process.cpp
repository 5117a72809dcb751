#include "gidd/noise_process.hpp"

#include "gidd/error.hpp"
#include "gidd/math.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace gidd {

Vocab Vocab::with_mask_last(std::size_t size, std::optional<Token> empty_id) {
    Vocab v;
    v.size = size;
    v.mask_id = static_cast<Token>(size == 0 ? 0 : size - 1);
    v.empty_id = empty_id;
    v.validate();
    return v;
}

void Vocab::validate() const {
    if (size < 3) {
        throw RangeError("vocabulary needs at least 3 symbols, got " + std::to_string(size));
    }
    if (mask_id >= size) {
        throw RangeError("mask_id out of range");
    }
    if (empty_id) {
        if (*empty_id >= size) {
            throw RangeError("empty_id out of range");
        }
        if (*empty_id == mask_id) {
            throw RangeError("empty_id must differ from mask_id");
        }
    }
}

void MixingSchedule::validate() const {
    if (!(a > 0.0) || !std::isfinite(a)) {
        throw RangeError("mixing slope a must be positive");
    }
    if (!std::isfinite(b)) {
        throw RangeError("mixing shift b must be finite");
    }
    if (!(lambda_min < lambda_max)) {
        throw RangeError("lambda_min must be below lambda_max");
    }
}

void MixingSchedule::require_in_range(double lambda) const {
    if (!std::isfinite(lambda) || !in_range(lambda)) {
        throw RangeError("log-SNR " + std::to_string(lambda) + " outside [" +
                         std::to_string(lambda_min) + ", " + std::to_string(lambda_max) + "]");
    }
}

double MixingSchedule::transition_time() const { return sigmoid(b / a); }

double noise_shift(NoiseType type) {
    switch (type) {
    case NoiseType::masked: return -1000.0;
    case NoiseType::low_uniform: return -2.0;
    case NoiseType::balanced: return 0.0;
    case NoiseType::high_uniform: return 2.0;
    case NoiseType::uniform: return 1000.0;
    }
    return 0.0;
}

std::string_view noise_name(NoiseType type) {
    switch (type) {
    case NoiseType::masked: return "masked";
    case NoiseType::low_uniform: return "low-uniform";
    case NoiseType::balanced: return "balanced";
    case NoiseType::high_uniform: return "high-uniform";
    case NoiseType::uniform: return "uniform";
    }
    return "unknown";
}

NoiseType parse_noise_type(std::string_view name) {
    for (NoiseType t : kAllNoiseTypes) {
        if (noise_name(t) == name) {
            return t;
        }
    }
    if (name == "masking" || name == "mask") {
        return NoiseType::masked;
    }
    throw RangeError("unknown noise type '" + std::string(name) + "'");
}

MixingSchedule schedule_for(NoiseType type) {
    MixingSchedule s;
    s.b = noise_shift(type);
    return s;
}

double CategoricalVec::sum() const { return std::accumulate(probs.begin(), probs.end(), 0.0); }

bool CategoricalVec::is_valid(double tol) const {
    for (double p : probs) {
        if (!(p >= 0.0) || !std::isfinite(p)) {
            return false;
        }
    }
    return std::abs(sum() - 1.0) <= tol;
}

CategoricalVec CategoricalVec::one_hot(std::size_t n, Token t) {
    CategoricalVec v(n);
    v[t] = 1.0;
    return v;
}

NoiseLevel noise_level(const MixingSchedule& sched, const Vocab& vocab, double lambda) {
    sched.require_in_range(lambda);
    const double arg = sched.a * lambda + sched.b;
    const double g = sigmoid(arg);
    const double one_minus_g = sigmoid(-arg);
    const double dg = sched.a * g * one_minus_g;
    const double inv_clean = 1.0 / static_cast<double>(vocab.n_clean());

    NoiseLevel lvl;
    lvl.lambda = lambda;
    lvl.alpha = sigmoid(lambda);
    lvl.beta = sigmoid(-lambda);
    lvl.pi_clean = g * inv_clean;
    lvl.pi_mask = one_minus_g;
    lvl.dpi_clean = dg * inv_clean;
    lvl.dpi_mask = -dg;
    lvl.mask_id = vocab.mask_id;
    return lvl;
}

CategoricalVec mixing_dist(const MixingSchedule& sched, const Vocab& vocab, double lambda) {
    const NoiseLevel lvl = noise_level(sched, vocab, lambda);
    CategoricalVec out(vocab.size, lvl.pi_clean);
    out[vocab.mask_id] = lvl.pi_mask;
    return out;
}

std::vector<double> mixing_dist_deriv(const MixingSchedule& sched, const Vocab& vocab, double lambda) {
    const NoiseLevel lvl = noise_level(sched, vocab, lambda);
    std::vector<double> out(vocab.size, lvl.dpi_clean);
    out[vocab.mask_id] = lvl.dpi_mask;
    return out;
}

namespace {

void require_token(const Vocab& vocab, Token t) {
    if (t >= vocab.size) {
        throw RangeError("token " + std::to_string(t) + " outside vocabulary of size " +
                         std::to_string(vocab.size));
    }
}

} // namespace

CategoricalVec forward_marginal(const MixingSchedule& sched, const Vocab& vocab, Token x, double lambda) {
    require_token(vocab, x);
    const NoiseLevel lvl = noise_level(sched, vocab, lambda);
    CategoricalVec out(vocab.size);
    for (Token z = 0; z < vocab.size; ++z) {
        out[z] = lvl.marginal(x, z);
    }
    return out;
}

CategoricalVec forward_transition(const MixingSchedule& sched, const Vocab& vocab, Token z_s,
                                  double lambda_s, double lambda_t) {
    require_token(vocab, z_s);
    if (lambda_s < lambda_t) {
        throw RangeError("forward_transition needs lambda_s >= lambda_t");
    }
    const NoiseLevel s = noise_level(sched, vocab, lambda_s);
    const NoiseLevel t = noise_level(sched, vocab, lambda_t);
    if (lambda_s == lambda_t) {
        return CategoricalVec::one_hot(vocab.size, z_s);
    }

    // alpha_{t|s} = s(l_t)/s(l_s); beta pi_{t|s} = s(-l_t) pi_t - alpha_{t|s} s(-l_s) pi_s
    const double alpha_ts = t.alpha / s.alpha;
    const double mix_clean = t.beta * t.pi_clean - alpha_ts * s.beta * s.pi_clean;
    const double mix_mask = t.beta * t.pi_mask - alpha_ts * s.beta * s.pi_mask;
    constexpr double tol = 1e-12;
    if (mix_clean < -tol || mix_mask < -tol) {
        throw NumericalError("mixing schedule yields a negative transition probability");
    }

    CategoricalVec out(vocab.size, std::max(mix_clean, 0.0));
    out[vocab.mask_id] = std::max(mix_mask, 0.0);
    out[z_s] += alpha_ts;
    const double total = out.sum();
    for (double& p : out.probs) {
        p /= total;
    }
    return out;
}

double elbo_weight(const MixingSchedule& sched, const Vocab& vocab, Token x, Token z, double lambda) {
    require_token(vocab, x);
    require_token(vocab, z);
    const NoiseLevel lvl = noise_level(sched, vocab, lambda);
    const double q = lvl.marginal(x, z);
    if (!(q > 0.0)) {
        throw NumericalError("ELBO weight undefined: z has zero probability under q_lambda(x)");
    }
    return lvl.weight_numerator(z) / q;
}

CategoricalVec prior_dist(const MixingSchedule& sched, const Vocab& vocab) {
    // q_{lambda_min}(x) averaged over a uniform clean reference token x.
    const NoiseLevel lvl = noise_level(sched, vocab, sched.lambda_min);
    const double signal = lvl.alpha / static_cast<double>(vocab.n_clean());
    CategoricalVec out(vocab.size, signal + lvl.beta * lvl.pi_clean);
    out[vocab.mask_id] = lvl.beta * lvl.pi_mask;
    return out;
}

CategoricalVec noise_prior(const MixingSchedule& sched, const Vocab& vocab) {
    return mixing_dist(sched, vocab, sched.lambda_min);
}

} // namespace gidd
