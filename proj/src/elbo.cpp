#include "gidd/elbo.hpp"

#include "gidd/error.hpp"
#include "gidd/math.hpp"

#include <algorithm>
#include <cmath>

namespace gidd {

double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) {
        throw RangeError("kl_divergence: size mismatch");
    }
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) {
            if (!(q[i] > 0.0)) {
                throw NumericalError("kl_divergence: q has no mass where p does");
            }
            kl += p[i] * std::log(p[i] / q[i]);
        }
    }
    return std::max(kl, 0.0);
}

double is_divergence(double p, double q) {
    if (!(p > 0.0) || !(q > 0.0)) {
        throw RangeError("is_divergence: inputs must be positive");
    }
    const double r = p / q;
    return r - std::log(r) - 1.0;
}

double pointwise_loss(const NoiseLevel& lvl, Token x, Token z, std::span<const double> x_hat,
                      std::span<double> grad) {
    const std::size_t n = x_hat.size();
    if (!grad.empty()) {
        std::fill(grad.begin(), grad.end(), 0.0);
    }
    const double q_z = lvl.marginal(x, z);
    if (!(q_z > 0.0)) {
        throw NumericalError("pointwise_loss: z is outside the support of q_lambda(x)");
    }
    const double w = lvl.weight_numerator(z) / q_z;
    if (w == 0.0) {
        return 0.0;
    }

    double kl = 0.0;
    for (Token j = 0; j < n; ++j) {
        const double p = lvl.marginal(x, j);
        if (p <= 0.0) {
            continue;
        }
        const double r = lvl.alpha * x_hat[j] + lvl.beta * lvl.pi(j);
        if (!(r > 0.0)) {
            throw NumericalError("pointwise_loss: q_lambda(x_hat) has no mass where q_lambda(x) does");
        }
        kl += p * std::log(p / r);
        if (!grad.empty()) {
            grad[j] = -p / r;
        }
    }

    const double r_z_raw = lvl.alpha * x_hat[z] + lvl.beta * lvl.pi(z);
    const double r_z = std::max(r_z_raw, kIsFloor);
    const double p_z = std::max(q_z, kIsFloor);
    const double ratio = p_z / r_z;
    const double d_is = ratio - std::log(ratio) - 1.0;
    if (!grad.empty()) {
        if (r_z_raw > kIsFloor) {
            grad[z] += -p_z / (r_z * r_z) + 1.0 / r_z;
        }
        for (double& g : grad) {
            g *= w * lvl.alpha;
        }
    }
    return w * (std::max(kl, 0.0) + d_is);
}

double pointwise_loss(const MixingSchedule& sched, const Vocab& vocab, Token x, Token z, double lambda,
                      std::span<const double> x_hat) {
    if (x_hat.size() != vocab.size) {
        throw RangeError("pointwise_loss: prediction size differs from the vocabulary");
    }
    if (x >= vocab.size || z >= vocab.size) {
        throw RangeError("pointwise_loss: token outside vocabulary");
    }
    return pointwise_loss(noise_level(sched, vocab, lambda), x, z, x_hat);
}

LambdaDistribution LambdaDistribution::for_schedule(const MixingSchedule& sched, Kind kind) {
    LambdaDistribution d;
    d.kind = kind;
    d.lambda_min = sched.lambda_min;
    d.lambda_max = sched.lambda_max;
    return d;
}

double LambdaDistribution::density(double lambda) const {
    if (lambda < lambda_min || lambda > lambda_max) {
        return 0.0;
    }
    switch (kind) {
    case Kind::linear_schedule:
        return sigmoid_deriv(lambda) / (sigmoid(lambda_max) - sigmoid(lambda_min));
    case Kind::uniform_on_range:
        return 1.0 / (lambda_max - lambda_min);
    case Kind::unit:
        return 1.0;
    }
    return 0.0;
}

double LambdaDistribution::sample(Rng& rng) const {
    if (kind == Kind::linear_schedule) {
        // alpha = s(lambda) is uniform under the linear schedule alpha = 1 - t.
        const double a = rng.uniform(sigmoid(lambda_min), sigmoid(lambda_max));
        return std::clamp(logit(a), lambda_min, lambda_max);
    }
    return rng.uniform(lambda_min, lambda_max);
}

TokenSequence sample_forward(const TokenSequence& x, std::span<const double> lambdas,
                             const MixingSchedule& sched, const Vocab& vocab, Rng& rng) {
    if (lambdas.size() != x.size()) {
        throw RangeError("sample_forward: one log-SNR per position required");
    }
    TokenSequence z(x.size());
    std::vector<double> probs(vocab.size);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const NoiseLevel lvl = noise_level(sched, vocab, lambdas[i]);
        for (Token v = 0; v < vocab.size; ++v) {
            probs[v] = lvl.marginal(x[i], v);
        }
        z[i] = static_cast<Token>(rng.categorical(probs));
    }
    return z;
}

ElboEstimate nelbo_monte_carlo(const TokenSequence& seq, const Denoiser& denoiser,
                               const MixingSchedule& sched, const Vocab& vocab,
                               const LambdaDistribution& p_lambda, std::size_t n_samples,
                               std::uint64_t seed, Exec exec) {
    if (seq.empty()) {
        throw RangeError("nelbo_monte_carlo: empty sequence");
    }
    if (n_samples == 0) {
        throw RangeError("nelbo_monte_carlo: need at least one sample");
    }
    if (!p_lambda.proper()) {
        throw RangeError("nelbo_monte_carlo: the unit density is not a proposal distribution");
    }
    const std::size_t len = seq.size();
    std::vector<double> values(n_samples);

    for_each_index(exec, n_samples, [&](std::size_t s) {
        Rng rng(derive_seed(seed, s));
        const double lambda = p_lambda.sample(rng);
        const std::vector<double> lambdas(len, lambda);
        const TokenSequence z = sample_forward(seq, lambdas, sched, vocab, rng);
        DenoiserOutput out;
        denoiser.predict(z, lambdas, out);
        const NoiseLevel lvl = noise_level(sched, vocab, lambda);
        double total = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            total += pointwise_loss(lvl, seq[i], z[i], out.at(i));
        }
        values[s] = total / p_lambda.density(lambda) / static_cast<double>(len);
    });

    double mean = 0.0;
    for (double v : values) {
        mean += v;
    }
    mean /= static_cast<double>(n_samples);
    double var = 0.0;
    for (double v : values) {
        var += (v - mean) * (v - mean);
    }
    ElboEstimate est;
    est.value = mean;
    est.n_samples = n_samples;
    est.estimator = ElboEstimate::Estimator::monte_carlo;
    est.std_error = n_samples > 1
                        ? std::sqrt(var / static_cast<double>(n_samples - 1) / static_cast<double>(n_samples))
                        : 0.0;
    return est;
}

namespace {

// Integrates equally spaced samples f[0..n-1] with spacing h.
double integrate(std::span<const double> f, double h, QuadratureRule rule) {
    const std::size_t n = f.size();
    if (rule == QuadratureRule::trapezoid || n < 4) {
        double s = 0.5 * (f.front() + f.back());
        for (std::size_t i = 1; i + 1 < n; ++i) {
            s += f[i];
        }
        return s * h;
    }
    // Composite Simpson; an odd interval count closes with a 3/8 panel.
    const std::size_t intervals = n - 1;
    const std::size_t simpson_end = intervals % 2 == 0 ? intervals : intervals - 3;
    double s = 0.0;
    for (std::size_t i = 0; i < simpson_end; i += 2) {
        s += f[i] + 4.0 * f[i + 1] + f[i + 2];
    }
    s *= h / 3.0;
    if (simpson_end != intervals) {
        const std::size_t i = simpson_end;
        s += 3.0 * h / 8.0 * (f[i] + 3.0 * f[i + 1] + 3.0 * f[i + 2] + f[i + 3]);
    }
    return s;
}

// Calls fn(z) for every sequence in the product of per-position candidate lists.
template <class Fn>
void for_each_sequence(const std::vector<std::vector<Token>>& candidates, Fn&& fn) {
    const std::size_t len = candidates.size();
    for (const auto& c : candidates) {
        if (c.empty()) {
            return;
        }
    }
    std::vector<std::size_t> digit(len, 0);
    TokenSequence z(len);
    for (std::size_t i = 0; i < len; ++i) {
        z[i] = candidates[i][0];
    }
    while (true) {
        fn(static_cast<const TokenSequence&>(z));
        std::size_t i = 0;
        for (; i < len; ++i) {
            if (++digit[i] < candidates[i].size()) {
                z[i] = candidates[i][digit[i]];
                break;
            }
            digit[i] = 0;
            z[i] = candidates[i][0];
        }
        if (i == len) {
            return;
        }
    }
}

} // namespace

DatasetElbo dataset_nelbo_quadrature(const EnumerableDataset& data, const Denoiser& denoiser,
                                     const MixingSchedule& sched, const Vocab& vocab,
                                     const QuadratureOptions& opts) {
    data.validate(vocab);
    if (opts.n_grid < 16) {
        throw RangeError("nelbo_quadrature: n_grid must be at least 16");
    }
    const std::size_t len = data.seq_len();
    const std::size_t n_data = data.size();
    const std::size_t n_grid = opts.n_grid;
    const double h = (sched.lambda_max - sched.lambda_min) / static_cast<double>(n_grid - 1);

    // Distinct clean values seen at each position.
    std::vector<std::vector<Token>> values_at(len);
    for (std::size_t i = 0; i < len; ++i) {
        for (const auto& x : data.sequences) {
            if (std::find(values_at[i].begin(), values_at[i].end(), x[i]) == values_at[i].end()) {
                values_at[i].push_back(x[i]);
            }
        }
        std::sort(values_at[i].begin(), values_at[i].end());
    }

    std::vector<double> integrand(n_grid * n_data, 0.0);
    for_each_index(opts.exec, n_grid, [&](std::size_t g) {
        const double lambda = g + 1 == n_grid ? sched.lambda_max
                                              : sched.lambda_min + static_cast<double>(g) * h;
        const NoiseLevel lvl = noise_level(sched, vocab, lambda);
        const std::vector<double> lambdas(len, lambda);

        std::vector<std::vector<Token>> candidates(len);
        for (std::size_t i = 0; i < len; ++i) {
            for (Token z = 0; z < vocab.size; ++z) {
                for (Token v : values_at[i]) {
                    if (lvl.marginal(v, z) > 0.0) {
                        candidates[i].push_back(z);
                        break;
                    }
                }
            }
        }

        DenoiserOutput out;
        // loss_cache[i][v]: pointwise loss at position i if the clean token were v.
        std::vector<std::vector<double>> loss_cache(len, std::vector<double>(vocab.size, 0.0));
        std::vector<std::vector<char>> cached(len, std::vector<char>(vocab.size, 0));
        double* row = integrand.data() + g * n_data;
        std::vector<double> prob(n_data);
        for_each_sequence(candidates, [&](const TokenSequence& z) {
            bool reachable = false;
            for (std::size_t d = 0; d < n_data; ++d) {
                const TokenSequence& x = data.sequences[d];
                double p = 1.0;
                for (std::size_t i = 0; i < len && p > 0.0; ++i) {
                    p *= lvl.marginal(x[i], z[i]);
                }
                prob[d] = p;
                reachable = reachable || (p > 0.0 && data.weights[d] > 0.0);
            }
            if (!reachable) {
                return;
            }
            denoiser.predict(z, lambdas, out);
            for (auto& c : cached) {
                std::fill(c.begin(), c.end(), 0);
            }
            for (std::size_t d = 0; d < n_data; ++d) {
                if (prob[d] <= 0.0) {
                    continue;
                }
                const TokenSequence& x = data.sequences[d];
                double loss = 0.0;
                for (std::size_t i = 0; i < len; ++i) {
                    if (!cached[i][x[i]]) {
                        loss_cache[i][x[i]] = pointwise_loss(lvl, x[i], z[i], out.at(i));
                        cached[i][x[i]] = 1;
                    }
                    loss += loss_cache[i][x[i]];
                }
                row[d] += prob[d] * loss;
            }
        });
    });

    DatasetElbo result;
    result.per_sequence.resize(n_data);
    std::vector<double> column(n_grid);
    for (std::size_t d = 0; d < n_data; ++d) {
        for (std::size_t g = 0; g < n_grid; ++g) {
            column[g] = integrand[g * n_data + d];
        }
        result.per_sequence[d] = integrate(column, h, opts.rule) / static_cast<double>(len);
        result.mean += data.weights[d] * result.per_sequence[d];
    }
    return result;
}

ElboEstimate nelbo_quadrature(const TokenSequence& seq, const Denoiser& denoiser,
                              const MixingSchedule& sched, const Vocab& vocab,
                              const QuadratureOptions& opts) {
    if (seq.empty()) {
        throw RangeError("nelbo_quadrature: empty sequence");
    }
    EnumerableDataset single;
    single.sequences = {seq};
    single.weights = {1.0};
    const DatasetElbo d = dataset_nelbo_quadrature(single, denoiser, sched, vocab, opts);
    ElboEstimate est;
    est.value = d.mean;
    est.n_samples = opts.n_grid;
    est.estimator = ElboEstimate::Estimator::quadrature;
    return est;
}

void clean_posterior(const NoiseLevel& lvl, Token z, std::span<const double> x_hat, std::span<double> out) {
    if (out.size() != x_hat.size()) {
        throw RangeError("clean_posterior: output size mismatch");
    }
    double total = 0.0;
    for (Token v = 0; v < x_hat.size(); ++v) {
        out[v] = v == lvl.mask_id ? 0.0 : x_hat[v] * lvl.marginal(v, z);
        total += out[v];
    }
    if (!(total > 0.0)) {
        throw NumericalError("clean_posterior: prediction has no mass consistent with the observed token");
    }
    for (double& p : out) {
        p /= total;
    }
}

EndpointTerms nelbo_endpoint_terms(const TokenSequence& seq, const Denoiser& denoiser,
                                   const MixingSchedule& sched, const Vocab& vocab) {
    const std::size_t len = seq.size();
    if (len == 0) {
        throw RangeError("nelbo_endpoint_terms: empty sequence");
    }
    EndpointTerms terms;

    const NoiseLevel top = noise_level(sched, vocab, sched.lambda_max);
    const std::vector<double> lambdas(len, sched.lambda_max);
    std::vector<std::vector<Token>> candidates(len);
    for (std::size_t i = 0; i < len; ++i) {
        for (Token z = 0; z < vocab.size; ++z) {
            if (top.marginal(seq[i], z) > 0.0) {
                candidates[i].push_back(z);
            }
        }
    }
    DenoiserOutput out;
    std::vector<double> decoded(vocab.size);
    for_each_sequence(candidates, [&](const TokenSequence& z) {
        double prob = 1.0;
        for (std::size_t i = 0; i < len; ++i) {
            prob *= top.marginal(seq[i], z[i]);
        }
        if (prob <= 0.0) {
            return;
        }
        denoiser.predict(z, lambdas, out);
        double nll = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            clean_posterior(top, z[i], out.at(i), decoded);
            nll -= std::log(std::max(decoded[seq[i]], 1e-300));
        }
        terms.reconstruction += prob * nll;
    });

    const CategoricalVec prior = prior_dist(sched, vocab);
    for (std::size_t i = 0; i < len; ++i) {
        const CategoricalVec q = forward_marginal(sched, vocab, seq[i], sched.lambda_min);
        terms.prior_kl += kl_divergence(q.probs, prior.probs);
    }
    terms.reconstruction /= static_cast<double>(len);
    terms.prior_kl /= static_cast<double>(len);
    return terms;
}

double surrogate_loss(const TokenSequence& x, const TokenSequence& z, std::span<const double> lambdas,
                      const DenoiserOutput& x_hat, const MixingSchedule& sched, const Vocab& vocab,
                      std::span<const std::uint8_t> loss_mask) {
    const std::size_t len = x.size();
    if (z.size() != len || lambdas.size() != len || x_hat.length() != len) {
        throw RangeError("surrogate_loss: one log-SNR and one prediction per position required");
    }
    if (!loss_mask.empty() && loss_mask.size() != len) {
        throw RangeError("surrogate_loss: loss mask length mismatch");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
        if (!loss_mask.empty() && !loss_mask[i]) {
            continue;
        }
        total += pointwise_loss(noise_level(sched, vocab, lambdas[i]), x[i], z[i], x_hat.at(i));
    }
    return total;
}

double surrogate_loss(const TokenSequence& x, const Denoiser& denoiser, const MixingSchedule& sched,
                      const Vocab& vocab, std::span<const double> lambdas, Rng& rng) {
    const TokenSequence z = sample_forward(x, lambdas, sched, vocab, rng);
    DenoiserOutput out;
    denoiser.predict(z, lambdas, out);
    return surrogate_loss(x, z, lambdas, out, sched, vocab);
}

double nats_to_bpb(double nll, double factor) {
    if (nll < 0.0) {
        throw RangeError("nats_to_bpb: negative log-likelihood");
    }
    return factor * nll;
}

} // namespace gidd
