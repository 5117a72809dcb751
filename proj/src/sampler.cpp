#include "gidd/sampler.hpp"

#include "gidd/elbo.hpp"
#include "gidd/error.hpp"
#include "gidd/math.hpp"
#include "gidd/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <ostream>

namespace gidd {

namespace {

// q(z_t | z_s) up to a factor shared by every z_s.
double transition_prob(const NoiseLevel& s, const NoiseLevel& t, Token z_s, Token z_t) {
    const double alpha_ts = t.alpha / s.alpha;
    const double mix = std::max(t.beta * t.pi(z_t) - alpha_ts * s.beta * s.pi(z_t), 0.0);
    return (z_s == z_t ? alpha_ts : 0.0) + mix;
}

void normalize(std::span<double> p, const char* what) {
    double total = 0.0;
    for (double v : p) {
        total += v;
    }
    if (!(total > 0.0)) {
        throw NumericalError(what);
    }
    for (double& v : p) {
        v /= total;
    }
}

Token argmax_clean(std::span<const double> p, Token mask_id) {
    Token best = mask_id == 0 ? 1 : 0;
    for (Token v = 0; v < p.size(); ++v) {
        if (v != mask_id && p[v] > p[best]) {
            best = v;
        }
    }
    return best;
}

void check_prompt(const SamplerOptions& opts, const Vocab& vocab, std::size_t seq_len) {
    if (opts.prompt.size() > seq_len) {
        throw RangeError("prompt is longer than the sequence");
    }
    for (Token t : opts.prompt) {
        if (t >= vocab.size || t == vocab.mask_id) {
            throw RangeError("prompt tokens must be clean symbols");
        }
    }
}

TokenSequence draw_prior(const CategoricalVec& prior, const SamplerOptions& opts, std::size_t seq_len, Rng& rng) {
    TokenSequence z(seq_len);
    for (std::size_t i = 0; i < seq_len; ++i) {
        z[i] = i < opts.prompt.size() ? opts.prompt[i] : static_cast<Token>(rng.categorical(prior.probs));
    }
    return z;
}

} // namespace

CategoricalVec backward_posterior(const MixingSchedule& sched, const Vocab& vocab, Token z_t, Token x,
                                  double lambda_s, double lambda_t) {
    if (z_t >= vocab.size || x >= vocab.size) {
        throw RangeError("backward_posterior: token outside vocabulary");
    }
    if (lambda_s < lambda_t) {
        throw RangeError("backward_posterior needs lambda_s >= lambda_t");
    }
    const double denom = forward_marginal(sched, vocab, x, lambda_t)[z_t];
    if (!(denom > 0.0)) {
        throw NumericalError("backward_posterior: z_t is impossible given x");
    }
    CategoricalVec out(vocab.size);
    for (Token z_s = 0; z_s < vocab.size; ++z_s) {
        const double fwd = forward_transition(sched, vocab, z_s, lambda_s, lambda_t)[z_t];
        out[z_s] = fwd * forward_marginal(sched, vocab, x, lambda_s)[z_s] / denom;
    }
    normalize(out.probs, "backward_posterior: posterior has no mass");
    return out;
}

void reverse_step_dist(const NoiseLevel& s, const NoiseLevel& t, Token z_t, std::span<const double> x_hat,
                       std::span<double> out) {
    if (s.lambda == t.lambda) {
        std::fill(out.begin(), out.end(), 0.0);
        out[z_t] = 1.0;
        return;
    }
    for (Token z_s = 0; z_s < out.size(); ++z_s) {
        const double q_s = s.alpha * (z_s == s.mask_id ? 0.0 : x_hat[z_s]) + s.beta * s.pi(z_s);
        out[z_s] = transition_prob(s, t, z_s, z_t) * q_s;
    }
    normalize(out, "reverse step: prediction is inconsistent with the observed token");
}

void DenoiseSchedule::validate(const MixingSchedule& sched, std::size_t seq_len) const {
    auto check = [&](auto&& at, std::size_t n, bool strict) {
        if (n < 2) {
            throw RangeError("denoise schedule needs at least one step");
        }
        if (at(0) != sched.lambda_min || at(n - 1) != sched.lambda_max) {
            throw RangeError("denoise schedule must run from lambda_min to lambda_max");
        }
        for (std::size_t k = 1; k < n; ++k) {
            if (strict ? !(at(k) > at(k - 1)) : !(at(k) >= at(k - 1))) {
                throw RangeError("denoise schedule levels must increase");
            }
        }
    };
    if (!anisotropic()) {
        check([&](std::size_t k) { return levels[k]; }, levels.size(), true);
        return;
    }
    for (const auto& row : per_token) {
        if (row.size() != seq_len) {
            throw RangeError("anisotropic schedule needs one level per position");
        }
    }
    for (std::size_t i = 0; i < seq_len; ++i) {
        check([&](std::size_t k) { return per_token[k][i]; }, per_token.size(), false);
    }
}

DenoiseSchedule DenoiseSchedule::uniform_lambda(const MixingSchedule& sched, std::size_t T) {
    if (T < 1) {
        throw RangeError("denoise schedule needs T >= 1");
    }
    DenoiseSchedule d;
    d.levels.resize(T + 1);
    for (std::size_t k = 0; k <= T; ++k) {
        d.levels[k] = sched.lambda_min +
                      (sched.lambda_max - sched.lambda_min) * static_cast<double>(k) / static_cast<double>(T);
    }
    d.levels[T] = sched.lambda_max;
    return d;
}

DenoiseSchedule DenoiseSchedule::uniform_time(const MixingSchedule& sched, std::size_t T) {
    if (T < 1) {
        throw RangeError("denoise schedule needs T >= 1");
    }
    const double t_start = sigmoid(-sched.lambda_min);
    const double t_end = sigmoid(-sched.lambda_max);
    DenoiseSchedule d;
    d.levels.resize(T + 1);
    for (std::size_t k = 0; k <= T; ++k) {
        const double t = t_start + (t_end - t_start) * static_cast<double>(k) / static_cast<double>(T);
        d.levels[k] = std::clamp(logit(1.0 - t), sched.lambda_min, sched.lambda_max);
    }
    d.levels.front() = sched.lambda_min;
    d.levels.back() = sched.lambda_max;
    return d;
}

DenoiseSchedule DenoiseSchedule::one_position_per_step(const MixingSchedule& sched,
                                                       std::span<const std::size_t> order) {
    const std::size_t n = order.size();
    if (n == 0) {
        throw RangeError("one_position_per_step needs a non-empty order");
    }
    DenoiseSchedule d;
    d.per_token.assign(n + 1, std::vector<double>(n, sched.lambda_min));
    std::vector<char> seen(n, 0);
    for (std::size_t k = 0; k < n; ++k) {
        if (order[k] >= n || seen[order[k]]) {
            throw RangeError("order must be a permutation of the positions");
        }
        seen[order[k]] = 1;
        for (std::size_t step = k + 1; step <= n; ++step) {
            d.per_token[step][order[k]] = sched.lambda_max;
        }
    }
    return d;
}

SampleTrace ancestral_sample(const Denoiser& denoiser, const MixingSchedule& sched, const Vocab& vocab,
                             const DenoiseSchedule& schedule, std::size_t seq_len, const SamplerOptions& opts) {
    schedule.validate(sched, seq_len);
    check_prompt(opts, vocab, seq_len);
    const std::size_t n_prompt = opts.prompt.size();
    Rng rng(opts.seed);
    SampleTrace trace;
    TokenSequence z = draw_prior(noise_prior(sched, vocab), opts, seq_len, rng);
    if (opts.record_states) {
        trace.states.push_back(z);
    }

    std::vector<double> lambdas(seq_len);
    std::vector<double> probs(vocab.size);
    DenoiserOutput out;
    for (std::size_t step = 0; step < schedule.steps(); ++step) {
        for (std::size_t i = 0; i < seq_len; ++i) {
            lambdas[i] = i < n_prompt ? sched.lambda_max : schedule.level(step, i);
        }
        denoiser.predict(z, lambdas, out);
        for (std::size_t i = n_prompt; i < seq_len; ++i) {
            const double l_t = schedule.level(step, i);
            const double l_s = schedule.level(step + 1, i);
            if (l_s == l_t) {
                continue;
            }
            const NoiseLevel t = noise_level(sched, vocab, l_t);
            const NoiseLevel s = noise_level(sched, vocab, l_s);
            reverse_step_dist(s, t, z[i], out.at(i), probs);
            z[i] = static_cast<Token>(rng.categorical(probs));
        }
        if (opts.record_states) {
            trace.states.push_back(z);
        }
    }

    // Final decode at lambda_max.
    std::fill(lambdas.begin(), lambdas.end(), sched.lambda_max);
    denoiser.predict(z, lambdas, out);
    const NoiseLevel top = noise_level(sched, vocab, sched.lambda_max);
    for (std::size_t i = n_prompt; i < seq_len; ++i) {
        clean_posterior(top, z[i], out.at(i), probs);
        z[i] = static_cast<Token>(rng.categorical(probs));
    }
    if (opts.record_states) {
        trace.states.push_back(z);
    }
    trace.final = std::move(z);
    return trace;
}

std::vector<double> confidence_scores(const DenoiserOutput& p, std::span<const Token> z,
                                      const CategoricalVec& prior) {
    if (p.length() != z.size() || p.vocab_size() != prior.size()) {
        throw RangeError("confidence_scores: shape mismatch");
    }
    std::vector<double> conf(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        const auto row = p.at(i);
        const double mx = *std::max_element(row.begin(), row.end());
        conf[i] = prior[z[i]] * (mx - row[z[i]]);
    }
    return conf;
}

SampleTrace adaptive_sample(const Denoiser& denoiser, const MixingSchedule& sched, const Vocab& vocab,
                            const AdaptiveOptions& adaptive, std::size_t seq_len, const SamplerOptions& opts) {
    if (adaptive.T < 1 || adaptive.k < 1) {
        throw RangeError("adaptive sampling needs T >= 1 and k >= 1");
    }
    check_prompt(opts, vocab, seq_len);
    const std::size_t n_prompt = opts.prompt.size();
    Rng rng(opts.seed);
    const CategoricalVec p_prior = noise_prior(sched, vocab);
    SampleTrace trace;
    TokenSequence z = draw_prior(noise_prior(sched, vocab), opts, seq_len, rng);
    std::vector<double> lambdas(seq_len, sched.lambda_min);
    std::vector<char> pinned(seq_len, 0);
    for (std::size_t i = 0; i < n_prompt; ++i) {
        lambdas[i] = sched.lambda_max;
        pinned[i] = 1;
    }
    if (opts.record_states) {
        trace.states.push_back(z);
    }

    DenoiserOutput x_hat;
    DenoiserOutput belief;
    auto refresh = [&] {
        denoiser.predict(z, lambdas, x_hat);
        belief.resize(seq_len, vocab.size);
        for (std::size_t i = 0; i < seq_len; ++i) {
            clean_posterior(noise_level(sched, vocab, lambdas[i]), z[i], x_hat.at(i), belief.at(i));
        }
    };

    for (std::size_t step = 0; step < adaptive.T; ++step) {
        std::vector<std::size_t> candidates;
        for (std::size_t i = n_prompt; i < seq_len; ++i) {
            if (!pinned[i] || adaptive.allow_unpin) {
                candidates.push_back(i);
            }
        }
        if (candidates.empty()) {
            break;
        }
        refresh();
        const std::vector<double> conf = confidence_scores(belief, z, p_prior);
        trace.confidences.push_back(conf);
        std::stable_sort(candidates.begin(), candidates.end(),
                         [&](std::size_t a, std::size_t b) { return conf[a] > conf[b]; });
        const std::size_t n_commit = std::min(adaptive.k, candidates.size());
        for (std::size_t c = 0; c < n_commit; ++c) {
            const std::size_t i = candidates[c];
            z[i] = argmax_clean(belief.at(i), vocab.mask_id);
            lambdas[i] = sched.lambda_max;
            pinned[i] = 1;
            trace.commits.push_back(i);
        }
        if (opts.record_states) {
            trace.states.push_back(z);
        }
    }

    if (std::find(pinned.begin(), pinned.end(), 0) != pinned.end()) {
        refresh();
        for (std::size_t i = n_prompt; i < seq_len; ++i) {
            if (!pinned[i]) {
                z[i] = argmax_clean(belief.at(i), vocab.mask_id);
            }
        }
        if (opts.record_states) {
            trace.states.push_back(z);
        }
    }
    trace.final = std::move(z);
    return trace;
}

std::vector<TokenSequence> ancestral_sample_many(const Denoiser& denoiser, const MixingSchedule& sched,
                                                 const Vocab& vocab, const DenoiseSchedule& schedule,
                                                 std::size_t seq_len, std::size_t n, const SamplerOptions& base,
                                                 Exec exec) {
    std::vector<TokenSequence> out(n);
    for_each_index(exec, n, [&](std::size_t r) {
        SamplerOptions opts = base;
        opts.seed = derive_seed(base.seed, r);
        opts.record_states = false;
        out[r] = ancestral_sample(denoiser, sched, vocab, schedule, seq_len, opts).final;
    });
    return out;
}

std::vector<TokenSequence> adaptive_sample_many(const Denoiser& denoiser, const MixingSchedule& sched,
                                                const Vocab& vocab, const AdaptiveOptions& adaptive,
                                                std::size_t seq_len, std::size_t n, const SamplerOptions& base,
                                                Exec exec) {
    std::vector<TokenSequence> out(n);
    for_each_index(exec, n, [&](std::size_t r) {
        SamplerOptions opts = base;
        opts.seed = derive_seed(base.seed, r);
        opts.record_states = false;
        out[r] = adaptive_sample(denoiser, sched, vocab, adaptive, seq_len, opts).final;
    });
    return out;
}

void write_trace_jsonl(std::ostream& out, const SampleTrace& trace) {
    for (std::size_t k = 0; k < trace.states.size(); ++k) {
        nlohmann::json j;
        j["step"] = k;
        j["tokens"] = trace.states[k];
        if (k >= 1 && k - 1 < trace.confidences.size()) {
            j["confidence"] = trace.confidences[k - 1];
        }
        out << j.dump() << '\n';
    }
}

} // namespace gidd
