#pragma once

#include "gidd/denoiser.hpp"
#include "gidd/noise_process.hpp"
#include "gidd/parallel.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

namespace gidd {

// q(z_s | z_t, x) for lambda_s >= lambda_t, by explicit summation over the vocabulary.
CategoricalVec backward_posterior(const MixingSchedule& sched, const Vocab& vocab, Token z_t, Token x,
                                  double lambda_s, double lambda_t);

// One reverse step of the model: p(z_s | z_t) proportional to q(z_t | z_s) * q_{lambda_s}(z_s | x_hat).
// Equivalent to mixing backward_posterior over x with weights x_hat(x) q_{lambda_t}(z_t | x).
void reverse_step_dist(const NoiseLevel& s, const NoiseLevel& t, Token z_t, std::span<const double> x_hat,
                       std::span<double> out);

// Log-SNR levels from lambda_min up to lambda_max (T + 1 entries). When
// per_token is non-empty it holds one trajectory per position ([step][pos]),
// each non-decreasing with the same endpoints.
struct DenoiseSchedule {
    std::vector<double> levels;
    std::vector<std::vector<double>> per_token;

    bool anisotropic() const { return !per_token.empty(); }
    std::size_t steps() const { return anisotropic() ? per_token.size() - 1 : levels.size() - 1; }
    double level(std::size_t step, std::size_t pos) const {
        return anisotropic() ? per_token[step][pos] : levels[step];
    }

    void validate(const MixingSchedule& sched, std::size_t seq_len) const;

    static DenoiseSchedule uniform_lambda(const MixingSchedule& sched, std::size_t T);
    // Uniform in t under alpha = 1 - t, i.e. lambda = log((1 - t) / t).
    static DenoiseSchedule uniform_time(const MixingSchedule& sched, std::size_t T);
    // T = seq_len steps; position order[k] jumps from lambda_min to lambda_max at step k + 1.
    static DenoiseSchedule one_position_per_step(const MixingSchedule& sched, std::span<const std::size_t> order);
};

struct SampleTrace {
    std::vector<TokenSequence> states;             // states[0] is the prior draw
    std::vector<std::vector<double>> confidences;  // adaptive mode, one row per step
    std::vector<std::size_t> commits;              // adaptive mode, committed position per commit
    TokenSequence final;
};

struct SamplerOptions {
    std::uint64_t seed = 0;
    TokenSequence prompt;       // held fixed at the start of the sequence
    bool record_states = true;
};

// Starts from noise_prior (pi at lambda_min), applies the model's reverse step along the schedule
// and finally decodes every position with clean_posterior at lambda_max.
SampleTrace ancestral_sample(const Denoiser& denoiser, const MixingSchedule& sched, const Vocab& vocab,
                             const DenoiseSchedule& schedule, std::size_t seq_len, const SamplerOptions& opts);

// conf_i = p_prior(z_i) * (max_v p_i(v) - p_i(z_i)).
std::vector<double> confidence_scores(const DenoiserOutput& p, std::span<const Token> z,
                                      const CategoricalVec& prior);

struct AdaptiveOptions {
    std::size_t T = 0;
    std::size_t k = 1;
    bool allow_unpin = false;  // let pinned positions be re-selected
};

// Confidence-ordered decoding: each step commits the top-k positions to their
// argmax token and pins them at lambda_max. Ties go to the lowest position.
// Positions still uncommitted after T steps take their argmax token.
SampleTrace adaptive_sample(const Denoiser& denoiser, const MixingSchedule& sched, const Vocab& vocab,
                            const AdaptiveOptions& adaptive, std::size_t seq_len, const SamplerOptions& opts);

// Runs n independent trajectories with seeds derived from base.seed.
std::vector<TokenSequence> ancestral_sample_many(const Denoiser& denoiser, const MixingSchedule& sched,
                                                 const Vocab& vocab, const DenoiseSchedule& schedule,
                                                 std::size_t seq_len, std::size_t n, const SamplerOptions& base,
                                                 Exec exec = Exec::parallel);

std::vector<TokenSequence> adaptive_sample_many(const Denoiser& denoiser, const MixingSchedule& sched,
                                                const Vocab& vocab, const AdaptiveOptions& adaptive,
                                                std::size_t seq_len, std::size_t n, const SamplerOptions& base,
                                                Exec exec = Exec::parallel);

// One JSON object per state: {"step", "tokens"[, "confidence"]}.
void write_trace_jsonl(std::ostream& out, const SampleTrace& trace);

} // namespace gidd
