#pragma once

#include "gidd/denoiser.hpp"
#include "gidd/elbo.hpp"
#include "gidd/parallel.hpp"
#include "gidd/runs.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace gidd {

// LaProp: the gradient is normalized by the bias-corrected second moment
// before it enters the momentum accumulator (see docs/laprop.md).
struct OptimizerConfig {
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double learning_rate = 1e-2;
    long batch_size = 64;  // sequences
    long warmup_steps = 2000;

    void validate() const;

    // 0.98 from 256 sequences up, 0.99 below.
    static double beta2_for_batch(long batch_size_seqs);
};

struct LaPropState {
    std::vector<double> m;
    std::vector<double> v;
    long step = 0;
};

// One LaProp step over a flat parameter vector.
void laprop_update(const OptimizerConfig& cfg, std::vector<double>& params, const std::vector<double>& grad,
                   LaPropState& state);

// Context-free denoiser: x_hat_i = softmax(logits[bucket(lambda_i)][z_i][.]) over
// the clean symbols. Parameter count is n_buckets * N * (N - 1).
class TabularDenoiser final : public Denoiser {
public:
    TabularDenoiser(MixingSchedule sched, Vocab vocab, std::size_t n_buckets);

    using Denoiser::predict;
    void predict(std::span<const Token> z, std::span<const double> lambdas,
                 DenoiserOutput& out) const override;
    std::string name() const override { return "tabular"; }

    std::size_t bucket(double lambda) const;
    std::size_t n_buckets() const { return n_buckets_; }
    std::size_t n_params() const { return logits_.size(); }

    // Offset of the logit row for (bucket, observed token); the row holds one
    // entry per clean symbol in increasing token order.
    std::size_t row_offset(std::size_t bucket, Token z) const {
        return (bucket * vocab_.size + z) * vocab_.n_clean();
    }

    // Clean-symbol column index of token v (v must not be the mask).
    std::size_t column(Token v) const { return v < vocab_.mask_id ? v : v - 1; }
    Token token_of_column(std::size_t c) const {
        return static_cast<Token>(c < vocab_.mask_id ? c : c + 1);
    }

    std::vector<double>& logits() { return logits_; }
    const std::vector<double>& logits() const { return logits_; }
    const MixingSchedule& schedule() const { return sched_; }
    const Vocab& vocab() const { return vocab_; }

    LaPropState& optimizer_state() { return opt_; }
    const LaPropState& optimizer_state() const { return opt_; }

    // JSON checkpoint with vocab, schedule, bucket count, logits and optimizer state.
    void save(std::ostream& out) const;
    static TabularDenoiser load(std::istream& in);

private:
    MixingSchedule sched_;
    Vocab vocab_;
    std::size_t n_buckets_;
    std::vector<double> logits_;
    LaPropState opt_;
};

// Surrogate loss of one example and its gradient with respect to the logits,
// accumulated into grad (same layout as model.logits()). Positions with
// a zero loss_mask entry contribute nothing.
double tabular_loss_and_grad(const TabularDenoiser& model, const TokenSequence& x, const TokenSequence& z,
                             std::span<const double> lambdas, std::span<const std::uint8_t> loss_mask,
                             std::vector<double>& grad);

struct TrainConfig {
    OptimizerConfig optimizer;
    long n_steps = 1000;
    std::uint64_t seed = 0;
    double forcing_fraction = 0.5;
    double prompt_fraction = 0.2;
    double empty_fraction_max = 0.2;
    long eval_every = 100;       // quadrature NELBO cadence; the last step is always evaluated
    std::size_t eval_grid = 128;
    Exec exec = Exec::parallel;

    void validate() const;
};

struct TrainResult {
    LossCurve curve;  // one point per evaluation; surrogate = mean surrogate since the last point
    double final_nelbo = 0.0;
};

// Trains in place; loss in the curve is the dataset quadrature NELBO.
TrainResult train_tabular(TabularDenoiser& model, const EnumerableDataset& data, const TrainConfig& cfg);

} // namespace gidd
