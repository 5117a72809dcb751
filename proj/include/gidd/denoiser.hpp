#pragma once

#include "gidd/noise_process.hpp"

#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gidd {

using TokenSequence = std::vector<Token>;

// Per-position clean-token distributions, stored row-major (length x vocab).
// The mask column is always zero.
class DenoiserOutput {
public:
    DenoiserOutput() = default;
    DenoiserOutput(std::size_t length, std::size_t vocab_size)
        : length_(length), vocab_size_(vocab_size), probs_(length * vocab_size, 0.0) {}

    void resize(std::size_t length, std::size_t vocab_size) {
        length_ = length;
        vocab_size_ = vocab_size;
        probs_.assign(length * vocab_size, 0.0);
    }

    std::size_t length() const { return length_; }
    std::size_t vocab_size() const { return vocab_size_; }

    std::span<const double> at(std::size_t pos) const {
        return {probs_.data() + pos * vocab_size_, vocab_size_};
    }
    std::span<double> at(std::size_t pos) { return {probs_.data() + pos * vocab_size_, vocab_size_}; }

    CategoricalVec position(std::size_t pos) const {
        auto row = at(pos);
        return CategoricalVec(std::vector<double>(row.begin(), row.end()));
    }

private:
    std::size_t length_ = 0;
    std::size_t vocab_size_ = 0;
    std::vector<double> probs_;
};

// x_hat_theta(z, lambdas). Implementations must be safe to call concurrently.
class Denoiser {
public:
    virtual ~Denoiser() = default;

    virtual void predict(std::span<const Token> z, std::span<const double> lambdas,
                         DenoiserOutput& out) const = 0;

    DenoiserOutput predict(std::span<const Token> z, std::span<const double> lambdas) const {
        DenoiserOutput out;
        predict(z, lambdas, out);
        return out;
    }

    virtual std::string name() const = 0;
};

// Finite weighted set of equal-length clean sequences.
struct EnumerableDataset {
    std::vector<TokenSequence> sequences;
    std::vector<double> weights;

    static constexpr std::size_t kMaxSequences = 10000;

    std::size_t seq_len() const { return sequences.empty() ? 0 : sequences.front().size(); }
    std::size_t size() const { return sequences.size(); }
    void validate(const Vocab& vocab) const;

    // Exact per-token negative log-likelihood (entropy rate of the data).
    double per_token_nll() const;

    static EnumerableDataset uniform_over(std::vector<TokenSequence> sequences);
};

// Exact Bayes denoiser by enumeration over the dataset.
//
// posterior:     x_hat_i(v) = p(x_i = v | z).
// elbo_optimal:  x_hat_i(v) proportional to p(x_i = v | z) / q_lambda_i(z_i | v), i.e. the
//                posterior given the other positions only. Plugging this into
//                q_lambda(x_hat) reproduces the exact reverse process, so it minimizes
//                the NELBO; it equals the posterior wherever the noise is pure masking.
class BayesOracle final : public Denoiser {
public:
    enum class Mode { elbo_optimal, posterior };

    BayesOracle(EnumerableDataset data, MixingSchedule sched, Vocab vocab, Mode mode = Mode::elbo_optimal);

    // Non-strict oracles answer sequences that no data point can produce (which a
    // factorized sampler may reach) by conditioning each position on its own
    // token only; strict oracles throw.
    void set_strict(bool strict) { strict_ = strict; }

    using Denoiser::predict;
    void predict(std::span<const Token> z, std::span<const double> lambdas,
                 DenoiserOutput& out) const override;
    std::string name() const override { return mode_ == Mode::posterior ? "posterior" : "oracle"; }

    const EnumerableDataset& data() const { return data_; }
    Mode mode() const { return mode_; }

private:
    EnumerableDataset data_;
    MixingSchedule sched_;
    Vocab vocab_;
    Mode mode_;
    bool strict_ = true;
    DenoiserOutput marginals_;
};

// Predicts u (uniform over non-mask symbols) everywhere.
class UniformDenoiser final : public Denoiser {
public:
    explicit UniformDenoiser(Vocab vocab);
    using Denoiser::predict;
    void predict(std::span<const Token> z, std::span<const double> lambdas,
                 DenoiserOutput& out) const override;
    std::string name() const override { return "uniform"; }

private:
    Vocab vocab_;
};

// Predicts the dataset's per-position marginal, ignoring z.
class MarginalDenoiser final : public Denoiser {
public:
    MarginalDenoiser(const EnumerableDataset& data, Vocab vocab);
    using Denoiser::predict;
    void predict(std::span<const Token> z, std::span<const double> lambdas,
                 DenoiserOutput& out) const override;
    std::string name() const override { return "marginals"; }

private:
    Vocab vocab_;
    DenoiserOutput marginals_;
};

enum class BaselineKind { uniform, product_of_marginals };

std::unique_ptr<Denoiser> baseline_denoiser(BaselineKind kind, const EnumerableDataset& data,
                                            const Vocab& vocab);

} // namespace gidd
