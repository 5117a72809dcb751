#include "gidd/denoiser.hpp"

#include "gidd/error.hpp"

#include <cmath>
#include <map>

namespace gidd {

void EnumerableDataset::validate(const Vocab& vocab) const {
    if (sequences.empty()) {
        throw ValidationError("dataset is empty");
    }
    if (sequences.size() > kMaxSequences) {
        throw ValidationError("dataset exceeds " + std::to_string(kMaxSequences) + " sequences");
    }
    if (weights.size() != sequences.size()) {
        throw ValidationError("dataset weights and sequences differ in count");
    }
    const std::size_t len = seq_len();
    if (len == 0) {
        throw ValidationError("dataset sequences are empty");
    }
    double total = 0.0;
    for (std::size_t k = 0; k < sequences.size(); ++k) {
        if (sequences[k].size() != len) {
            throw ValidationError("dataset sequences differ in length");
        }
        for (Token t : sequences[k]) {
            if (t >= vocab.size || t == vocab.mask_id) {
                throw ValidationError("dataset token " + std::to_string(t) + " is not a clean symbol");
            }
        }
        if (!(weights[k] >= 0.0)) {
            throw ValidationError("dataset weight must be non-negative");
        }
        total += weights[k];
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw ValidationError("dataset weights sum to " + std::to_string(total) + ", expected 1");
    }
}

double EnumerableDataset::per_token_nll() const {
    std::map<TokenSequence, double> merged;
    for (std::size_t k = 0; k < sequences.size(); ++k) {
        merged[sequences[k]] += weights[k];
    }
    double h = 0.0;
    for (const auto& [seq, w] : merged) {
        if (w > 0.0) {
            h -= w * std::log(w);
        }
    }
    return h / static_cast<double>(seq_len());
}

EnumerableDataset EnumerableDataset::uniform_over(std::vector<TokenSequence> sequences) {
    EnumerableDataset d;
    const double w = 1.0 / static_cast<double>(sequences.size());
    d.weights.assign(sequences.size(), w);
    d.sequences = std::move(sequences);
    return d;
}

BayesOracle::BayesOracle(EnumerableDataset data, MixingSchedule sched, Vocab vocab, Mode mode)
    : data_(std::move(data)), sched_(sched), vocab_(vocab), mode_(mode) {
    vocab_.validate();
    sched_.validate();
    data_.validate(vocab_);
    marginals_.resize(data_.seq_len(), vocab_.size);
    for (std::size_t k = 0; k < data_.size(); ++k) {
        for (std::size_t i = 0; i < data_.seq_len(); ++i) {
            marginals_.at(i)[data_.sequences[k][i]] += data_.weights[k];
        }
    }
}

void BayesOracle::predict(std::span<const Token> z, std::span<const double> lambdas,
                          DenoiserOutput& out) const {
    const std::size_t len = data_.seq_len();
    if (z.size() != len || lambdas.size() != len) {
        throw RangeError("oracle input length does not match the dataset");
    }
    std::vector<NoiseLevel> levels;
    levels.reserve(len);
    for (double l : lambdas) {
        levels.push_back(noise_level(sched_, vocab_, l));
    }

    out.resize(len, vocab_.size);
    double total = 0.0;
    for (std::size_t k = 0; k < data_.size(); ++k) {
        const TokenSequence& x = data_.sequences[k];
        double like = data_.weights[k];
        for (std::size_t j = 0; j < len && like > 0.0; ++j) {
            like *= levels[j].marginal(x[j], z[j]);
        }
        if (like <= 0.0) {
            continue;
        }
        total += like;
        for (std::size_t i = 0; i < len; ++i) {
            out.at(i)[x[i]] += like;
        }
    }
    if (!(total > 0.0)) {
        if (strict_) {
            throw NumericalError("oracle posterior is empty: observed sequence is impossible under the data");
        }
        for (std::size_t i = 0; i < len; ++i) {
            auto row = out.at(i);
            const auto prior = marginals_.at(i);
            double norm = 0.0;
            for (Token v = 0; v < vocab_.size; ++v) {
                const double q = levels[i].marginal(v, z[i]);
                row[v] = q > 0.0 ? prior[v] * (mode_ == Mode::posterior ? q : 1.0) : 0.0;
                norm += row[v];
            }
            if (!(norm > 0.0)) {
                throw NumericalError("oracle: observed token is impossible at position " + std::to_string(i));
            }
            for (double& p : row) {
                p /= norm;
            }
        }
        return;
    }
    for (std::size_t i = 0; i < len; ++i) {
        auto row = out.at(i);
        double norm = total;
        if (mode_ == Mode::elbo_optimal) {
            norm = 0.0;
            for (Token v = 0; v < vocab_.size; ++v) {
                const double q = levels[i].marginal(v, z[i]);
                row[v] = q > 0.0 ? row[v] / q : 0.0;
                norm += row[v];
            }
        }
        for (double& p : row) {
            p /= norm;
        }
    }
}

UniformDenoiser::UniformDenoiser(Vocab vocab) : vocab_(vocab) { vocab_.validate(); }

void UniformDenoiser::predict(std::span<const Token> z, std::span<const double> /*lambdas*/,
                              DenoiserOutput& out) const {
    out.resize(z.size(), vocab_.size);
    const double p = 1.0 / static_cast<double>(vocab_.n_clean());
    for (std::size_t i = 0; i < z.size(); ++i) {
        auto row = out.at(i);
        for (Token v = 0; v < vocab_.size; ++v) {
            row[v] = v == vocab_.mask_id ? 0.0 : p;
        }
    }
}

MarginalDenoiser::MarginalDenoiser(const EnumerableDataset& data, Vocab vocab) : vocab_(vocab) {
    vocab_.validate();
    data.validate(vocab_);
    marginals_.resize(data.seq_len(), vocab_.size);
    for (std::size_t k = 0; k < data.size(); ++k) {
        for (std::size_t i = 0; i < data.seq_len(); ++i) {
            marginals_.at(i)[data.sequences[k][i]] += data.weights[k];
        }
    }
}

void MarginalDenoiser::predict(std::span<const Token> z, std::span<const double> /*lambdas*/,
                               DenoiserOutput& out) const {
    if (z.size() != marginals_.length()) {
        throw RangeError("marginal baseline input length does not match the dataset");
    }
    out = marginals_;
}

std::unique_ptr<Denoiser> baseline_denoiser(BaselineKind kind, const EnumerableDataset& data,
                                            const Vocab& vocab) {
    if (kind == BaselineKind::uniform) {
        return std::make_unique<UniformDenoiser>(vocab);
    }
    return std::make_unique<MarginalDenoiser>(data, vocab);
}

} // namespace gidd
