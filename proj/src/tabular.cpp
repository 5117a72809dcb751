#include "gidd/tabular.hpp"

#include "gidd/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>

namespace gidd {

using nlohmann::json;

void OptimizerConfig::validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw RangeError("optimizer betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) {
        throw RangeError("optimizer eps must be positive");
    }
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw RangeError("learning rate must be finite and non-negative");
    }
    if (batch_size < 1 || warmup_steps < 0) {
        throw RangeError("batch size must be positive and warmup non-negative");
    }
}

double OptimizerConfig::beta2_for_batch(long batch_size_seqs) {
    return batch_size_seqs >= 256 ? 0.98 : 0.99;
}

void laprop_update(const OptimizerConfig& cfg, std::vector<double>& params, const std::vector<double>& grad,
                   LaPropState& state) {
    const std::size_t n = params.size();
    if (grad.size() != n) {
        throw RangeError("laprop_update: gradient size mismatch");
    }
    if (state.m.size() != n) {
        state.m.assign(n, 0.0);
        state.v.assign(n, 0.0);
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double warm = cfg.warmup_steps > 0 ? std::min(1.0, t / static_cast<double>(cfg.warmup_steps)) : 1.0;
    const double lr = cfg.learning_rate * warm;
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < n; ++i) {
        const double g = grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        const double denom = std::sqrt(state.v[i] / bc2) + cfg.eps;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g / denom;
        params[i] -= lr * state.m[i] / bc1;
    }
}

TabularDenoiser::TabularDenoiser(MixingSchedule sched, Vocab vocab, std::size_t n_buckets)
    : sched_(sched), vocab_(vocab), n_buckets_(n_buckets) {
    sched_.validate();
    vocab_.validate();
    if (n_buckets_ < 1) {
        throw RangeError("tabular denoiser needs at least one bucket");
    }
    logits_.assign(n_buckets_ * vocab_.size * vocab_.n_clean(), 0.0);
}

std::size_t TabularDenoiser::bucket(double lambda) const {
    sched_.require_in_range(lambda);
    const double frac = (lambda - sched_.lambda_min) / (sched_.lambda_max - sched_.lambda_min);
    const auto b = static_cast<std::size_t>(std::floor(static_cast<double>(n_buckets_) * frac));
    return std::min(b, n_buckets_ - 1);
}

void TabularDenoiser::predict(std::span<const Token> z, std::span<const double> lambdas,
                              DenoiserOutput& out) const {
    if (z.size() != lambdas.size()) {
        throw RangeError("tabular denoiser: one log-SNR per position required");
    }
    const std::size_t n_clean = vocab_.n_clean();
    out.resize(z.size(), vocab_.size);
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (z[i] >= vocab_.size) {
            throw RangeError("tabular denoiser: token outside vocabulary");
        }
        const double* row = logits_.data() + row_offset(bucket(lambdas[i]), z[i]);
        const double mx = *std::max_element(row, row + n_clean);
        double total = 0.0;
        auto dst = out.at(i);
        for (std::size_t c = 0; c < n_clean; ++c) {
            const double e = std::exp(row[c] - mx);
            dst[token_of_column(c)] = e;
            total += e;
        }
        for (std::size_t c = 0; c < n_clean; ++c) {
            dst[token_of_column(c)] /= total;
        }
    }
}

void TabularDenoiser::save(std::ostream& out) const {
    json j;
    j["format"] = "gidd-tabular";
    j["version"] = 1;
    j["vocab"] = {{"size", vocab_.size}, {"mask_id", vocab_.mask_id}};
    j["vocab"]["empty_id"] = vocab_.empty_id ? json(*vocab_.empty_id) : json(nullptr);
    j["schedule"] = {{"a", sched_.a},
                     {"b", sched_.b},
                     {"lambda_min", sched_.lambda_min},
                     {"lambda_max", sched_.lambda_max}};
    j["n_buckets"] = n_buckets_;
    j["logits"] = logits_;
    j["optimizer"] = {{"step", opt_.step}, {"m", opt_.m}, {"v", opt_.v}};
    out << j.dump() << '\n';
}

TabularDenoiser TabularDenoiser::load(std::istream& in) {
    json j;
    try {
        in >> j;
        if (j.at("format") != "gidd-tabular" || j.at("version") != 1) {
            throw ValidationError("not a version-1 tabular checkpoint");
        }
        Vocab vocab;
        vocab.size = j.at("vocab").at("size").get<std::size_t>();
        vocab.mask_id = j.at("vocab").at("mask_id").get<Token>();
        if (!j.at("vocab").at("empty_id").is_null()) {
            vocab.empty_id = j.at("vocab").at("empty_id").get<Token>();
        }
        MixingSchedule sched;
        const json& s = j.at("schedule");
        sched.a = s.at("a").get<double>();
        sched.b = s.at("b").get<double>();
        sched.lambda_min = s.at("lambda_min").get<double>();
        sched.lambda_max = s.at("lambda_max").get<double>();
        TabularDenoiser model(sched, vocab, j.at("n_buckets").get<std::size_t>());
        auto logits = j.at("logits").get<std::vector<double>>();
        if (logits.size() != model.logits_.size()) {
            throw ValidationError("checkpoint logit table has the wrong size");
        }
        model.logits_ = std::move(logits);
        model.opt_.step = j.at("optimizer").at("step").get<long>();
        model.opt_.m = j.at("optimizer").at("m").get<std::vector<double>>();
        model.opt_.v = j.at("optimizer").at("v").get<std::vector<double>>();
        if ((!model.opt_.m.empty() && model.opt_.m.size() != model.logits_.size()) ||
            model.opt_.m.size() != model.opt_.v.size()) {
            throw ValidationError("checkpoint optimizer state has the wrong size");
        }
        return model;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed checkpoint: ") + e.what());
    }
}

double tabular_loss_and_grad(const TabularDenoiser& model, const TokenSequence& x, const TokenSequence& z,
                             std::span<const double> lambdas, std::span<const std::uint8_t> loss_mask,
                             std::vector<double>& grad) {
    const Vocab& vocab = model.vocab();
    const std::size_t n_clean = vocab.n_clean();
    DenoiserOutput out;
    model.predict(z, lambdas, out);
    std::vector<double> g(vocab.size);
    double total = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!loss_mask.empty() && !loss_mask[i]) {
            continue;
        }
        const NoiseLevel lvl = noise_level(model.schedule(), vocab, lambdas[i]);
        const auto x_hat = out.at(i);
        total += pointwise_loss(lvl, x[i], z[i], x_hat, g);
        // Softmax backward over the clean columns.
        double dot = 0.0;
        for (std::size_t c = 0; c < n_clean; ++c) {
            const Token v = model.token_of_column(c);
            dot += x_hat[v] * g[v];
        }
        double* row = grad.data() + model.row_offset(model.bucket(lambdas[i]), z[i]);
        for (std::size_t c = 0; c < n_clean; ++c) {
            const Token v = model.token_of_column(c);
            row[c] += x_hat[v] * (g[v] - dot);
        }
    }
    return total;
}

void TrainConfig::validate() const {
    optimizer.validate();
    if (n_steps < 1) {
        throw RangeError("training needs at least one step");
    }
    for (double f : {forcing_fraction, prompt_fraction, empty_fraction_max}) {
        if (!(f >= 0.0 && f <= 1.0)) {
            throw RangeError("training fractions must lie in [0, 1]");
        }
    }
    if (eval_every < 1) {
        throw RangeError("eval_every must be positive");
    }
}

namespace {

struct Example {
    TokenSequence x;
    TokenSequence z;
    std::vector<double> lambdas;
    std::vector<std::uint8_t> loss_mask;
};

Example draw_example(const EnumerableDataset& data, const TabularDenoiser& model, const TrainConfig& cfg,
                     const LambdaDistribution& p_lambda, Rng& rng) {
    const MixingSchedule& sched = model.schedule();
    const Vocab& vocab = model.vocab();
    Example ex;
    ex.x = data.sequences[rng.categorical(data.weights)];
    const std::size_t base_len = ex.x.size();
    if (cfg.empty_fraction_max > 0.0) {
        const double f = rng.uniform(0.0, cfg.empty_fraction_max);
        const auto n_empty = static_cast<std::size_t>(std::floor(f * static_cast<double>(base_len)));
        ex.x.insert(ex.x.end(), n_empty, *vocab.empty_id);
    }
    const std::size_t len = ex.x.size();

    ex.lambdas.resize(len);
    if (rng.uniform() < cfg.forcing_fraction) {
        for (double& l : ex.lambdas) {
            l = p_lambda.sample(rng);
        }
    } else {
        std::fill(ex.lambdas.begin(), ex.lambdas.end(), p_lambda.sample(rng));
    }

    std::size_t n_prompt = 0;
    if (rng.uniform() < cfg.prompt_fraction) {
        const double r = rng.uniform();
        const auto raw = static_cast<std::size_t>(std::floor(static_cast<double>(len) * std::acos(r)));
        n_prompt = std::min(raw, len - 1);
    }
    for (std::size_t i = 0; i < n_prompt; ++i) {
        ex.lambdas[i] = sched.lambda_max;
    }
    ex.z = sample_forward(ex.x, ex.lambdas, sched, vocab, rng);
    ex.loss_mask.assign(len, 1);
    for (std::size_t i = 0; i < n_prompt; ++i) {
        ex.z[i] = ex.x[i];
        ex.loss_mask[i] = 0;
    }
    return ex;
}

} // namespace

TrainResult train_tabular(TabularDenoiser& model, const EnumerableDataset& data, const TrainConfig& cfg) {
    cfg.validate();
    const Vocab& vocab = model.vocab();
    data.validate(vocab);
    if (cfg.empty_fraction_max > 0.0 && !vocab.empty_id) {
        throw RangeError("empty-token augmentation needs a vocabulary with an empty symbol");
    }
    const MixingSchedule& sched = model.schedule();
    const auto p_lambda = LambdaDistribution::for_schedule(sched, LambdaDistribution::Kind::uniform_on_range);
    const std::size_t batch = static_cast<std::size_t>(cfg.optimizer.batch_size);
    const std::size_t n_params = model.n_params();
    const double tokens_per_step = static_cast<double>(batch) * static_cast<double>(data.seq_len());

    QuadratureOptions qopts;
    qopts.n_grid = cfg.eval_grid;
    qopts.exec = cfg.exec;

    TrainResult result;
    std::vector<std::vector<double>> sample_grads(batch, std::vector<double>(n_params));
    std::vector<double> sample_loss(batch);
    std::vector<double> sample_count(batch);
    std::vector<double> grad(n_params);
    double surrogate_sum = 0.0;
    long surrogate_steps = 0;

    for (long step = 1; step <= cfg.n_steps; ++step) {
        for_each_index(cfg.exec, batch, [&](std::size_t s) {
            const auto stream = static_cast<std::uint64_t>(step - 1) * batch + s;
            Rng rng(derive_seed(cfg.seed, stream));
            const Example ex = draw_example(data, model, cfg, p_lambda, rng);
            std::vector<double>& g = sample_grads[s];
            std::fill(g.begin(), g.end(), 0.0);
            sample_loss[s] = tabular_loss_and_grad(model, ex.x, ex.z, ex.lambdas, ex.loss_mask, g);
            sample_count[s] = static_cast<double>(std::count(ex.loss_mask.begin(), ex.loss_mask.end(), 1));
        });

        double loss = 0.0;
        double count = 0.0;
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t s = 0; s < batch; ++s) {
            loss += sample_loss[s];
            count += sample_count[s];
            for (std::size_t k = 0; k < n_params; ++k) {
                grad[k] += sample_grads[s][k];
            }
        }
        const double inv = count > 0.0 ? 1.0 / count : 0.0;
        loss *= inv;
        if (!std::isfinite(loss)) {
            throw NumericalError("training diverged at step " + std::to_string(step));
        }
        for (double& g : grad) {
            g *= inv;
        }
        laprop_update(cfg.optimizer, model.logits(), grad, model.optimizer_state());
        for (double l : model.logits()) {
            if (!std::isfinite(l)) {
                throw NumericalError("training diverged at step " + std::to_string(step));
            }
        }
        surrogate_sum += loss;
        ++surrogate_steps;

        if (step % cfg.eval_every == 0 || step == cfg.n_steps) {
            const double nelbo = dataset_nelbo_quadrature(data, model, sched, vocab, qopts).mean;
            if (!std::isfinite(nelbo)) {
                throw NumericalError("training diverged at step " + std::to_string(step));
            }
            CurvePoint p;
            p.step = step;
            p.tokens = static_cast<double>(step) * tokens_per_step;
            p.loss = nelbo;
            p.surrogate = surrogate_sum / static_cast<double>(surrogate_steps);
            result.curve.push_back(p);
            result.final_nelbo = nelbo;
            surrogate_sum = 0.0;
            surrogate_steps = 0;
        }
    }
    return result;
}

} // namespace gidd
