#include "gidd/cli.hpp"

#include "gidd/dataset_io.hpp"
#include "gidd/elbo.hpp"
#include "gidd/error.hpp"
#include "gidd/planner.hpp"
#include "gidd/runs.hpp"
#include "gidd/sampler.hpp"
#include "gidd/scaling_fit.hpp"
#include "gidd/svg_plot.hpp"
#include "gidd/tabular.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

namespace gidd {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw NumericalError("SHA-256 computation failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += kHex[digest[i] >> 4];
        out += kHex[digest[i] & 0xf];
    }
    return out;
}

void write_file_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) {
            throw ValidationError("cannot write '" + tmp + "'");
        }
        f << content;
        if (!f.flush()) {
            throw ValidationError("write to '" + tmp + "' failed");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw ValidationError("cannot move output into place at '" + path + "'");
    }
}

namespace {

struct Globals {
    std::uint64_t seed = 0;
    std::string out;
    std::string format = "json";
    std::string plot;
};

// Shared state of one invocation: parsed globals, input digests, sinks.
class Context {
public:
    Context(const Globals& g, std::string command, std::ostream& out, std::ostream& err)
        : g_(g), command_(std::move(command)), out_(out), err_(err) {}

    const Globals& globals() const { return g_; }
    std::ostream& err() { return err_; }
    bool csv() const { return g_.format == "csv"; }

    std::string read_input(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) {
            throw ValidationError("cannot open '" + path + "'");
        }
        std::ostringstream ss;
        ss << f.rdbuf();
        std::string bytes = ss.str();
        inputs_.push_back({{"path", path}, {"sha256", sha256_hex(bytes)}});
        return bytes;
    }

    std::vector<RunRecord> read_runs(const std::string& path, const std::string& format, const std::string& manifest) {
        std::istringstream table(read_input(path));
        if (parse_runs_format(format) == RunsFormat::csv) {
            if (manifest.empty()) {
                throw ValidationError("csv runs need --manifest");
            }
            std::istringstream man(read_input(manifest));
            return load_runs_csv(table, man);
        }
        return load_runs_jsonl(table);
    }

    DatasetFile read_dataset(const std::string& path) {
        std::istringstream in(read_input(path));
        return load_dataset(in);
    }

    // Wraps a command result with provenance and sends it to its destination.
    void emit(ordered_json result, const std::string& csv_body) {
        std::string text;
        if (csv()) {
            std::ostringstream o;
            o << "# schema_version=" << kCliSchemaVersion << " command=" << command_ << " seed=" << g_.seed << '\n';
            for (const auto& in : inputs_) {
                o << "# input " << in["path"].get<std::string>() << " sha256=" << in["sha256"].get<std::string>()
                  << '\n';
            }
            o << csv_body;
            text = o.str();
        } else {
            ordered_json doc;
            doc["schema_version"] = kCliSchemaVersion;
            doc["command"] = command_;
            doc["seed"] = g_.seed;
            doc["inputs"] = inputs_;
            doc["result"] = std::move(result);
            text = doc.dump(2) + "\n";
        }
        write_artifact(g_.out, command_ + (csv() ? ".csv" : ".json"), text);
    }

    void write_artifact(const std::string& explicit_path, const std::string& default_name, const std::string& text) {
        if (!explicit_path.empty()) {
            write_file_atomic(explicit_path, text);
            return;
        }
        if (const char* dir = std::getenv("GIDD_OUT_DIR"); dir && *dir) {
            write_file_atomic((std::filesystem::path(dir) / default_name).string(), text);
            return;
        }
        out_ << text;
    }

    void plot(const PlotSpec& spec) {
        if (!g_.plot.empty()) {
            write_file_atomic(g_.plot, render_svg(spec));
        }
    }

private:
    Globals g_;
    std::string command_;
    std::ostream& out_;
    std::ostream& err_;
    ordered_json inputs_ = ordered_json::array();
};

ordered_json to_json(const Interval& i) { return ordered_json::array({i.low, i.high}); }

ordered_json to_json(const PowerLawFit& f) {
    ordered_json j;
    j["A"] = f.A;
    j["alpha"] = f.alpha;
    j["E"] = f.E;
    j["r_squared"] = f.r_squared;
    j["n_points"] = f.n_points;
    if (f.ci_A) {
        j["ci_A"] = to_json(*f.ci_A);
    }
    if (f.ci_alpha) {
        j["ci_alpha"] = to_json(*f.ci_alpha);
    }
    if (f.ci_E) {
        j["ci_E"] = to_json(*f.ci_E);
    }
    return j;
}

ordered_json to_json(const LawFit& f) {
    ordered_json j;
    j["A"] = f.fit.A;
    j["alpha"] = f.fit.alpha;
    j["r_squared"] = f.fit.r_squared;
    j["n_points"] = f.fit.n_points;
    j["level"] = f.level;
    j["alpha_ci"] = to_json(f.alpha_ci);
    j["A_ci"] = to_json(f.A_ci);
    j["x_unit"] = f.x_unit;
    j["y_unit"] = f.y_unit;
    return j;
}

ordered_json to_json(const HyperbolaFit& f) {
    ordered_json j;
    j["S_min"] = f.S_min;
    j["B_min"] = f.B_min;
    j["alpha"] = f.alpha;
    j["residual"] = f.residual;
    j["target_loss"] = f.target_loss;
    j["unit"] = f.unit;
    const TokenOptimal t = token_optimal(f);
    j["token_optimal"] = {{"B", t.B}, {"S", t.S}, {"D", t.D}};
    return j;
}

std::string csv_num(double v) { return format_double(v); }

struct DenoiserChoice {
    std::unique_ptr<Denoiser> owned;
};

std::unique_ptr<Denoiser> make_denoiser(Context& ctx, const std::string& kind, const std::string& checkpoint,
                                        const DatasetFile& ds, const MixingSchedule& sched, bool strict) {
    if (kind == "oracle" || kind == "posterior") {
        auto o = std::make_unique<BayesOracle>(ds.data, sched, ds.vocab,
                                               kind == "oracle" ? BayesOracle::Mode::elbo_optimal
                                                                : BayesOracle::Mode::posterior);
        o->set_strict(strict);
        return o;
    }
    if (kind == "uniform") {
        return baseline_denoiser(BaselineKind::uniform, ds.data, ds.vocab);
    }
    if (kind == "marginals") {
        return baseline_denoiser(BaselineKind::product_of_marginals, ds.data, ds.vocab);
    }
    if (kind == "tabular") {
        if (checkpoint.empty()) {
            throw ValidationError("--denoiser tabular needs --checkpoint");
        }
        std::istringstream in(ctx.read_input(checkpoint));
        auto t = std::make_unique<TabularDenoiser>(TabularDenoiser::load(in));
        if (t->vocab().size != ds.vocab.size || t->vocab().mask_id != ds.vocab.mask_id) {
            throw ValidationError("checkpoint vocabulary does not match the dataset");
        }
        return t;
    }
    throw RangeError("unknown denoiser '" + kind + "'");
}

std::string sequence_key(const TokenSequence& s) {
    std::string k;
    for (std::size_t i = 0; i < s.size(); ++i) {
        k += (i ? "," : "") + std::to_string(s[i]);
    }
    return k;
}

// ---- elbo ----------------------------------------------------------------

struct ElboArgs {
    std::string data;
    std::string noise = "masked";
    std::string denoiser = "oracle";
    std::string checkpoint;
    std::string estimator = "quadrature";
    std::size_t samples = 10000;
    std::size_t grid = 512;
    std::string proposal = "linear";
};

void cmd_elbo(Context& ctx, const ElboArgs& a) {
    const DatasetFile ds = ctx.read_dataset(a.data);
    const MixingSchedule sched = schedule_for(parse_noise_type(a.noise));
    const auto den = make_denoiser(ctx, a.denoiser, a.checkpoint, ds, sched, true);

    std::vector<double> per_seq(ds.data.size());
    std::vector<double> per_se(ds.data.size(), 0.0);
    if (a.estimator == "quadrature") {
        QuadratureOptions q;
        q.n_grid = a.grid;
        per_seq = dataset_nelbo_quadrature(ds.data, *den, sched, ds.vocab, q).per_sequence;
    } else if (a.estimator == "mc") {
        LambdaDistribution::Kind kind;
        if (a.proposal == "linear") {
            kind = LambdaDistribution::Kind::linear_schedule;
        } else if (a.proposal == "uniform") {
            kind = LambdaDistribution::Kind::uniform_on_range;
        } else {
            throw RangeError("unknown proposal '" + a.proposal + "' (expected linear or uniform)");
        }
        const auto p = LambdaDistribution::for_schedule(sched, kind);
        for (std::size_t k = 0; k < ds.data.size(); ++k) {
            const ElboEstimate e = nelbo_monte_carlo(ds.data.sequences[k], *den, sched, ds.vocab, p, a.samples,
                                                     derive_seed(ctx.globals().seed, k));
            per_seq[k] = e.value;
            per_se[k] = e.std_error;
        }
    } else {
        throw RangeError("unknown estimator '" + a.estimator + "' (expected quadrature or mc)");
    }

    double mean = 0.0;
    double var = 0.0;
    EndpointTerms ends;
    for (std::size_t k = 0; k < ds.data.size(); ++k) {
        const double w = ds.data.weights[k];
        mean += w * per_seq[k];
        var += w * w * per_se[k] * per_se[k];
        const EndpointTerms e = nelbo_endpoint_terms(ds.data.sequences[k], *den, sched, ds.vocab);
        ends.reconstruction += w * e.reconstruction;
        ends.prior_kl += w * e.prior_kl;
    }
    const double nll = ds.data.per_token_nll();

    ordered_json r;
    r["noise"] = a.noise;
    r["noise_b"] = sched.b;
    r["denoiser"] = den->name();
    r["estimator"] = a.estimator;
    if (a.estimator == "mc") {
        r["samples"] = a.samples;
        r["proposal"] = a.proposal;
        r["std_error"] = std::sqrt(var);
    } else {
        r["grid"] = a.grid;
    }
    r["nll"] = nll;
    r["nelbo_integral"] = mean;
    r["endpoints"] = {{"reconstruction", ends.reconstruction}, {"prior_kl", ends.prior_kl}};
    r["nelbo_total"] = mean + ends.total();
    r["bpb_total"] = nats_to_bpb(mean + ends.total());
    r["per_sequence"] = per_seq;

    std::string csv = "sequence,weight,nelbo_integral,std_error\n";
    for (std::size_t k = 0; k < ds.data.size(); ++k) {
        csv += "\"" + sequence_key(ds.data.sequences[k]) + "\"," + csv_num(ds.data.weights[k]) + "," +
               csv_num(per_seq[k]) + "," + csv_num(per_se[k]) + "\n";
    }
    ctx.emit(std::move(r), csv);
}

// ---- sample --------------------------------------------------------------

struct SampleArgs {
    std::string data;
    std::string noise = "masked";
    std::string denoiser = "oracle";
    std::string checkpoint;
    std::string mode = "ancestral";
    std::string schedule = "time";
    std::size_t steps = 64;
    std::size_t n = 10000;
    std::size_t k = 1;
    std::size_t length = 0;
    std::string trace;
};

void cmd_sample(Context& ctx, const SampleArgs& a) {
    const DatasetFile ds = ctx.read_dataset(a.data);
    const MixingSchedule sched = schedule_for(parse_noise_type(a.noise));
    const auto den = make_denoiser(ctx, a.denoiser, a.checkpoint, ds, sched, false);
    const std::size_t len = a.length ? a.length : ds.data.seq_len();
    SamplerOptions base;
    base.seed = ctx.globals().seed;
    base.record_states = false;

    std::vector<TokenSequence> samples;
    SampleTrace first;
    SamplerOptions first_opts = base;
    first_opts.seed = derive_seed(base.seed, 0);
    first_opts.record_states = true;
    if (a.mode == "ancestral") {
        DenoiseSchedule schedule;
        if (a.schedule == "time") {
            schedule = DenoiseSchedule::uniform_time(sched, a.steps);
        } else if (a.schedule == "lambda") {
            schedule = DenoiseSchedule::uniform_lambda(sched, a.steps);
        } else {
            throw RangeError("unknown schedule '" + a.schedule + "' (expected time or lambda)");
        }
        samples = ancestral_sample_many(*den, sched, ds.vocab, schedule, len, a.n, base);
        if (!a.trace.empty()) {
            first = ancestral_sample(*den, sched, ds.vocab, schedule, len, first_opts);
        }
    } else if (a.mode == "adaptive") {
        AdaptiveOptions ad;
        ad.T = a.steps;
        ad.k = a.k;
        samples = adaptive_sample_many(*den, sched, ds.vocab, ad, len, a.n, base);
        if (!a.trace.empty()) {
            first = adaptive_sample(*den, sched, ds.vocab, ad, len, first_opts);
        }
    } else {
        throw RangeError("unknown mode '" + a.mode + "' (expected ancestral or adaptive)");
    }
    if (!a.trace.empty()) {
        std::ostringstream t;
        write_trace_jsonl(t, first);
        write_file_atomic(a.trace, t.str());
    }

    std::map<std::string, double> counts;
    for (const TokenSequence& s : samples) {
        counts[sequence_key(s)] += 1.0;
    }
    std::map<std::string, double> target;
    if (len == ds.data.seq_len()) {
        for (std::size_t k = 0; k < ds.data.size(); ++k) {
            target[sequence_key(ds.data.sequences[k])] += ds.data.weights[k];
        }
    }
    ordered_json r;
    r["noise"] = a.noise;
    r["mode"] = a.mode;
    r["steps"] = a.steps;
    r["n"] = a.n;
    r["length"] = len;
    ordered_json dist = ordered_json::array();
    std::string csv = "sequence,count,frequency,data_probability\n";
    std::map<std::string, double> keys = counts;
    for (const auto& [key, w] : target) {
        keys.emplace(key, 0.0);
    }
    double tv = 0.0;
    for (const auto& [key, unused] : keys) {
        (void)unused;
        const double c = counts.count(key) ? counts.at(key) : 0.0;
        const double f = c / static_cast<double>(a.n);
        const double p = target.count(key) ? target.at(key) : 0.0;
        tv += std::abs(f - p);
        dist.push_back({{"sequence", key}, {"count", c}, {"frequency", f}, {"data_probability", p}});
        csv += "\"" + key + "\"," + csv_num(c) + "," + csv_num(f) + "," + csv_num(p) + "\n";
    }
    if (!target.empty()) {
        r["total_variation"] = 0.5 * tv;
    }
    r["distribution"] = std::move(dist);
    ctx.emit(std::move(r), csv);
}

// ---- train-toy -----------------------------------------------------------

struct TrainArgs {
    std::string data;
    std::string noise = "uniform";
    std::vector<std::size_t> buckets{1, 4, 16};
    std::vector<long> batch_sizes{16, 32, 64, 128};
    std::vector<double> lrs{0.002};
    long steps = 2000;
    long eval_every = 25;
    long warmup = 100;
    std::size_t grid = 128;
    double forcing = 0.5;
    double prompt = 0.2;
    double empty_max = 0.0;
    std::string runs_out;
    std::string runs_format = "jsonl";
};

void cmd_train_toy(Context& ctx, const TrainArgs& a) {
    const DatasetFile ds = ctx.read_dataset(a.data);
    const NoiseType noise = parse_noise_type(a.noise);
    const MixingSchedule sched = schedule_for(noise);
    const BayesOracle oracle(ds.data, sched, ds.vocab);
    QuadratureOptions q;
    q.n_grid = a.grid;
    const double oracle_nelbo = dataset_nelbo_quadrature(ds.data, oracle, sched, ds.vocab, q).mean;

    std::vector<RunRecord> runs;
    ordered_json summary = ordered_json::array();
    std::string csv = "run_id,buckets,params,batch_size,lr,final_nelbo,ratio_to_oracle\n";
    std::uint64_t index = 0;
    for (std::size_t nb : a.buckets) {
        for (long bs : a.batch_sizes) {
            for (double lr : a.lrs) {
                TabularDenoiser model(sched, ds.vocab, nb);
                TrainConfig cfg;
                cfg.optimizer.learning_rate = lr;
                cfg.optimizer.batch_size = bs;
                cfg.optimizer.beta2 = OptimizerConfig::beta2_for_batch(bs);
                cfg.optimizer.warmup_steps = a.warmup;
                cfg.n_steps = a.steps;
                cfg.eval_every = a.eval_every;
                cfg.eval_grid = a.grid;
                cfg.forcing_fraction = a.forcing;
                cfg.prompt_fraction = a.prompt;
                cfg.empty_fraction_max = a.empty_max;
                cfg.seed = derive_seed(ctx.globals().seed, index++);
                const TrainResult res = train_tabular(model, ds.data, cfg);

                RunRecord run;
                run.run_id = "toy-" + std::string(noise_name(noise)) + "-b" + std::to_string(nb) + "-B" +
                             std::to_string(bs) + "-lr" + format_double(lr);
                run.model.name = "tab-b" + std::to_string(nb);
                run.model.layers = 1;
                run.model.hidden = static_cast<long>(nb);
                run.model.heads = 1;
                run.model.seq_len = static_cast<long>(ds.data.seq_len());
                run.model.params = static_cast<double>(model.n_params());
                run.model.vocab_size = static_cast<long>(ds.vocab.size);
                run.noise_b = sched.b;
                run.batch_size_seqs = bs;
                run.lr_base = lr;
                run.points = res.curve;
                run.validate();
                runs.push_back(run);

                const double ratio = res.final_nelbo / oracle_nelbo;
                summary.push_back({{"run_id", run.run_id},
                                   {"buckets", nb},
                                   {"params", run.model.params},
                                   {"batch_size", bs},
                                   {"lr", lr},
                                   {"final_nelbo", res.final_nelbo},
                                   {"ratio_to_oracle", ratio}});
                csv += run.run_id + "," + std::to_string(nb) + "," + csv_num(run.model.params) + "," +
                       std::to_string(bs) + "," + csv_num(lr) + "," + csv_num(res.final_nelbo) + "," +
                       csv_num(ratio) + "\n";
            }
        }
    }

    std::ostringstream table;
    std::ostringstream manifest;
    if (parse_runs_format(a.runs_format) == RunsFormat::csv) {
        write_runs_csv(table, manifest, runs);
    } else {
        write_runs_jsonl(table, runs);
    }
    const std::string ext = a.runs_format == "csv" ? ".csv" : ".jsonl";
    std::string runs_path = a.runs_out;
    if (runs_path.empty()) {
        const char* dir = std::getenv("GIDD_OUT_DIR");
        runs_path = (std::filesystem::path(dir && *dir ? dir : ".") / ("toy_runs" + ext)).string();
    }
    write_file_atomic(runs_path, table.str());
    if (a.runs_format == "csv") {
        write_file_atomic(runs_path + ".manifest.jsonl", manifest.str());
    }

    PlotSpec plot;
    plot.title = "toy study: NELBO vs tokens";
    plot.x_label = "tokens";
    plot.y_label = "NELBO (nats/token)";
    plot.log_x = true;
    for (const RunRecord& r : runs) {
        PlotSeries s;
        s.label = r.run_id;
        for (const CurvePoint& p : r.points) {
            s.xs.push_back(p.tokens);
            s.ys.push_back(p.loss);
        }
        s.markers = false;
        plot.series.push_back(std::move(s));
    }
    ctx.plot(plot);

    ordered_json r;
    r["noise"] = a.noise;
    r["noise_b"] = sched.b;
    r["oracle_nelbo"] = oracle_nelbo;
    r["runs_file"] = runs_path;
    r["runs"] = std::move(summary);
    ctx.emit(std::move(r), csv);
}

// ---- fit-scaling ---------------------------------------------------------

struct RunsArgs {
    std::string path;
    std::string format = "jsonl";
    std::string manifest;
    std::optional<double> noise_b;
};

std::vector<RunRecord> load_filtered(Context& ctx, const RunsArgs& a) {
    std::vector<RunRecord> runs = ctx.read_runs(a.path, a.format, a.manifest);
    if (a.noise_b) {
        std::erase_if(runs, [&](const RunRecord& r) { return r.noise_b != *a.noise_b; });
    }
    if (runs.empty()) {
        throw ValidationError("no runs left after filtering");
    }
    return runs;
}

// Log-spaced targets where at least three model sizes have data.
std::vector<double> auto_targets(std::span<const RunRecord> runs, FlopMethod method, std::size_t n) {
    std::map<std::string, std::pair<double, double>> range;
    double lo = std::numeric_limits<double>::infinity();
    double hi = 0.0;
    for (const RunRecord& r : runs) {
        if (r.points.empty()) {
            continue;
        }
        const double m = flops_per_token(r.model, method);
        const double a = m * r.points.front().tokens;
        const double b = m * r.points.back().tokens;
        auto [it, fresh] = range.try_emplace(r.model.name, a, b);
        if (!fresh) {
            it->second.first = std::min(it->second.first, a);
            it->second.second = std::max(it->second.second, b);
        }
        lo = std::min(lo, a);
        hi = std::max(hi, b);
    }
    std::vector<double> covered;
    constexpr int kCandidates = 64;
    for (int i = 0; i < kCandidates; ++i) {
        const double c = std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * (i + 0.5) / kCandidates);
        int cover = 0;
        for (const auto& [name, ab] : range) {
            cover += (c >= ab.first && c <= ab.second) ? 1 : 0;
        }
        if (cover >= 3) {
            covered.push_back(c);
        }
    }
    if (covered.size() < n) {
        return covered;
    }
    std::vector<double> out;
    const double l0 = std::log(covered.front());
    const double l1 = std::log(covered.back());
    for (std::size_t k = 0; k < n; ++k) {
        out.push_back(std::exp(l0 + (l1 - l0) * static_cast<double>(k) / static_cast<double>(n - 1)));
    }
    return out;
}

struct ScalingArgs {
    RunsArgs runs;
    std::string method = "1";
    std::string smoothing = "sq_fit";
    std::vector<double> targets;
    std::size_t n_targets = 8;
    std::size_t window = 5;
    bool linear_loss = false;
    std::size_t parabola_window = 5;
    std::size_t bootstrap = 0;
    std::string ci = "2sigma";
};

void cmd_fit_scaling(Context& ctx, const ScalingArgs& a) {
    const std::vector<RunRecord> runs = load_filtered(ctx, a.runs);
    const FlopMethod method = parse_flop_method(a.method);
    ScalingFitOptions opts;
    opts.smoothing = parse_smoothing(a.smoothing);
    opts.read.window = a.window;
    opts.read.log_loss = !a.linear_loss;
    opts.parabola_window = a.parabola_window;
    if (a.bootstrap > 0) {
        BootstrapOptions b;
        b.n_resamples = a.bootstrap;
        b.level = parse_ci_level(a.ci);
        b.seed = ctx.globals().seed;
        opts.bootstrap = b;
    }
    const std::vector<double> targets = a.targets.empty() ? auto_targets(runs, method, a.n_targets) : a.targets;
    const ComputeOptimalLaws laws = compute_optimal_laws(runs, targets, method, opts);
    for (const std::string& w : laws.warnings) {
        ctx.err() << "warning: " << w << '\n';
    }

    ordered_json r;
    r["method"] = flop_method_name(method);
    r["smoothing"] = smoothing_name(opts.smoothing);
    r["targets"] = targets;
    r["laws"] = {{"M", to_json(laws.M)}, {"D", to_json(laws.D)}, {"P", to_json(laws.P)}, {"L", to_json(laws.L)}};
    r["complementarity"] = laws.complementarity;
    ordered_json front = ordered_json::array();
    std::string csv = "C,M,D,P,loss,fallback\n";
    for (const FrontierPoint& f : laws.frontier) {
        front.push_back({{"C", f.C}, {"M", f.M}, {"D", f.D}, {"P", f.P}, {"loss", f.loss}, {"fallback", f.fallback}});
        csv += csv_num(f.C) + "," + csv_num(f.M) + "," + csv_num(f.D) + "," + csv_num(f.P) + "," + csv_num(f.loss) +
               "," + (f.fallback ? "1" : "0") + "\n";
    }
    r["frontier"] = std::move(front);
    r["warnings"] = laws.warnings;

    PlotSpec plot;
    plot.title = "iso-FLOP profiles";
    plot.x_label = "FLOPs per token M";
    plot.y_label = "loss (nats)";
    plot.log_x = true;
    const IsoFlopExtraction ex = extract_isoflop(runs, targets, method, opts.read);
    for (double c : targets) {
        PlotSeries s;
        s.label = "C=" + format_double(c).substr(0, 8);
        for (const IsoFlopPoint& p : ex.points) {
            if (p.target_C == c) {
                s.xs.push_back(p.model_M);
                s.ys.push_back(p.loss);
            }
        }
        plot.series.push_back(std::move(s));
    }
    PlotSeries opt;
    opt.label = "optimum";
    opt.lines = false;
    for (const FrontierPoint& f : laws.frontier) {
        opt.xs.push_back(f.M);
        opt.ys.push_back(f.loss);
    }
    plot.series.push_back(std::move(opt));
    ctx.plot(plot);
    ctx.emit(std::move(r), csv);
}

// ---- fit-hparams ---------------------------------------------------------

struct HparamArgs {
    RunsArgs runs;
    std::vector<double> losses;
    std::size_t n_levels = 4;
    double level = 0.99;
    bool hyperbolas = false;
};

void cmd_fit_hparams(Context& ctx, const HparamArgs& a) {
    const std::vector<RunRecord> runs = load_filtered(ctx, a.runs);
    const std::vector<double> levels = a.losses.empty() ? auto_loss_levels(runs, a.n_levels) : a.losses;
    const HparamExtraction ex = optimal_hparam_points(runs, levels);
    std::vector<double> d;
    std::vector<double> b;
    std::vector<double> lr;
    ordered_json pts = ordered_json::array();
    std::string csv = "model,target_loss,tokens_D,batch_seqs,batch_tokens,lr\n";
    for (const HparamPoint& p : ex.points) {
        d.push_back(p.tokens_D);
        b.push_back(p.batch_tokens);
        lr.push_back(p.lr);
        pts.push_back({{"model", p.model},
                       {"target_loss", p.target_loss},
                       {"tokens_D", p.tokens_D},
                       {"batch_seqs", p.batch_seqs},
                       {"batch_tokens", p.batch_tokens},
                       {"lr", p.lr}});
        csv += p.model + "," + csv_num(p.target_loss) + "," + csv_num(p.tokens_D) + "," +
               std::to_string(p.batch_seqs) + "," + csv_num(p.batch_tokens) + "," + csv_num(p.lr) + "\n";
    }
    const LawFit batch = fit_batch_law(d, b, a.level);
    const LawFit lrl = fit_lr_law(b, lr, a.level);

    ordered_json r;
    r["target_losses"] = levels;
    r["batch_law"] = to_json(batch);
    r["lr_law"] = to_json(lrl);
    r["points"] = std::move(pts);
    if (a.hyperbolas) {
        ordered_json hy = ordered_json::array();
        std::vector<HyperbolaFit> fits;
        for (const IsoLossCurve& c : ex.iso_loss) {
            if (c.batch_seqs.size() < 4) {
                continue;
            }
            try {
                fits.push_back(fit_hyperbola(c.batch_seqs, c.steps, "sequences", c.target_loss));
                ordered_json j = to_json(fits.back());
                j["model"] = c.model;
                hy.push_back(std::move(j));
            } catch (const NumericalError& e) {
                ctx.err() << "warning: hyperbola for " << c.model << " at loss " << c.target_loss << ": " << e.what()
                          << '\n';
            }
        }
        r["hyperbolas"] = std::move(hy);
        if (fits.size() >= 3) {
            const CriticalSummary s = summarize_hyperbolas(fits);
            r["critical_summary"] = {{"S_min", to_json(s.S_min)}, {"B_min", to_json(s.B_min)}, {"warning", s.warning}};
        }
    }

    PlotSpec plot;
    plot.title = "optimal batch size";
    plot.x_label = "tokens D";
    plot.y_label = "batch tokens";
    plot.log_x = true;
    plot.log_y = true;
    PlotSeries obs{"observed", d, b, false, true};
    PlotSeries fit{"fit", {}, {}, true, false};
    if (!d.empty()) {
        const double lo = *std::min_element(d.begin(), d.end());
        const double hi = *std::max_element(d.begin(), d.end());
        for (int i = 0; i <= 32; ++i) {
            const double x = std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * i / 32.0);
            fit.xs.push_back(x);
            fit.ys.push_back(batch.fit(x));
        }
    }
    plot.series = {obs, fit};
    ctx.plot(plot);
    ctx.emit(std::move(r), csv);
}

// ---- fit-hyperbola -------------------------------------------------------

struct HyperbolaArgs {
    std::string input;
    RunsArgs runs;
    std::string model;
    double loss = 0.0;
    std::string unit = "sequences";
};

void cmd_fit_hyperbola(Context& ctx, const HyperbolaArgs& a) {
    std::vector<double> B;
    std::vector<double> S;
    if (!a.input.empty()) {
        std::istringstream in(ctx.read_input(a.input));
        std::string line;
        long lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty() || line[0] == '#' || (lineno == 1 && !std::isdigit(static_cast<unsigned char>(line[0])))) {
                continue;
            }
            double bv = 0.0;
            double sv = 0.0;
            if (std::sscanf(line.c_str(), "%lf,%lf", &bv, &sv) != 2) {
                throw ValidationError("expected 'batch,steps'", lineno);
            }
            B.push_back(bv);
            S.push_back(sv);
        }
    } else if (!a.runs.path.empty()) {
        if (a.model.empty() || !(a.loss > 0.0)) {
            throw ValidationError("--runs needs --model and a positive --loss");
        }
        std::vector<RunRecord> runs = load_filtered(ctx, a.runs);
        std::erase_if(runs, [&](const RunRecord& r) { return r.model.name != a.model; });
        const double target = a.loss;
        const HparamExtraction ex = optimal_hparam_points(runs, std::span<const double>(&target, 1));
        if (ex.iso_loss.empty()) {
            throw ValidationError("fewer than two batch sizes of '" + a.model + "' reach the target loss");
        }
        B = ex.iso_loss.front().batch_seqs;
        S = ex.iso_loss.front().steps;
    } else {
        throw ValidationError("fit-hyperbola needs --input or --runs");
    }
    const HyperbolaFit fit = fit_hyperbola(B, S, a.unit, a.loss);
    ordered_json r = to_json(fit);
    r["points"] = {{"B", B}, {"S", S}};
    std::string csv = "S_min,B_min,alpha,residual,B_opt,S_opt,D_opt\n";
    const TokenOptimal t = token_optimal(fit);
    csv += csv_num(fit.S_min) + "," + csv_num(fit.B_min) + "," + csv_num(fit.alpha) + "," + csv_num(fit.residual) +
           "," + csv_num(t.B) + "," + csv_num(t.S) + "," + csv_num(t.D) + "\n";

    PlotSpec plot;
    plot.title = "iso-loss hyperbola";
    plot.x_label = "batch size (" + a.unit + ")";
    plot.y_label = "steps";
    plot.log_x = true;
    plot.log_y = true;
    PlotSeries obs{"observed", B, S, false, true};
    PlotSeries curve{"fit", {}, {}, true, false};
    const double lo = std::max(fit.B_min * 1.01, 0.5 * *std::min_element(B.begin(), B.end()));
    const double hi = 2.0 * *std::max_element(B.begin(), B.end());
    for (int i = 0; i <= 64; ++i) {
        const double x = std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * i / 64.0);
        curve.xs.push_back(x);
        curve.ys.push_back(fit.steps_at(x));
    }
    plot.series = {obs, curve, PlotSeries{"token-optimal", {t.B}, {t.S}, false, true}};
    ctx.plot(plot);
    ctx.emit(std::move(r), csv);
}

// ---- plan ----------------------------------------------------------------

struct PlanArgs {
    double flops = 0.0;
    std::string noise = "uniform";
    std::vector<std::string> laws;
    std::string method = "1";
    std::string smoothing = "sq_fit";
    long seq_len = 2048;
};

void cmd_plan(Context& ctx, const PlanArgs& a) {
    const FlopMethod method = parse_flop_method(a.method);
    const Smoothing sm = parse_smoothing(a.smoothing);
    PlannerLaws laws;
    for (const std::string& p : a.laws) {
        std::istringstream in(ctx.read_input(p));
        load_planner_laws(in, a.noise, method, sm, laws);
    }
    PlanOptions opts;
    opts.method = method;
    opts.seq_len = a.seq_len;
    const PlanResult p = plan_run(a.flops, laws, opts);

    ordered_json r;
    r["C"] = p.C;
    r["noise"] = a.noise;
    r["method"] = flop_method_name(method);
    r["smoothing"] = smoothing_name(sm);
    r["M"] = p.M;
    r["P"] = p.P;
    r["D"] = p.D;
    r["loss"] = p.loss;
    r["bpb"] = p.bpb;
    r["loss_annealed"] = p.loss_annealed;
    r["anneal_improvement"] = {{"value", kAnnealImprovement}, {"ci", kAnnealImprovementCi}};
    r["architecture"] = {{"name", p.architecture.name},
                         {"layers", p.architecture.layers},
                         {"hidden", p.architecture.hidden},
                         {"params", p.architecture.params},
                         {"M", p.architecture_M}};
    r["batch"] = {{"tokens", p.batch_tokens}, {"sequences", p.batch_seqs}};
    r["eta_base"] = p.eta_base;
    r["groups"] = {{"eta_bulk", p.groups.eta_bulk},
                   {"eta_aux", p.groups.eta_aux},
                   {"eps", p.groups.eps},
                   {"sigma_bulk", p.groups.sigma_bulk},
                   {"sigma_aux", p.groups.sigma_aux},
                   {"residual_multiplier", p.groups.residual_multiplier},
                   {"output_multiplier", p.groups.output_multiplier}};
    r["beta2"] = p.beta2;
    r["provenance"] = p.provenance;

    std::string csv = "key,value\n";
    for (const auto& [k, v] : std::vector<std::pair<std::string, double>>{{"C", p.C},
                                                                         {"M", p.M},
                                                                         {"P", p.P},
                                                                         {"D", p.D},
                                                                         {"loss", p.loss},
                                                                         {"bpb", p.bpb},
                                                                         {"loss_annealed", p.loss_annealed},
                                                                         {"batch_tokens", p.batch_tokens},
                                                                         {"eta_base", p.eta_base},
                                                                         {"beta2", p.beta2}}) {
        csv += k + "," + csv_num(v) + "\n";
    }
    ctx.emit(std::move(r), csv);
}

// ---- validate-runs -------------------------------------------------------

void cmd_validate_runs(Context& ctx, const RunsArgs& a) {
    const std::vector<RunRecord> runs = ctx.read_runs(a.path, a.format, a.manifest);
    std::size_t points = 0;
    std::map<std::string, std::size_t> models;
    for (const RunRecord& r : runs) {
        points += r.points.size();
        ++models[r.model.name];
    }
    ordered_json r;
    r["valid"] = true;
    r["n_runs"] = runs.size();
    r["n_points"] = points;
    r["models"] = models;
    std::string csv = "model,runs\n";
    for (const auto& [m, n] : models) {
        csv += m + "," + std::to_string(n) + "\n";
    }
    ctx.emit(std::move(r), csv);
}

void add_runs_options(CLI::App* sub, RunsArgs& a, bool required = true) {
    auto* opt = sub->add_option("--runs", a.path, "runs file (JSONL or CSV table)");
    if (required) {
        opt->required();
    }
    sub->add_option("--runs-format", a.format, "jsonl or csv")->check(CLI::IsMember({"jsonl", "csv"}));
    sub->add_option("--manifest", a.manifest, "JSONL manifest for CSV runs");
    sub->add_option("--noise-b", a.noise_b, "keep only runs with this noise shift");
}

} // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Discrete diffusion ELBO, sampling and scaling-law toolkit", "gidd"};
    app.require_subcommand(1, 1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "random seed");
    app.add_option("--out", g.out, "output file (default: $GIDD_OUT_DIR/<command>.<ext> or stdout)");
    app.add_option("--format", g.format, "json or csv")->check(CLI::IsMember({"json", "csv"}));
    app.add_option("--plot", g.plot, "write an SVG figure to this path");

    ElboArgs elbo;
    auto* s_elbo = app.add_subcommand("elbo", "NELBO of a dataset under a denoiser");
    s_elbo->add_option("--data", elbo.data, "dataset JSON")->required();
    s_elbo->add_option("--noise", elbo.noise, "masked, low-uniform, balanced, high-uniform or uniform");
    s_elbo->add_option("--denoiser", elbo.denoiser, "oracle, posterior, uniform, marginals or tabular");
    s_elbo->add_option("--checkpoint", elbo.checkpoint, "tabular checkpoint");
    s_elbo->add_option("--estimator", elbo.estimator, "quadrature or mc");
    s_elbo->add_option("--samples", elbo.samples, "Monte Carlo samples per sequence");
    s_elbo->add_option("--grid", elbo.grid, "quadrature grid points");
    s_elbo->add_option("--proposal", elbo.proposal, "Monte Carlo log-SNR proposal: linear or uniform");

    SampleArgs sample;
    auto* s_sample = app.add_subcommand("sample", "ancestral or adaptive sampling");
    s_sample->add_option("--data", sample.data, "dataset JSON (defines the oracle)")->required();
    s_sample->add_option("--noise", sample.noise, "noise type");
    s_sample->add_option("--denoiser", sample.denoiser, "oracle, posterior, uniform, marginals or tabular");
    s_sample->add_option("--checkpoint", sample.checkpoint, "tabular checkpoint");
    s_sample->add_option("--mode", sample.mode, "ancestral or adaptive");
    s_sample->add_option("--schedule", sample.schedule, "ancestral schedule: time or lambda");
    s_sample->add_option("--steps", sample.steps, "denoising steps T");
    s_sample->add_option("--n", sample.n, "number of samples");
    s_sample->add_option("--k", sample.k, "adaptive: positions committed per step");
    s_sample->add_option("--length", sample.length, "sequence length (default: dataset length)");
    s_sample->add_option("--trace", sample.trace, "write the first trajectory as JSONL");

    TrainArgs train;
    auto* s_train = app.add_subcommand("train-toy", "train tabular denoisers over a size x batch grid");
    s_train->add_option("--data", train.data, "dataset JSON")->required();
    s_train->add_option("--noise", train.noise, "noise type");
    s_train->add_option("--buckets", train.buckets, "log-SNR bucket counts (model sizes)")->delimiter(',');
    s_train->add_option("--batch-sizes", train.batch_sizes, "batch sizes in sequences")->delimiter(',');
    s_train->add_option("--lrs", train.lrs, "learning rates")->delimiter(',');
    s_train->add_option("--steps", train.steps, "optimizer steps per run");
    s_train->add_option("--eval-every", train.eval_every, "steps between NELBO evaluations");
    s_train->add_option("--warmup", train.warmup, "linear warmup steps");
    s_train->add_option("--grid", train.grid, "quadrature grid for evaluation");
    s_train->add_option("--forcing", train.forcing, "fraction of samples with per-token noise levels");
    s_train->add_option("--prompt", train.prompt, "fraction of samples with a clean prompt");
    s_train->add_option("--empty-max", train.empty_max, "maximum fraction of appended empty tokens");
    s_train->add_option("--runs-out", train.runs_out, "runs output (default: $GIDD_OUT_DIR/toy_runs.jsonl)");
    s_train->add_option("--runs-format", train.runs_format, "jsonl or csv")->check(CLI::IsMember({"jsonl", "csv"}));

    ScalingArgs scaling;
    auto* s_scaling = app.add_subcommand("fit-scaling", "compute-optimal laws from iso-FLOP profiles");
    add_runs_options(s_scaling, scaling.runs);
    s_scaling->add_option("--method", scaling.method, "FLOP method: 1 (6P + 12LdN) or 2 (6P)");
    s_scaling->add_option("--smoothing", scaling.smoothing, "raw or sq_fit");
    s_scaling->add_option("--targets", scaling.targets, "target FLOPs")->delimiter(',');
    s_scaling->add_option("--n-targets", scaling.n_targets, "automatic target count");
    s_scaling->add_option("--window", scaling.window, "points in the local curve fit");
    s_scaling->add_flag("--linear-loss", scaling.linear_loss, "read curves in (log C, loss)");
    s_scaling->add_option("--parabola-window", scaling.parabola_window, "sizes in the parabola fit");
    s_scaling->add_option("--bootstrap", scaling.bootstrap, "bootstrap resamples (0 = none)");
    s_scaling->add_option("--ci", scaling.ci, "2sigma, 95 or 99");

    HparamArgs hparams;
    auto* s_hparams = app.add_subcommand("fit-hparams", "optimal batch-size and learning-rate laws");
    add_runs_options(s_hparams, hparams.runs);
    s_hparams->add_option("--losses", hparams.losses, "target loss levels")->delimiter(',');
    s_hparams->add_option("--n-levels", hparams.n_levels, "automatic loss level count");
    s_hparams->add_option("--level", hparams.level, "confidence level of the slope intervals");
    s_hparams->add_flag("--hyperbolas", hparams.hyperbolas, "also fit iso-loss hyperbolas");

    HyperbolaArgs hyper;
    auto* s_hyper = app.add_subcommand("fit-hyperbola", "fit the iso-loss batch/steps hyperbola");
    s_hyper->add_option("--input", hyper.input, "CSV with batch,steps rows");
    add_runs_options(s_hyper, hyper.runs, false);
    s_hyper->add_option("--model", hyper.model, "model name when reading runs");
    s_hyper->add_option("--loss", hyper.loss, "target loss");
    s_hyper->add_option("--unit", hyper.unit, "batch unit label");

    PlanArgs plan;
    auto* s_plan = app.add_subcommand("plan", "plan a training run for a FLOP budget");
    s_plan->add_option("--flops", plan.flops, "compute budget C")->required();
    s_plan->add_option("--noise", plan.noise, "noise type in the laws file");
    s_plan->add_option("--laws", plan.laws, "laws JSON (repeatable; earlier files win)")->required();
    s_plan->add_option("--method", plan.method, "FLOP method: 1 or 2");
    s_plan->add_option("--smoothing", plan.smoothing, "raw or sq_fit");
    s_plan->add_option("--seq-len", plan.seq_len, "sequence length N");

    RunsArgs validate;
    auto* s_validate = app.add_subcommand("validate-runs", "lint a runs file");
    add_runs_options(s_validate, validate);

    std::vector<std::string> argv_store{"gidd"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (std::string& s : argv_store) {
        argv.push_back(s.data());
    }
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n" << app.help();
        return kExitUsage;
    }

    CLI::App* sub = app.get_subcommands().front();
    Context ctx(g, sub->get_name(), out, err);
    try {
        if (sub == s_elbo) {
            cmd_elbo(ctx, elbo);
        } else if (sub == s_sample) {
            cmd_sample(ctx, sample);
        } else if (sub == s_train) {
            cmd_train_toy(ctx, train);
        } else if (sub == s_scaling) {
            cmd_fit_scaling(ctx, scaling);
        } else if (sub == s_hparams) {
            cmd_fit_hparams(ctx, hparams);
        } else if (sub == s_hyper) {
            cmd_fit_hyperbola(ctx, hyper);
        } else if (sub == s_plan) {
            cmd_plan(ctx, plan);
        } else if (sub == s_validate) {
            cmd_validate_runs(ctx, validate);
        }
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const ValidationError& e) {
        err << "validation error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const RangeError& e) {
        err << "invalid argument: " << e.what() << '\n';
        return kExitValidation;
    }
    return kExitOk;
}

} // namespace gidd
