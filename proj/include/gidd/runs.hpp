#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace gidd {

struct ModelSpec {
    std::string name;
    long layers = 0;
    long hidden = 0;
    long heads = 0;
    long seq_len = 0;
    double params = 0.0;  // non-embedding parameters
    long vocab_size = 0;

    void validate() const;
};

// The five transformer shapes of the reference scaling grid (N = 2048).
const std::vector<ModelSpec>& reference_shapes();

enum class FlopMethod { method1, method2 };

std::string_view flop_method_name(FlopMethod m);
FlopMethod parse_flop_method(std::string_view name);

// method1: 6P + 12 L d N, method2: 6P.
double flops_per_token(const ModelSpec& model, FlopMethod method);

struct CurvePoint {
    long step = 0;
    double tokens = 0.0;
    double loss = 0.0;  // validation NELBO, nats per token
    std::optional<double> surrogate;
};

using LossCurve = std::vector<CurvePoint>;

inline constexpr int kRunsSchemaVersion = 1;

struct RunRecord {
    std::string run_id;
    ModelSpec model;
    double noise_b = 0.0;
    long batch_size_seqs = 0;
    double lr_base = 0.0;
    bool annealed = false;
    LossCurve points;

    double tokens_per_step() const {
        return static_cast<double>(batch_size_seqs) * static_cast<double>(model.seq_len);
    }

    // Throws ValidationError (line -1) on the first broken invariant.
    void validate() const;
};

double cumulative_flops(const RunRecord& run, long at_step, FlopMethod method);

enum class RunsFormat { jsonl, csv };

RunsFormat parse_runs_format(std::string_view name);

// JSONL: one run per line. CSV: a flat (run_id, step, tokens, loss[, surrogate])
// table whose run metadata comes from a JSONL manifest with empty "points".
std::vector<RunRecord> load_runs_jsonl(std::istream& in);
std::vector<RunRecord> load_runs_csv(std::istream& table, std::istream& manifest);

std::vector<RunRecord> load_runs(const std::string& path, RunsFormat format,
                                 const std::string& manifest_path = {});

void write_runs_jsonl(std::ostream& out, const std::vector<RunRecord>& runs);
void write_runs_csv(std::ostream& table, std::ostream& manifest, const std::vector<RunRecord>& runs);

// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

} // namespace gidd
