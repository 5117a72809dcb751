#include "gidd/runs.hpp"

#include "gidd/error.hpp"

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

namespace gidd {

using nlohmann::json;

void ModelSpec::validate() const {
    if (layers <= 0 || hidden <= 0 || heads <= 0 || vocab_size <= 0) {
        throw ValidationError("model '" + name + "': layers, hidden, heads and vocab_size must be positive");
    }
    if (seq_len < 0) {
        throw ValidationError("model '" + name + "': seq_len must be non-negative");
    }
    if (!(params > 0.0) || !std::isfinite(params)) {
        throw ValidationError("model '" + name + "': params must be positive");
    }
}

const std::vector<ModelSpec>& reference_shapes() {
    static const std::vector<ModelSpec> shapes = {
        {"L8-D512", 8, 512, 8, 2048, 25.2e6, 131072},
        {"L10-D640", 10, 640, 10, 2048, 49.2e6, 131072},
        {"L12-D768", 12, 768, 12, 2048, 85.1e6, 131072},
        {"L16-D1024", 16, 1024, 16, 2048, 201.6e6, 131072},
        {"L20-D1536", 20, 1536, 12, 2048, 566.7e6, 131072},
    };
    return shapes;
}

std::string_view flop_method_name(FlopMethod m) {
    return m == FlopMethod::method1 ? "method1" : "method2";
}

FlopMethod parse_flop_method(std::string_view name) {
    if (name == "method1" || name == "1") {
        return FlopMethod::method1;
    }
    if (name == "method2" || name == "2") {
        return FlopMethod::method2;
    }
    throw RangeError("unknown FLOP method '" + std::string(name) + "'");
}

double flops_per_token(const ModelSpec& model, FlopMethod method) {
    const double base = 6.0 * model.params;
    if (method == FlopMethod::method2) {
        return base;
    }
    return base + 12.0 * static_cast<double>(model.layers) * static_cast<double>(model.hidden) *
                      static_cast<double>(model.seq_len);
}

void RunRecord::validate() const {
    const std::string who = "run '" + run_id + "': ";
    if (run_id.empty()) {
        throw ValidationError("run_id must be non-empty");
    }
    model.validate();
    if (batch_size_seqs <= 0) {
        throw ValidationError(who + "batch_size must be positive");
    }
    if (!(lr_base > 0.0) || !std::isfinite(lr_base)) {
        throw ValidationError(who + "lr_base must be positive");
    }
    if (!std::isfinite(noise_b)) {
        throw ValidationError(who + "noise_b must be finite");
    }
    const double per_step = tokens_per_step();
    for (std::size_t i = 0; i < points.size(); ++i) {
        const CurvePoint& p = points[i];
        const std::string at = who + "point " + std::to_string(i) + ": ";
        if (p.step < 0) {
            throw ValidationError(at + "negative step");
        }
        if (i > 0 && p.step <= points[i - 1].step) {
            throw ValidationError(at + "steps must be strictly increasing");
        }
        if (std::abs(p.tokens - static_cast<double>(p.step) * per_step) > 1.0) {
            throw ValidationError(at + "tokens must equal step * batch_size * seq_len");
        }
        if (!std::isfinite(p.loss) || !(p.loss > 0.0)) {
            throw ValidationError(at + "loss must be finite and positive");
        }
        if (p.surrogate && !std::isfinite(*p.surrogate)) {
            throw ValidationError(at + "surrogate loss must be finite");
        }
    }
}

double cumulative_flops(const RunRecord& run, long at_step, FlopMethod method) {
    const long last = run.points.empty() ? 0 : run.points.back().step;
    if (at_step < 0 || at_step > last) {
        throw RangeError("cumulative_flops: step " + std::to_string(at_step) + " outside the record");
    }
    return flops_per_token(run.model, method) * run.tokens_per_step() * static_cast<double>(at_step);
}

RunsFormat parse_runs_format(std::string_view name) {
    if (name == "jsonl") {
        return RunsFormat::jsonl;
    }
    if (name == "csv") {
        return RunsFormat::csv;
    }
    throw RangeError("unknown runs format '" + std::string(name) + "'");
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

namespace {

using RunKey = std::tuple<std::string, double, long, double, double>;

RunKey key_of(const RunRecord& r) {
    return {r.model.name, r.model.params, r.batch_size_seqs, r.lr_base, r.noise_b};
}

template <class T>
T field(const json& j, const char* name) {
    if (!j.contains(name)) {
        throw ValidationError(std::string("missing field '") + name + "'");
    }
    try {
        return j.at(name).get<T>();
    } catch (const json::exception&) {
        throw ValidationError(std::string("field '") + name + "' has the wrong type");
    }
}

RunRecord run_from_json(const json& j, bool allow_points) {
    if (!j.is_object()) {
        throw ValidationError("record is not a JSON object");
    }
    const int version = field<int>(j, "schema_version");
    if (version != kRunsSchemaVersion) {
        throw ValidationError("unsupported schema_version " + std::to_string(version));
    }
    RunRecord r;
    r.run_id = field<std::string>(j, "run_id");
    const json& m = j.contains("model") ? j.at("model") : throw ValidationError("missing field 'model'");
    r.model.name = field<std::string>(m, "name");
    r.model.layers = field<long>(m, "layers");
    r.model.hidden = field<long>(m, "hidden");
    r.model.heads = field<long>(m, "heads");
    r.model.seq_len = field<long>(m, "seq_len");
    r.model.params = field<double>(m, "params");
    r.model.vocab_size = field<long>(m, "vocab_size");
    r.noise_b = field<double>(j, "noise_b");
    r.batch_size_seqs = field<long>(j, "batch_size");
    r.lr_base = field<double>(j, "lr_base");
    r.annealed = j.value("annealed", false);
    if (j.contains("points")) {
        const json& pts = j.at("points");
        if (!pts.is_array()) {
            throw ValidationError("field 'points' must be an array");
        }
        if (!allow_points && !pts.empty()) {
            throw ValidationError("manifest records must not carry points");
        }
        for (const json& p : pts) {
            CurvePoint c;
            c.step = field<long>(p, "step");
            c.tokens = field<double>(p, "tokens");
            c.loss = field<double>(p, "loss");
            if (p.contains("surrogate") && !p.at("surrogate").is_null()) {
                c.surrogate = field<double>(p, "surrogate");
            }
            r.points.push_back(c);
        }
    } else if (allow_points) {
        throw ValidationError("missing field 'points'");
    }
    return r;
}

json run_to_json(const RunRecord& r, bool with_points) {
    json j;
    j["schema_version"] = kRunsSchemaVersion;
    j["run_id"] = r.run_id;
    j["model"] = {{"name", r.model.name},         {"layers", r.model.layers},
                  {"hidden", r.model.hidden},     {"heads", r.model.heads},
                  {"seq_len", r.model.seq_len},   {"params", r.model.params},
                  {"vocab_size", r.model.vocab_size}};
    j["noise_b"] = r.noise_b;
    j["batch_size"] = r.batch_size_seqs;
    j["lr_base"] = r.lr_base;
    j["annealed"] = r.annealed;
    json pts = json::array();
    if (with_points) {
        for (const CurvePoint& p : r.points) {
            json jp = {{"step", p.step}, {"tokens", p.tokens}, {"loss", p.loss}};
            if (p.surrogate) {
                jp["surrogate"] = *p.surrogate;
            }
            pts.push_back(std::move(jp));
        }
    }
    j["points"] = std::move(pts);
    return j;
}

bool blank(const std::string& line) {
    return line.find_first_not_of(" \t\r") == std::string::npos;
}

// Parses and validates one JSONL stream; line numbers are 1-based.
std::vector<std::pair<RunRecord, long>> parse_jsonl(std::istream& in, bool allow_points) {
    std::vector<std::pair<RunRecord, long>> out;
    std::string line;
    long lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (blank(line)) {
            continue;
        }
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ValidationError(std::string("malformed JSON: ") + e.what(), lineno);
        }
        try {
            out.emplace_back(run_from_json(j, allow_points), lineno);
        } catch (const ValidationError& e) {
            throw ValidationError(e.what(), lineno);
        }
    }
    return out;
}

double parse_number(const std::string& s, const char* what, long lineno) {
    double v = 0.0;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    const auto res = std::from_chars(first, last, v);
    if (res.ec != std::errc() || res.ptr != last) {
        throw ValidationError(std::string("cannot parse ") + what + " '" + s + "'", lineno);
    }
    return v;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) {
            cell.pop_back();
        }
        const auto start = cell.find_first_not_of(' ');
        cells.push_back(start == std::string::npos ? std::string() : cell.substr(start));
    }
    if (!line.empty() && line.back() == ',') {
        cells.emplace_back();
    }
    return cells;
}

void check_runs(const std::vector<std::pair<RunRecord, long>>& runs) {
    std::set<RunKey> seen;
    for (const auto& [run, lineno] : runs) {
        try {
            run.validate();
        } catch (const ValidationError& e) {
            throw ValidationError(e.what(), lineno);
        }
        if (!seen.insert(key_of(run)).second) {
            throw ValidationError("duplicate run key (model, batch_size, lr_base, noise_b) for run '" +
                                      run.run_id + "'",
                                  lineno);
        }
    }
}

std::vector<RunRecord> strip_lines(std::vector<std::pair<RunRecord, long>> runs) {
    std::vector<RunRecord> out;
    out.reserve(runs.size());
    for (auto& r : runs) {
        out.push_back(std::move(r.first));
    }
    return out;
}

} // namespace

std::vector<RunRecord> load_runs_jsonl(std::istream& in) {
    auto runs = parse_jsonl(in, true);
    check_runs(runs);
    return strip_lines(std::move(runs));
}

std::vector<RunRecord> load_runs_csv(std::istream& table, std::istream& manifest) {
    auto runs = parse_jsonl(manifest, false);
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        if (!index.emplace(runs[i].first.run_id, i).second) {
            throw ValidationError("duplicate run_id '" + runs[i].first.run_id + "' in manifest",
                                  runs[i].second);
        }
    }

    std::string line;
    long lineno = 0;
    bool header_seen = false;
    bool has_surrogate = false;
    while (std::getline(table, line)) {
        ++lineno;
        if (blank(line)) {
            continue;
        }
        const auto cells = split_csv(line);
        if (!header_seen) {
            header_seen = true;
            if (cells.size() < 4 || cells[0] != "run_id" || cells[1] != "step" || cells[2] != "tokens" ||
                cells[3] != "loss" || (cells.size() == 5 && cells[4] != "surrogate") || cells.size() > 5) {
                throw ValidationError("CSV header must be run_id,step,tokens,loss[,surrogate]", lineno);
            }
            has_surrogate = cells.size() == 5;
            continue;
        }
        if (cells.size() != (has_surrogate ? 5u : 4u)) {
            throw ValidationError("wrong number of CSV columns", lineno);
        }
        const auto it = index.find(cells[0]);
        if (it == index.end()) {
            throw ValidationError("run '" + cells[0] + "' is not in the manifest", lineno);
        }
        RunRecord& run = runs[it->second].first;
        CurvePoint p;
        const double step = parse_number(cells[1], "step", lineno);
        if (step != std::floor(step)) {
            throw ValidationError("step must be an integer", lineno);
        }
        p.step = static_cast<long>(step);
        p.tokens = parse_number(cells[2], "tokens", lineno);
        p.loss = parse_number(cells[3], "loss", lineno);
        if (has_surrogate && !cells[4].empty()) {
            p.surrogate = parse_number(cells[4], "surrogate", lineno);
        }
        if (!run.points.empty() && p.step <= run.points.back().step) {
            throw ValidationError("run '" + run.run_id + "': steps must be strictly increasing", lineno);
        }
        run.points.push_back(p);
        runs[it->second].second = lineno;
    }
    check_runs(runs);
    return strip_lines(std::move(runs));
}

std::vector<RunRecord> load_runs(const std::string& path, RunsFormat format, const std::string& manifest_path) {
    std::ifstream in(path);
    if (!in) {
        throw ValidationError("cannot open runs file '" + path + "'");
    }
    if (format == RunsFormat::jsonl) {
        return load_runs_jsonl(in);
    }
    if (manifest_path.empty()) {
        throw ValidationError("CSV runs need a manifest file");
    }
    std::ifstream manifest(manifest_path);
    if (!manifest) {
        throw ValidationError("cannot open manifest file '" + manifest_path + "'");
    }
    return load_runs_csv(in, manifest);
}

void write_runs_jsonl(std::ostream& out, const std::vector<RunRecord>& runs) {
    for (const RunRecord& r : runs) {
        out << run_to_json(r, true).dump() << '\n';
    }
}

void write_runs_csv(std::ostream& table, std::ostream& manifest, const std::vector<RunRecord>& runs) {
    bool any_surrogate = false;
    for (const RunRecord& r : runs) {
        for (const CurvePoint& p : r.points) {
            any_surrogate = any_surrogate || p.surrogate.has_value();
        }
    }
    table << "run_id,step,tokens,loss" << (any_surrogate ? ",surrogate" : "") << '\n';
    for (const RunRecord& r : runs) {
        if (r.run_id.find(',') != std::string::npos) {
            throw ValidationError("run_id '" + r.run_id + "' cannot contain a comma in CSV output");
        }
        manifest << run_to_json(r, false).dump() << '\n';
        for (const CurvePoint& p : r.points) {
            table << r.run_id << ',' << p.step << ',' << format_double(p.tokens) << ','
                  << format_double(p.loss);
            if (any_surrogate) {
                table << ',' << (p.surrogate ? format_double(*p.surrogate) : "");
            }
            table << '\n';
        }
    }
}

} // namespace gidd
