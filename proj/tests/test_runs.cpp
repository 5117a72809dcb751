#include "gidd/error.hpp"
#include "gidd/rng.hpp"
#include "gidd/runs.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace gidd;

namespace {

const ModelSpec& shape(std::string_view name) {
    for (const ModelSpec& m : reference_shapes()) {
        if (m.name == name) {
            return m;
        }
    }
    throw std::logic_error("unknown shape");
}

RunRecord make_run(const std::string& id, long batch, double lr, std::initializer_list<double> losses) {
    RunRecord r;
    r.run_id = id;
    r.model = shape("L8-D512");
    r.batch_size_seqs = batch;
    r.lr_base = lr;
    long step = 0;
    for (double l : losses) {
        step += 100;
        r.points.push_back({step, r.tokens_per_step() * static_cast<double>(step), l, std::nullopt});
    }
    return r;
}

RunRecord random_run(Rng& rng, int k) {
    RunRecord r;
    r.run_id = "run-" + std::to_string(k);
    r.model.name = "m" + std::to_string(rng.index(5));
    r.model.layers = 1 + static_cast<long>(rng.index(40));
    r.model.hidden = 64 * (1 + static_cast<long>(rng.index(30)));
    r.model.heads = 1 + static_cast<long>(rng.index(16));
    r.model.seq_len = static_cast<long>(rng.index(4096));
    r.model.params = std::exp(10.0 + 10.0 * rng.uniform());
    r.model.vocab_size = 2 + static_cast<long>(rng.index(200000));
    r.noise_b = -5.0 + 10.0 * rng.uniform();
    r.batch_size_seqs = 1 + static_cast<long>(rng.index(1024));
    r.lr_base = std::exp(-12.0 + 10.0 * rng.uniform());
    r.annealed = rng.uniform() < 0.5;
    long step = 0;
    const std::size_t n = rng.index(20);
    for (std::size_t i = 0; i < n; ++i) {
        step += 1 + static_cast<long>(rng.index(1000));
        CurvePoint p{step, r.tokens_per_step() * static_cast<double>(step), 0.5 + 5.0 * rng.uniform(),
                     std::nullopt};
        if (rng.uniform() < 0.5) {
            p.surrogate = -1.0 + 8.0 * rng.uniform();
        }
        r.points.push_back(p);
    }
    return r;
}

void check_same(const RunRecord& a, const RunRecord& b) {
    CHECK(a.run_id == b.run_id);
    CHECK(a.model.name == b.model.name);
    CHECK(a.model.layers == b.model.layers);
    CHECK(a.model.hidden == b.model.hidden);
    CHECK(a.model.heads == b.model.heads);
    CHECK(a.model.seq_len == b.model.seq_len);
    CHECK(a.model.params == b.model.params);
    CHECK(a.model.vocab_size == b.model.vocab_size);
    CHECK(a.noise_b == b.noise_b);
    CHECK(a.batch_size_seqs == b.batch_size_seqs);
    CHECK(a.lr_base == b.lr_base);
    CHECK(a.annealed == b.annealed);
    REQUIRE(a.points.size() == b.points.size());
    for (std::size_t i = 0; i < a.points.size(); ++i) {
        CHECK(a.points[i].step == b.points[i].step);
        CHECK(a.points[i].tokens == b.points[i].tokens);
        CHECK(a.points[i].loss == b.points[i].loss);
        CHECK(a.points[i].surrogate == b.points[i].surrogate);
    }
}

} // namespace

TEST_CASE("flops per token") {
    const ModelSpec& m = shape("L8-D512");
    CHECK(flops_per_token(m, FlopMethod::method1) == 251863296.0);
    CHECK(flops_per_token(m, FlopMethod::method2) == 151200000.0);
    ModelSpec flat = m;
    flat.seq_len = 0;
    CHECK(flops_per_token(flat, FlopMethod::method1) == flops_per_token(flat, FlopMethod::method2));
    for (const ModelSpec& s : reference_shapes()) {
        CHECK(flops_per_token(s, FlopMethod::method1) >= flops_per_token(s, FlopMethod::method2));
        CHECK(flops_per_token(s, FlopMethod::method1) ==
              6.0 * s.params + 12.0 * static_cast<double>(s.layers * s.hidden * s.seq_len));
    }
    CHECK(parse_flop_method("method2") == FlopMethod::method2);
    CHECK(parse_flop_method("1") == FlopMethod::method1);
    CHECK_THROWS_AS(parse_flop_method("3"), RangeError);
}

TEST_CASE("cumulative flops") {
    RunRecord r = make_run("a", 64, 1e-3, {3.0});
    r.points = {{1000, 64.0 * 2048 * 1000, 3.0, std::nullopt}};
    CHECK(cumulative_flops(r, 0, FlopMethod::method1) == 0.0);
    const double c = cumulative_flops(r, 1000, FlopMethod::method1);
    CHECK(c == 251863296.0 * 64 * 2048 * 1000);
    CHECK(c == doctest::Approx(3.30e16).epsilon(0.002));
    RunRecord big = r;
    big.batch_size_seqs = 128;
    CHECK(cumulative_flops(big, 1000, FlopMethod::method1) == 2.0 * c);
}

TEST_CASE("JSONL round trip of random records") {
    Rng rng(123);
    std::vector<RunRecord> runs;
    for (int k = 0; k < 100; ++k) {
        runs.push_back(random_run(rng, k));
    }
    std::stringstream ss;
    write_runs_jsonl(ss, runs);
    const auto back = load_runs_jsonl(ss);
    REQUIRE(back.size() == runs.size());
    for (std::size_t k = 0; k < runs.size(); ++k) {
        check_same(runs[k], back[k]);
    }

    std::stringstream table;
    std::stringstream manifest;
    write_runs_csv(table, manifest, runs);
    const auto csv = load_runs_csv(table, manifest);
    REQUIRE(csv.size() == runs.size());
    for (std::size_t k = 0; k < runs.size(); ++k) {
        check_same(runs[k], csv[k]);
    }
}

TEST_CASE("format_double is the shortest round-tripping form") {
    CHECK(format_double(0.1) == "0.1");
    CHECK(format_double(3.0) == "3");
    Rng rng(9);
    for (int k = 0; k < 1000; ++k) {
        const double v = std::exp(-30.0 + 60.0 * rng.uniform()) * (rng.uniform() < 0.5 ? -1 : 1);
        CHECK(std::stod(format_double(v)) == v);
    }
}

TEST_CASE("loader errors name the line") {
    std::stringstream empty;
    CHECK(load_runs_jsonl(empty).empty());

    RunRecord bad = make_run("bad", 8, 1e-3, {3.0, 2.9, 2.8});
    bad.points[2].step = 150;
    bad.points[2].tokens = bad.tokens_per_step() * 150;
    std::stringstream ss;
    write_runs_jsonl(ss, {make_run("ok", 8, 1e-3, {3.0})});
    ss << '\n';
    write_runs_jsonl(ss, {bad});
    try {
        load_runs_jsonl(ss);
        FAIL("expected a validation error");
    } catch (const ValidationError& e) {
        CHECK(e.line() == 3);
        CHECK(std::string(e.what()).find("line 3") == 0);
    }

    std::stringstream dup;
    write_runs_jsonl(dup, {make_run("x", 8, 1e-3, {3.0}), make_run("y", 8, 1e-3, {2.0})});
    try {
        load_runs_jsonl(dup);
        FAIL("expected a duplicate-key error");
    } catch (const ValidationError& e) {
        CHECK(e.line() == 2);
        CHECK(std::string(e.what()).find("duplicate") != std::string::npos);
    }

    std::stringstream junk("{\"schema_version\": 1, \"run_id\": \"a\"\n");
    CHECK_THROWS_AS(load_runs_jsonl(junk), ValidationError);
    std::stringstream version(R"({"schema_version": 2})");
    CHECK_THROWS_AS(load_runs_jsonl(version), ValidationError);

    RunRecord tokens = make_run("t", 8, 1e-3, {3.0});
    tokens.points[0].tokens += 1000.0;
    CHECK_THROWS_AS(tokens.validate(), ValidationError);
    RunRecord loss = make_run("l", 8, 1e-3, {-1.0});
    CHECK_THROWS_AS(loss.validate(), ValidationError);
}

TEST_CASE("CSV table joined with a manifest") {
    RunRecord r = make_run("r1", 4, 2e-3, {});
    r.model.seq_len = 2;
    std::stringstream manifest;
    write_runs_jsonl(manifest, {r});
    std::stringstream table("run_id,step,tokens,loss\nr1,10,80,1.5\nr1,20,160,1.25\n");
    const auto runs = load_runs_csv(table, manifest);
    REQUIRE(runs.size() == 1);
    REQUIRE(runs[0].points.size() == 2);
    CHECK(runs[0].points[1].loss == 1.25);
    CHECK(runs[0].points[1].tokens == 160.0);

    std::stringstream manifest2;
    write_runs_jsonl(manifest2, {r});
    std::stringstream unknown("run_id,step,tokens,loss\nr2,10,80,1.5\n");
    CHECK_THROWS_AS(load_runs_csv(unknown, manifest2), ValidationError);
    std::stringstream manifest3;
    write_runs_jsonl(manifest3, {r});
    std::stringstream garbage("run_id,step,tokens,loss\nr1,ten,80,1.5\n");
    try {
        load_runs_csv(garbage, manifest3);
        FAIL("expected a parse error");
    } catch (const ValidationError& e) {
        CHECK(e.line() == 2);
    }
}
