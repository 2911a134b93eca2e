#include "helpers.hpp"

#include "kvprune/bench.hpp"
#include "kvprune/checkpoint_io.hpp"
#include "kvprune/errors.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

using namespace kvprune;

namespace {

// Attention and FFN write nothing; next-token logits depend only on the current token.
Checkpoint embedding_only(const ModelConfig & cfg) {
    Checkpoint ck = init_checkpoint(cfg, 0);
    for (auto & b : ck.weights.blocks) {
        b.wo.fill(0.0);
        b.w_down.fill(0.0);
    }
    ck.weights.pos_emb.fill(0.0);
    return ck;
}

GridConfig small_grid() {
    GridConfig g;
    g.screening_batches = 2;
    g.calibration_batches = 2;
    g.calibration_batch_size = 2;
    g.seq_len = 16;
    g.eval_seq_len = 16;
    g.eval_batch_size = 16;
    g.adapter.rank = 2;
    g.recover.steps = 20;
    g.recover.lr = 1e-2;
    g.recover.batch_size = 4;
    g.recover.seq_len = 16;
    return g;
}

std::string slurp(const std::filesystem::path & p) { return read_file(p.string()); }

} // namespace

TEST_CASE("throughput") {
    CHECK(throughput_of(2, 100, 4.0) == 50.0);
}

TEST_CASE("warmup generations are not timed") {
    const Checkpoint ck = kvtest::tiny_model(1, kvtest::tiny_config(2, 16, 2, 32));
    GenerationConfig g;
    g.batch = 2;
    g.prompt_len = 4;
    g.output_len = 6;
    for (size_t warmup : {0, 1, 7}) {
        g.warmup = warmup;
        FakeClock clock(2.5);
        const auto t = measure_generation(ck, g, clock);
        CHECK(t.seconds == 2.5);
        CHECK(t.throughput == doctest::Approx(12.0 / 2.5));
    }
    FakeClock clock;
    g.output_len = 40;
    CHECK_THROWS_AS(measure_generation(ck, g, clock), ConfigError);
    g.output_len = 0;
    CHECK_THROWS_AS(measure_generation(ck, g, clock), ConfigError);
}

TEST_CASE("steady clock moves forward") {
    SteadyClock c;
    const double a = c.now();
    CHECK(c.now() >= a);
}

TEST_CASE("eval perplexity of a uniform model is the vocabulary size") {
    Checkpoint ck = init_checkpoint(kvtest::tiny_config(), 0);
    ck.weights.head.fill(0.0);
    const Corpus corpus = kvtest::bundled_corpus(0);
    CHECK(std::abs(eval_ppl(ck, corpus, Split::eval, 16, 8) - 256.0) <= 1e-9);
}

TEST_CASE("eval perplexity of a certain model is one") {
    ModelConfig cfg = kvtest::tiny_config(2, 16, 2, 16);
    Checkpoint ck = embedding_only(cfg);
    ck.weights.tok_emb.fill(0.0);
    ck.weights.final_norm.fill(1.0);
    ck.weights.tok_emb('a', 0) = 1.0;
    ck.weights.head.fill(0.0);
    ck.weights.head('a', 0) = 100.0;
    const Corpus corpus = make_corpus("a", encode(std::string(400, 'a')), {0.5, 0.25, 0.25}, 0);
    CHECK(std::abs(eval_ppl(ck, corpus, Split::eval, 16, 2) - 1.0) <= 1e-12);
}

TEST_CASE("eval perplexity matches an unbatched oracle and ignores batch size") {
    const Checkpoint ck = kvtest::tiny_model(2, kvtest::tiny_config(2, 16, 2, 16));
    const Corpus corpus = kvtest::bundled_corpus(2);
    const auto & r = corpus.eval;
    double total = 0.0;
    size_t count = 0;
    for (size_t start = r.begin; start + 17 <= r.end; start += 16) {
        std::vector<int> in(corpus.tokens.begin() + (ptrdiff_t) start, corpus.tokens.begin() + (ptrdiff_t) start + 16);
        const Matrix logits = forward(ck, in, 1, 16);
        for (size_t t = 0; t < 16; ++t) {
            auto row = logits.row(t);
            double m = row[0];
            for (double v : row) {
                m = std::max(m, v);
            }
            double z = 0.0;
            for (double v : row) {
                z += std::exp(v - m);
            }
            total += -(row[(size_t) corpus.tokens[start + t + 1]] - m - std::log(z));
            ++count;
        }
    }
    const double oracle = std::exp(total / (double) count);
    for (size_t bs : {1, 3, 8, 64}) {
        CHECK(kvtest::rel_err(eval_ppl(ck, corpus, Split::eval, 16, bs), oracle) <= 1e-9);
    }
}

TEST_CASE("eval on a split too short to score is a data error") {
    const Checkpoint ck = kvtest::tiny_model(3);
    const Corpus corpus = make_corpus("short", encode(std::string(100, 'x')), {0.9, 0.05, 0.05}, 0);
    CHECK_THROWS_AS(eval_ppl(ck, corpus, Split::eval, 16, 4), DataError);
}

TEST_CASE("bench report JSON round-trip") {
    BenchReport r;
    r.model_id = "pruned";
    r.model_hash = "0123456789abcdef";
    r.eval_corpus = "alice";
    r.eval_ppl = 5.25;
    r.second_ppl = 9.5;
    r.second_corpus = "constitution";
    r.kv_bytes = 1234;
    r.parameters = 99;
    r.run.batch = 2;
    r.latency_s = 0.125;
    r.throughput = 512.0;
    r.environment = "test";
    const auto j = to_json(r);
    CHECK(j.contains("throughput_tokens_per_s"));
    CHECK(to_json(bench_report_from_json(j)).dump() == j.dump());
    r.second_ppl.reset();
    CHECK(to_json(r)["second_ppl"].is_null());
    CHECK(!bench_report_from_json(to_json(r)).second_ppl);
    CHECK_THROWS_AS(bench_report_from_json(ojson{{"model_id", 3}}), SchemaError);
    const std::string csv = bench_csv(r);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
}

TEST_CASE("ablation grid shape and reproducible output") {
    const Checkpoint ck = kvtest::tiny_model(4, kvtest::tiny_config(3, 16, 2, 32));
    const Corpus corpus = kvtest::bundled_corpus(4);
    const GridConfig cfg = small_grid();
    FakeClock c1(0.0), c2(0.0);
    const AblationGrid g1 = run_ablation_grid(ck, corpus, cfg, 11, &c1);
    const AblationGrid g2 = run_ablation_grid(ck, corpus, cfg, 11, &c2);
    REQUIRE(g1.cells.size() == 16);
    for (const auto & c : g1.cells) {
        CHECK(c.error.empty());
        CHECK(c.ratios.size() == 3);
        CHECK(c.kv_bytes < g1.base_kv_bytes);
        CHECK(std::isfinite(c.recovered_ppl));
        CHECK(c.recover_loss_tail <= c.recover_loss_first);
    }
    const GridCell * cell = g1.find("ppl-based", "taylor", 0.5);
    REQUIRE(cell != nullptr);
    CHECK(cell->p_total == 0.5);
    CHECK(g1.find("ppl-based", "taylor", 0.3) == nullptr);

    const std::string csv = grid_csv(g1);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 17);

    const auto root = std::filesystem::temp_directory_path() / "kvprune_grid_test";
    std::filesystem::remove_all(root);
    emit_grid(g1, (root / "a").string());
    emit_grid(g2, (root / "b").string());
    for (const char * f : {"grid.json", "grid.csv", "sensitivity.json"}) {
        CHECK(slurp(root / "a" / f) == slurp(root / "b" / f));
    }
    const auto j = ojson::parse(slurp(root / "a" / "grid.json"));
    CHECK(j["cells"].size() == 16);
    std::filesystem::remove_all(root);
}

TEST_CASE("a failing cell records its error and the grid continues") {
    const Checkpoint ck = kvtest::tiny_model(5, kvtest::tiny_config(2, 16, 2, 32));
    const Corpus corpus = kvtest::bundled_corpus(5);
    GridConfig cfg = small_grid();
    cfg.p_totals = {0.2};
    cfg.methods = {"l1", "bogus"};
    FakeClock clock(0.0);
    const auto g = run_ablation_grid(ck, corpus, cfg, 1, &clock);
    REQUIRE(g.cells.size() == 4);
    CHECK(g.find("uniform", "l1", 0.2)->error.empty());
    CHECK(!g.find("uniform", "bogus", 0.2)->error.empty());
}
