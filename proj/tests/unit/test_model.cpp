#include "helpers.hpp"

#include "kvprune/errors.hpp"
#include "kvprune/sensitivity.hpp"

#include <doctest.h>

#include <cmath>

using namespace kvprune;
using kvtest::tiny_model;

namespace {

double mean_loss(const Checkpoint & ck, const Batch & b) { return batch_nll(ck, std::span<const Batch>(&b, 1)).mean(); }

Checkpoint zero_model(const ModelConfig & cfg) {
    Checkpoint ck = init_checkpoint(cfg, 0);
    for_each_tensor(ck.weights, [](const std::string & name, Matrix & m) {
        if (name != "tok_emb" && name != "pos_emb" && name.find("norm") == std::string::npos) {
            m.fill(0.0);
        }
    });
    return ck;
}

} // namespace

TEST_CASE("config validation") {
    ModelConfig c = kvtest::tiny_config();
    CHECK_NOTHROW(c.validate());
    c.base_head_dim = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = kvtest::tiny_config();
    c.n_blocks = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("forward shape and sequence limit") {
    const Checkpoint ck = tiny_model();
    Rng rng(1);
    const auto toks = kvtest::random_tokens(3 * 5, rng);
    const Matrix logits = forward(ck, toks, 3, 5);
    CHECK(logits.rows() == 15);
    CHECK(logits.cols() == 256);
    CHECK(logits.all_finite());
    const auto long_toks = kvtest::random_tokens(17, rng);
    CHECK_THROWS_AS(forward(ck, long_toks, 1, 17), ConfigError);
    CHECK_THROWS_AS(forward(ck, toks, 2, 5), DimensionError);
}

TEST_CASE("zero head gives uniform predictions") {
    const Checkpoint ck = zero_model(kvtest::tiny_config());
    Rng rng(2);
    const Batch b = kvtest::random_batch_of(2, 8, rng);
    const Matrix logits = forward(ck, b);
    CHECK(max_abs_diff(logits, Matrix(16, 256)) == 0.0);
    CHECK(std::exp(mean_loss(ck, b)) == doctest::Approx(256.0).epsilon(1e-12));
}

TEST_CASE("zero Wv block equals ablated block") {
    Checkpoint ck = tiny_model(3);
    ck.weights.blocks[1].wv.fill(0.0);
    Rng rng(3);
    const Batch b = kvtest::random_batch_of(2, 12, rng);
    ForwardOptions ablate;
    ablate.ablate_attention = {false, true};
    CHECK(max_abs_diff(forward(ck, b), forward(ck, b, ablate)) <= 1e-12);
}

TEST_CASE("causality") {
    const Checkpoint ck = tiny_model(4);
    Rng rng(4);
    for (int trial = 0; trial < 5; ++trial) {
        auto toks = kvtest::random_tokens(16, rng);
        const Matrix base = forward(ck, toks, 1, 16);
        const size_t t = rng.below(15);
        auto changed = toks;
        for (size_t j = t + 1; j < 16; ++j) {
            changed[j] = (changed[j] + 1 + (int) rng.below(255)) % 256;
        }
        const Matrix other = forward(ck, changed, 1, 16);
        for (size_t r = 0; r <= t; ++r) {
            for (size_t c = 0; c < 256; ++c) {
                CHECK(std::abs(base(r, c) - other(r, c)) <= 1e-12);
            }
        }
    }
}

TEST_CASE("gradient shapes mirror weights and batch duplication is a no-op") {
    const Checkpoint ck = tiny_model(5);
    Rng rng(5);
    std::vector<Batch> one = {kvtest::random_batch_of(2, 8, rng), kvtest::random_batch_of(2, 8, rng)};
    const GradientSet g = loss_and_grads(ck, one);
    const auto w = tensor_ptrs(ck.weights);
    const auto gw = tensor_ptrs(g.grads);
    REQUIRE(w.size() == gw.size());
    for (size_t i = 0; i < w.size(); ++i) {
        CHECK(w[i]->rows() == gw[i]->rows());
        CHECK(w[i]->cols() == gw[i]->cols());
    }
    std::vector<Batch> twice = one;
    twice.insert(twice.end(), one.begin(), one.end());
    const GradientSet g2 = loss_and_grads(ck, twice);
    CHECK(g2.loss == doctest::Approx(g.loss).epsilon(1e-14));
    const auto gw2 = tensor_ptrs(g2.grads);
    for (size_t i = 0; i < gw.size(); ++i) {
        CHECK(max_abs_diff(*gw[i], *gw2[i]) <= 1e-14);
    }
    CHECK_THROWS_AS(loss_and_grads(ck, std::vector<Batch>{}), DataError);
}

TEST_CASE("gradients match central differences") {
    Checkpoint ck = tiny_model(6, kvtest::tiny_config(2, 8, 2, 8));
    Rng rng(6);
    const Batch b = kvtest::random_batch_of(2, 6, rng);
    const GradientSet g = loss_and_grads(ck, std::span<const Batch>(&b, 1));
    auto w = tensor_ptrs(ck.weights);
    const auto gw = tensor_ptrs(g.grads);
    const double h = 1e-5;
    for (size_t ti = 0; ti < w.size(); ++ti) {
        for (int s = 0; s < 5; ++s) {
            const size_t j = rng.below(w[ti]->size());
            double & x = w[ti]->values()[j];
            const double orig = x;
            x = orig + h;
            const double lp = mean_loss(ck, b);
            x = orig - h;
            const double lm = mean_loss(ck, b);
            x = orig;
            const double fd = (lp - lm) / (2 * h);
            CHECK(kvtest::rel_err(gw[ti]->values()[j], fd) <= 1e-4);
        }
    }
}

TEST_CASE("variable head widths match zero-padded full heads") {
    ModelConfig cfg = kvtest::tiny_config(2, 10, 2, 12);
    Checkpoint full = tiny_model(7, cfg);
    // zero channels 0 and 1 of head 0 in every block, then build a [3, 5] model without them
    Checkpoint narrow = full;
    for (size_t bi = 0; bi < cfg.n_blocks; ++bi) {
        auto & fb = full.weights.blocks[bi];
        auto & nb = narrow.weights.blocks[bi];
        for (size_t ch : {0, 1}) {
            for (size_t j = 0; j < cfg.d_model; ++j) {
                fb.wq(ch, j) = fb.wk(ch, j) = fb.wv(ch, j) = fb.wo(j, ch) = 0.0;
            }
        }
        nb.wq = Matrix(8, cfg.d_model);
        nb.wk = Matrix(8, cfg.d_model);
        nb.wv = Matrix(8, cfg.d_model);
        nb.wo = Matrix(cfg.d_model, 8);
        for (size_t ch = 2; ch < 10; ++ch) {
            for (size_t j = 0; j < cfg.d_model; ++j) {
                nb.wq(ch - 2, j) = fb.wq(ch, j);
                nb.wk(ch - 2, j) = fb.wk(ch, j);
                nb.wv(ch - 2, j) = fb.wv(ch, j);
                nb.wo(j, ch - 2) = fb.wo(j, ch);
            }
        }
        nb.channel_heads = {0, 0, 0, 1, 1, 1, 1, 1};
    }
    CHECK_NOTHROW(narrow.validate());
    Rng rng(7);
    const auto toks = kvtest::random_tokens(2 * 12, rng);
    CHECK(max_abs_diff(forward(full, toks, 2, 12), forward(narrow, toks, 2, 12)) <= 1e-10);
}

TEST_CASE("zero-channel heads contribute nothing") {
    ModelConfig cfg = kvtest::tiny_config(1, 8, 2, 8);
    Checkpoint ck = tiny_model(8, cfg);
    Checkpoint gone = ck;
    auto & b = gone.weights.blocks[0];
    // keep only head 1
    Matrix q(4, 8), k(4, 8), v(4, 8), o(8, 4);
    for (size_t ch = 4; ch < 8; ++ch) {
        for (size_t j = 0; j < 8; ++j) {
            q(ch - 4, j) = b.wq(ch, j);
            k(ch - 4, j) = b.wk(ch, j);
            v(ch - 4, j) = b.wv(ch, j);
            o(j, ch - 4) = b.wo(j, ch);
        }
    }
    b.wq = q;
    b.wk = k;
    b.wv = v;
    b.wo = o;
    b.channel_heads = {1, 1, 1, 1};
    CHECK(b.head_offsets(2) == std::vector<size_t>{0, 0, 4});
    auto & fb = ck.weights.blocks[0];
    for (size_t ch = 0; ch < 4; ++ch) {
        for (size_t j = 0; j < 8; ++j) {
            fb.wv(ch, j) = 0.0;
        }
    }
    Rng rng(8);
    const auto toks = kvtest::random_tokens(8, rng);
    CHECK(max_abs_diff(forward(ck, toks, 1, 8), forward(gone, toks, 1, 8)) <= 1e-12);
}

TEST_CASE("generation edge cases") {
    const Checkpoint ck = tiny_model(9);
    const std::vector<int> prompt = {1, 2, 3};
    CHECK(generate(ck, prompt, 0, false) == prompt);
    CHECK(generate(ck, prompt, 0, true) == prompt);
    CHECK_THROWS_AS(generate(ck, prompt, 14, false), ConfigError);
    CHECK_THROWS_AS(generate(ck, std::vector<int>{}, 1, true), ConfigError);
    const Checkpoint zero = zero_model(kvtest::tiny_config());
    for (bool cache : {false, true}) {
        const auto out = generate(zero, prompt, 5, cache);
        for (size_t i = 3; i < out.size(); ++i) {
            CHECK(out[i] == 0);
        }
    }
    CHECK(argmax_lowest(std::vector<double>{1.0, 3.0, 3.0}) == 1);
}

TEST_CASE("cached and uncached generation agree") {
    const Checkpoint base = tiny_model(10, kvtest::tiny_config(2, 16, 2, 32));
    Rng rng(10);
    for (int trial = 0; trial < 5; ++trial) {
        const size_t P = 1 + rng.below(10);
        std::vector<std::vector<int>> prompts(3, std::vector<int>(P));
        for (auto & p : prompts) {
            p = kvtest::random_tokens(P, rng);
        }
        CHECK(generate(base, prompts, 12, true) == generate(base, prompts, 12, false));
    }
}

TEST_CASE("training reduces loss, is deterministic, and lr 0 is identity") {
    const Corpus corpus = kvtest::bundled_corpus();
    const Checkpoint init = init_checkpoint(kvtest::tiny_config(1, 16, 2, 32), 3);
    TrainOptions opts;
    opts.steps = 200;
    opts.batch_size = 4;
    opts.seq_len = 32;
    opts.lr = 1e-2;
    std::vector<double> losses;
    opts.on_step = [&](size_t, double l) { losses.push_back(l); };
    const Checkpoint a = train(init, corpus, opts);
    REQUIRE(losses.size() == 200);
    CHECK(losses.back() < losses.front());
    CHECK(a.meta.steps == 200);
    CHECK(a.meta.final_loss == losses.back());
    opts.on_step = nullptr;
    const Checkpoint b = train(init, corpus, opts);
    const auto wa = tensor_ptrs(a.weights), wb = tensor_ptrs(b.weights);
    for (size_t i = 0; i < wa.size(); ++i) {
        CHECK(*wa[i] == *wb[i]);
    }
    opts.lr = 0.0;
    opts.steps = 5;
    const Checkpoint z = train(init, corpus, opts);
    const auto wi = tensor_ptrs(init.weights), wz = tensor_ptrs(z.weights);
    for (size_t i = 0; i < wi.size(); ++i) {
        CHECK(*wi[i] == *wz[i]);
    }
    opts.steps = 0;
    CHECK_THROWS_AS(train(init, corpus, opts), ConfigError);
}

TEST_CASE("diverging training names the step") {
    const Corpus corpus = kvtest::bundled_corpus();
    Checkpoint init = init_checkpoint(kvtest::tiny_config(1, 16, 2, 32), 3);
    init.weights.head(0, 0) = std::numeric_limits<double>::quiet_NaN();
    TrainOptions opts;
    opts.steps = 3;
    opts.batch_size = 2;
    opts.seq_len = 16;
    try {
        train(init, corpus, opts);
        FAIL("expected TrainingError");
    } catch (const TrainingError & e) {
        CHECK(std::string(e.what()).find("step 1") != std::string::npos);
        CHECK(e.exit_code() == 3);
    }
}
