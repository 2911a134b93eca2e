#include "helpers.hpp"

#include "kvprune/errors.hpp"
#include "kvprune/sensitivity.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace kvprune;

namespace {

std::vector<Batch> screening(size_t n, uint64_t seed) {
    Rng rng(seed);
    std::vector<Batch> out;
    for (size_t i = 0; i < n; ++i) {
        out.push_back(kvtest::random_batch_of(2, 12, rng));
    }
    return out;
}

double sum_of(const std::vector<double> & v) { return std::accumulate(v.begin(), v.end(), 0.0); }

} // namespace

TEST_CASE("ascending ranks break ties toward the lower index") {
    CHECK(ascending_ranks(std::vector<double>{5, 1, 1, 9}) == std::vector<size_t>{3, 1, 2, 4});
    CHECK(ascending_ranks(std::vector<double>{}).empty());
}

TEST_CASE("zero Wv block has exactly zero sensitivity") {
    Checkpoint ck = kvtest::tiny_model(2, kvtest::tiny_config(3));
    ck.weights.blocks[1].wv.fill(0.0);
    const auto bs = screening(2, 1);
    const SensitivityReport r = measure_block_sensitivity(ck, bs);
    REQUIRE(r.n_blocks() == 3);
    CHECK(r.blocks[1].delta_ppl == 0.0);
    CHECK(r.blocks[0].delta_ppl != 0.0);
    CHECK(r.screening_batches == 2);
    CHECK_THROWS_AS(measure_block_sensitivity(ck, std::vector<Batch>{}), DataError);
}

TEST_CASE("sensitivity matches a weight-zeroing oracle") {
    const Checkpoint ck = kvtest::tiny_model(3, kvtest::tiny_config(4));
    const auto bs = screening(3, 2);
    const SensitivityReport r = measure_block_sensitivity(ck, bs);
    const double base = std::exp(batch_nll(ck, bs).mean());
    CHECK(r.base_ppl == doctest::Approx(base).epsilon(1e-14));
    for (size_t i = 0; i < 4; ++i) {
        Checkpoint z = ck;
        z.weights.blocks[i].wv.fill(0.0);
        z.weights.blocks[i].wo.fill(0.0);
        const double oracle = std::exp(batch_nll(z, bs).mean()) - base;
        CHECK(std::abs(r.blocks[i].delta_ppl - oracle) <= 1e-10);
    }
    // ranks are a permutation ordered by delta
    std::vector<size_t> ranks;
    for (const auto & b : r.blocks) {
        ranks.push_back(b.rank);
    }
    CHECK(ranks == ascending_ranks(r.deltas()));
}

TEST_CASE("uniform allocator") {
    CHECK(allocate_uniform(0.2, 4).ratios == std::vector<double>(4, 0.2));
    CHECK(allocate_uniform(0.0, 3).ratios == std::vector<double>(3, 0.0));
    CHECK(allocate_uniform(1.0, 3).ratios == std::vector<double>(3, 1.0));
    CHECK_THROWS_AS(allocate_uniform(1.5, 3), ConfigError);
    CHECK_THROWS_AS(allocate_uniform(-0.1, 3), ConfigError);
}

TEST_CASE("ppl-based allocator hand examples") {
    const auto eq = allocate_ppl_based(std::vector<double>{2, 2, 2}, 0.3);
    for (double r : eq.ratios) {
        CHECK(r == doctest::Approx(0.3).epsilon(1e-15));
    }
    const auto two = allocate_ppl_based(std::vector<double>{0, std::log(3.0)}, 0.4, 1e-8);
    CHECK(std::abs(two.ratios[0] - 0.6) <= 1e-6);
    CHECK(std::abs(two.ratios[1] - 0.2) <= 1e-6);
    const auto clamp = allocate_ppl_based(std::vector<double>{0, 100, 100, 100}, 0.9);
    CHECK(clamp.ratios[0] == 1.0);
    for (size_t i = 1; i < 4; ++i) {
        CHECK(clamp.ratios[i] == doctest::Approx(2.6 / 3.0).epsilon(1e-12));
    }
    CHECK(std::abs(sum_of(clamp.ratios) - 3.6) <= 1e-9);
    CHECK(allocate_ppl_based(std::vector<double>{0, 3, -2}, 1.0).ratios == std::vector<double>(3, 1.0));
    CHECK(allocate_ppl_based(std::vector<double>{0, 3, -2}, 0.0).ratios == std::vector<double>(3, 0.0));
}

TEST_CASE("ppl-based allocator handles extreme and negative deltas") {
    const auto p = allocate_ppl_based(std::vector<double>{-1e6, 1e6, 0.5, -3}, 0.4);
    for (double r : p.ratios) {
        CHECK(std::isfinite(r));
        CHECK(r >= 0.0);
        CHECK(r <= 1.0);
    }
    CHECK(std::abs(sum_of(p.ratios) - 1.6) <= 1e-9);
    CHECK_THROWS_AS(allocate_ppl_based(std::vector<double>{0, 1}, 0.4, 0.0), ConfigError);
}

TEST_CASE("ppl-based allocator conserves mass and is monotone") {
    Rng rng(21);
    for (int trial = 0; trial < 1000; ++trial) {
        const size_t n = 1 + rng.below(32);
        std::vector<double> d(n);
        for (double & x : d) {
            x = (rng.uniform() - 0.3) * (trial % 3 == 0 ? 40.0 : 4.0);
        }
        const double pt = rng.uniform();
        const auto p = allocate_ppl_based(d, pt);
        CHECK(std::abs(sum_of(p.ratios) - pt * (double) n) <= 1e-9);
        for (size_t a = 0; a < n; ++a) {
            CHECK(p.ratios[a] >= 0.0);
            CHECK(p.ratios[a] <= 1.0);
            for (size_t b = 0; b < n; ++b) {
                if (d[a] < d[b]) {
                    CHECK(p.ratios[a] >= p.ratios[b]);
                }
            }
        }
        CHECK_NOTHROW(p.validate());
    }
}

TEST_CASE("rank-based allocator") {
    const auto ranks = ascending_ranks(std::vector<double>{5, 1, 1, 9});
    CHECK(allocate_rank_based(ranks, 0.5, "delta-ppl").ratios == std::vector<double>{0, 1, 1, 0});
    CHECK(allocate_rank_based(ranks, 0.0, "delta-ppl").ratios == std::vector<double>(4, 0.0));
    CHECK(allocate_rank_by_index(4, 0.5).ratios == std::vector<double>{1, 1, 0, 0});
    CHECK(ceil_count(0.5, 4) == 2);
    CHECK(ceil_count(0.2, 4) == 1);
    CHECK(ceil_count(0.3, 10) == 3);
    CHECK(ceil_count(1.0, 7) == 7);
}

TEST_CASE("rank-based allocator prunes exactly ceil(P N) blocks across a sweep") {
    Rng rng(5);
    for (size_t n = 1; n <= 32; ++n) {
        for (int k = 0; k <= 20; ++k) {
            const double pt = k / 20.0;
            std::vector<double> d(n);
            for (double & x : d) {
                x = rng.normal();
            }
            const auto p = allocate_rank_based(ascending_ranks(d), pt, "delta-ppl");
            const size_t ones = (size_t) std::count(p.ratios.begin(), p.ratios.end(), 1.0);
            CHECK(ones == (size_t) std::ceil(pt * (double) n - 1e-9));
            CHECK(ones + (size_t) std::count(p.ratios.begin(), p.ratios.end(), 0.0) == n);
        }
    }
}

TEST_CASE("rank-based allocator is invariant to positive affine maps") {
    Rng rng(6);
    for (int trial = 0; trial < 200; ++trial) {
        const size_t n = 1 + rng.below(16);
        std::vector<double> d(n), t(n);
        const double a = 0.01 + rng.uniform() * 10, b = rng.normal() * 5;
        for (size_t i = 0; i < n; ++i) {
            d[i] = (double) rng.below(5); // ties exercise the index rule
            t[i] = a * d[i] + b;
        }
        const double pt = rng.uniform();
        CHECK(allocate_rank_based(ascending_ranks(d), pt, "").ratios ==
              allocate_rank_based(ascending_ranks(t), pt, "").ratios);
    }
}

TEST_CASE("plan validation and JSON round-trip") {
    const auto plan = allocate_ppl_based(std::vector<double>{0.1, 0.7, 2.0}, 0.4);
    const PruningPlan back = pruning_plan_from_json(to_json(plan));
    CHECK(back.ratios == plan.ratios);
    CHECK(back.allocator == Allocator::ppl_based);
    CHECK(back.epsilon == plan.epsilon);
    auto j = to_json(plan);
    j["ratios"][0] = 0.9;
    CHECK_THROWS_AS(pruning_plan_from_json(j), SchemaError);
    auto rank = to_json(allocate_rank_by_index(4, 0.5));
    rank["ratios"][2] = 1.0;
    CHECK_THROWS_AS(pruning_plan_from_json(rank), SchemaError);
    auto bad = to_json(allocate_uniform(0.3, 2));
    bad.erase("ratios");
    CHECK_THROWS_AS(pruning_plan_from_json(bad), SchemaError);
}

TEST_CASE("sensitivity report JSON round-trip") {
    const Checkpoint ck = kvtest::tiny_model(4, kvtest::tiny_config(3));
    const auto bs = screening(1, 9);
    const SensitivityReport r = measure_block_sensitivity(ck, bs);
    const SensitivityReport back = sensitivity_report_from_json(to_json(r));
    CHECK(back.base_ppl == r.base_ppl);
    CHECK(back.checkpoint_hash == r.checkpoint_hash);
    REQUIRE(back.n_blocks() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(back.blocks[i].delta_ppl == r.blocks[i].delta_ppl);
        CHECK(back.blocks[i].rank == r.blocks[i].rank);
    }
    CHECK(to_json(back).dump() == to_json(r).dump());
}
