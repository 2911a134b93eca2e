#include "kvprune/sensitivity.hpp"

#include "kvprune/checkpoint_io.hpp"
#include "kvprune/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace kvprune {

std::vector<double> SensitivityReport::deltas() const {
    std::vector<double> d;
    for (const auto & b : blocks) {
        d.push_back(b.delta_ppl);
    }
    return d;
}

std::vector<size_t> ascending_ranks(std::span<const double> values) {
    std::vector<size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return values[a] < values[b]; });
    std::vector<size_t> ranks(values.size());
    for (size_t pos = 0; pos < order.size(); ++pos) {
        ranks[order[pos]] = pos + 1;
    }
    return ranks;
}

double perplexity(const NllSum & nll) {
    if (nll.count == 0) {
        throw DataError("perplexity over zero tokens");
    }
    return std::exp(nll.mean());
}

SensitivityReport measure_block_sensitivity(const Checkpoint & ckpt, std::span<const Batch> screening) {
    if (screening.empty()) {
        throw DataError("sensitivity screening needs at least one batch");
    }
    SensitivityReport r;
    r.screening_batches = screening.size();
    r.checkpoint_hash = checkpoint_hash(ckpt);
    r.base_ppl = perplexity(batch_nll(ckpt, screening));
    const size_t n = ckpt.weights.blocks.size();
    std::vector<double> deltas(n);
    for (size_t i = 0; i < n; ++i) {
        ForwardOptions opts;
        opts.ablate_attention.assign(n, false);
        opts.ablate_attention[i] = true;
        deltas[i] = perplexity(batch_nll(ckpt, screening, opts)) - r.base_ppl;
    }
    const auto ranks = ascending_ranks(deltas);
    for (size_t i = 0; i < n; ++i) {
        r.blocks.push_back({deltas[i], ranks[i]});
    }
    return r;
}

const char * allocator_name(Allocator a) {
    switch (a) {
        case Allocator::uniform: return "uniform";
        case Allocator::ppl_based: return "ppl-based";
        case Allocator::rank_based: return "rank-based";
    }
    return "?";
}

Allocator allocator_from_name(const std::string & name) {
    if (name == "uniform") return Allocator::uniform;
    if (name == "ppl-based") return Allocator::ppl_based;
    if (name == "rank-based") return Allocator::rank_based;
    throw ConfigError("unknown allocator '" + name + "'");
}

namespace {

void check_p_total(double p_total) {
    if (!(p_total >= 0.0 && p_total <= 1.0)) {
        throw ConfigError("P_total must lie in [0, 1], got " + std::to_string(p_total));
    }
}

} // namespace

size_t ceil_count(double p_total, size_t n) {
    // tolerance absorbs products like 0.7 * 10 = 7.000000000000001
    return std::min(n, (size_t) std::ceil(p_total * (double) n - 1e-9));
}

void PruningPlan::validate() const {
    for (size_t i = 0; i < ratios.size(); ++i) {
        if (!(ratios[i] >= 0.0 && ratios[i] <= 1.0)) {
            throw SchemaError("ratio of block " + std::to_string(i) + " is " + format_double(ratios[i]) +
                              ", outside [0, 1]");
        }
    }
    if (!(p_total >= 0.0 && p_total <= 1.0)) {
        throw SchemaError("p_total " + format_double(p_total) + " outside [0, 1]");
    }
    const double n = (double) ratios.size();
    const double sum = std::accumulate(ratios.begin(), ratios.end(), 0.0);
    switch (allocator) {
        case Allocator::uniform:
            for (size_t i = 0; i < ratios.size(); ++i) {
                if (ratios[i] != p_total) {
                    throw SchemaError("uniform plan ratio of block " + std::to_string(i) + " differs from p_total");
                }
            }
            break;
        case Allocator::ppl_based:
            if (std::abs(sum - p_total * n) > 1e-9 * std::max(1.0, n)) {
                throw SchemaError("ppl-based ratios sum to " + format_double(sum) + ", expected p_total * N = " +
                                  format_double(p_total * n));
            }
            break;
        case Allocator::rank_based: {
            size_t ones = 0;
            for (size_t i = 0; i < ratios.size(); ++i) {
                if (ratios[i] != 0.0 && ratios[i] != 1.0) {
                    throw SchemaError("rank-based ratio of block " + std::to_string(i) + " is not 0 or 1");
                }
                ones += ratios[i] == 1.0;
            }
            if (ones != ceil_count(p_total, ratios.size())) {
                throw SchemaError("rank-based plan prunes " + std::to_string(ones) + " blocks, expected ceil(p_total * N) = " +
                                  std::to_string(ceil_count(p_total, ratios.size())));
            }
            break;
        }
    }
}

PruningPlan allocate_uniform(double p_total, size_t n_blocks) {
    check_p_total(p_total);
    PruningPlan p;
    p.allocator = Allocator::uniform;
    p.p_total = p_total;
    p.ratios.assign(n_blocks, p_total);
    return p;
}

PruningPlan allocate_ppl_based(std::span<const double> delta_ppl, double p_total, double epsilon) {
    check_p_total(p_total);
    if (!(epsilon > 0.0)) {
        throw ConfigError("epsilon must be > 0");
    }
    const size_t n = delta_ppl.size();
    if (n == 0) {
        throw SchemaError("sensitivity report has no blocks");
    }
    std::vector<double> w(n);
    for (size_t i = 0; i < n; ++i) {
        if (!std::isfinite(delta_ppl[i])) {
            throw SchemaError("delta_ppl of block " + std::to_string(i) + " is not finite");
        }
        w[i] = 1.0 / (std::exp(std::clamp(delta_ppl[i], -kDeltaClip, kDeltaClip)) + epsilon);
    }
    PruningPlan p;
    p.allocator = Allocator::ppl_based;
    p.p_total = p_total;
    p.epsilon = epsilon;
    p.order = "delta-ppl";
    p.ratios.assign(n, 0.0);

    const double mass = p_total * (double) n;
    std::vector<bool> clamped(n, false);
    size_t n_clamped = 0;
    for (;;) {
        const double remaining = mass - (double) n_clamped;
        double wsum = 0.0;
        for (size_t i = 0; i < n; ++i) {
            if (!clamped[i]) {
                wsum += w[i];
            }
        }
        bool changed = false;
        for (size_t i = 0; i < n; ++i) {
            if (clamped[i]) {
                p.ratios[i] = 1.0;
                continue;
            }
            p.ratios[i] = w[i] / wsum * remaining;
            if (p.ratios[i] > 1.0) {
                clamped[i] = true;
                ++n_clamped;
                changed = true;
            }
        }
        if (!changed) {
            break;
        }
        if (n_clamped == n) {
            std::fill(p.ratios.begin(), p.ratios.end(), 1.0);
            break;
        }
    }
    return p;
}

PruningPlan allocate_ppl_based(const SensitivityReport & report, double p_total, double epsilon) {
    return allocate_ppl_based(report.deltas(), p_total, epsilon);
}

PruningPlan allocate_rank_based(std::span<const size_t> ranks, double p_total, std::string order) {
    check_p_total(p_total);
    const size_t k = ceil_count(p_total, ranks.size());
    PruningPlan p;
    p.allocator = Allocator::rank_based;
    p.p_total = p_total;
    p.order = std::move(order);
    for (size_t r : ranks) {
        p.ratios.push_back(r <= k ? 1.0 : 0.0);
    }
    return p;
}

PruningPlan allocate_rank_based(const SensitivityReport & report, double p_total) {
    if (report.blocks.empty()) {
        throw SchemaError("sensitivity report has no blocks");
    }
    std::vector<size_t> ranks;
    for (const auto & b : report.blocks) {
        ranks.push_back(b.rank);
    }
    std::vector<size_t> sorted = ranks;
    std::sort(sorted.begin(), sorted.end());
    for (size_t i = 0; i < sorted.size(); ++i) {
        if (sorted[i] != i + 1) {
            throw SchemaError("report ranks are not a permutation of 1..N");
        }
    }
    return allocate_rank_based(ranks, p_total, "delta-ppl");
}

PruningPlan allocate_rank_by_index(size_t n_blocks, double p_total) {
    std::vector<size_t> ranks(n_blocks);
    std::iota(ranks.begin(), ranks.end(), 1);
    return allocate_rank_based(ranks, p_total, "block-index");
}

ojson to_json(const SensitivityReport & r) {
    ojson j;
    j["base_ppl"] = r.base_ppl;
    j["screening_split"] = r.screening_split;
    j["seed"] = r.seed;
    j["screening_batches"] = r.screening_batches;
    j["checkpoint_hash"] = r.checkpoint_hash;
    ojson blocks = ojson::array();
    for (size_t i = 0; i < r.blocks.size(); ++i) {
        blocks.push_back({{"block", i}, {"delta_ppl", r.blocks[i].delta_ppl}, {"rank", r.blocks[i].rank}});
    }
    j["blocks"] = blocks;
    return j;
}

SensitivityReport sensitivity_report_from_json(const ojson & j) {
    try {
        SensitivityReport r;
        r.base_ppl = j.at("base_ppl").get<double>();
        r.screening_split = j.value("screening_split", std::string("calibration"));
        r.seed = j.value("seed", (uint64_t) 0);
        r.screening_batches = j.value("screening_batches", (size_t) 0);
        r.checkpoint_hash = j.value("checkpoint_hash", std::string());
        for (const auto & b : j.at("blocks")) {
            r.blocks.push_back({b.at("delta_ppl").get<double>(), b.at("rank").get<size_t>()});
        }
        const auto ranks = ascending_ranks(r.deltas());
        for (size_t i = 0; i < r.blocks.size(); ++i) {
            if (r.blocks[i].rank != ranks[i]) {
                throw SchemaError("rank of block " + std::to_string(i) + " does not match its delta_ppl order");
            }
        }
        return r;
    } catch (const nlohmann::json::exception & e) {
        throw SchemaError(std::string("sensitivity report: ") + e.what());
    }
}

ojson to_json(const PruningPlan & p) {
    ojson j;
    j["allocator"] = allocator_name(p.allocator);
    j["p_total"] = p.p_total;
    j["epsilon"] = p.epsilon;
    j["order"] = p.order;
    j["ratios"] = p.ratios;
    return j;
}

PruningPlan pruning_plan_from_json(const ojson & j) {
    PruningPlan p;
    try {
        p.allocator = allocator_from_name(j.at("allocator").get<std::string>());
        p.p_total = j.at("p_total").get<double>();
        p.epsilon = j.value("epsilon", 0.0);
        p.order = j.value("order", std::string());
        p.ratios = j.at("ratios").get<std::vector<double>>();
    } catch (const nlohmann::json::exception & e) {
        throw SchemaError(std::string("pruning plan: ") + e.what());
    } catch (const ConfigError & e) {
        throw SchemaError(std::string("pruning plan: ") + e.what());
    }
    p.validate();
    return p;
}

} // namespace kvprune
