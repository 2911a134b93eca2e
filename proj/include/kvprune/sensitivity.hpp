#pragma once

#include "kvprune/data.hpp"
#include "kvprune/json_io.hpp"
#include "kvprune/model.hpp"

#include <span>
#include <string>
#include <vector>

namespace kvprune {

struct BlockSensitivity {
    double delta_ppl = 0.0;
    size_t rank = 0; // 1-based, ascending by delta_ppl, ties toward the lower block index
};

struct SensitivityReport {
    double base_ppl = 0.0;
    std::vector<BlockSensitivity> blocks;
    std::string screening_split = "calibration";
    uint64_t seed = 0;
    size_t screening_batches = 0;
    std::string checkpoint_hash;

    size_t n_blocks() const { return blocks.size(); }
    std::vector<double> deltas() const;
};

// 1-based ranks of values ascending, ties broken toward the lower index.
std::vector<size_t> ascending_ranks(std::span<const double> values);

double perplexity(const NllSum & nll);

// One pure-forward base run plus one run per block with that block's attention output zeroed.
SensitivityReport measure_block_sensitivity(const Checkpoint & ckpt, std::span<const Batch> screening);

enum class Allocator { uniform, ppl_based, rank_based };

const char * allocator_name(Allocator a);
Allocator allocator_from_name(const std::string & name);

struct PruningPlan {
    Allocator allocator = Allocator::uniform;
    double p_total = 0.0;
    double epsilon = 0.0;
    std::vector<double> ratios;
    // How the rank-based allocator ordered blocks: "delta-ppl" or "block-index".
    std::string order;

    size_t n_blocks() const { return ratios.size(); }
    // Checks the allocator's invariants; throws SchemaError naming the violation.
    void validate() const;
};

inline constexpr double kDefaultEpsilon = 1e-8;
inline constexpr double kDeltaClip = 50.0;

PruningPlan allocate_uniform(double p_total, size_t n_blocks);

// Weights 1 / (exp(clip(dPPL_i)) + eps), normalized and scaled so the mean ratio is
// p_total. Ratios above 1 are clamped and the excess redistributed over unclamped
// blocks in proportion to their weights until nothing exceeds 1.
PruningPlan allocate_ppl_based(const SensitivityReport & report, double p_total, double epsilon = kDefaultEpsilon);
PruningPlan allocate_ppl_based(std::span<const double> delta_ppl, double p_total, double epsilon = kDefaultEpsilon);

// Blocks ranked <= ceil(p_total * N) get ratio 1, the rest 0.
PruningPlan allocate_rank_based(const SensitivityReport & report, double p_total);
PruningPlan allocate_rank_based(std::span<const size_t> ranks, double p_total, std::string order);
// Rank-based with ranks equal to block position (first blocks pruned first).
PruningPlan allocate_rank_by_index(size_t n_blocks, double p_total);

size_t ceil_count(double p_total, size_t n);

ojson to_json(const SensitivityReport & r);
SensitivityReport sensitivity_report_from_json(const ojson & j);
ojson to_json(const PruningPlan & p);
PruningPlan pruning_plan_from_json(const ojson & j);

} // namespace kvprune
