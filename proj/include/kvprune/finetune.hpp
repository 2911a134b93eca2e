#pragma once

#include "kvprune/data.hpp"
#include "kvprune/model.hpp"

#include <functional>
#include <string>
#include <vector>

namespace kvprune {

// Low-rank update for one projection: W_eff = W + (alpha / rank) * A * B.
struct Adapter {
    size_t block = 0;
    Proj proj = Proj::wq;
    size_t rank = 0;
    Matrix a; // out x rank
    Matrix b; // rank x in

    std::string target() const { return "blocks." + std::to_string(block) + "." + proj_name(proj); }
};

struct AdapterSet {
    size_t rank = 8;
    double alpha = 16.0;
    std::vector<Adapter> adapters;

    double scale(const Adapter & a) const { return alpha / (double) a.rank; }
    // Low-rank terms for the unmerged forward route; borrows this set's matrices.
    std::vector<LowRankTerm> terms() const;
};

std::vector<Proj> default_adapter_targets();

struct AttachOptions {
    size_t rank = 8;
    double alpha = 16.0;
    uint64_t seed = 0;
    std::vector<Proj> targets = default_adapter_targets();
    // When set, a projection smaller than rank gets rank min(out, in) instead of
    // raising a config error. Projections with a zero dimension are always skipped.
    bool clamp_rank = false;
};

// A ~ N(0, 1/rank), B = 0, so the adapted model starts identical to the base.
AdapterSet attach(const Checkpoint & ckpt, const AttachOptions & opts);

// Logits with adapters applied as separate low-rank paths (nothing merged).
Matrix forward_with_adapters(const Checkpoint & ckpt, const AdapterSet & adapters, const Batch & batch);

struct RecoverOptions {
    size_t steps = 500;
    double lr = 2e-3;
    uint64_t seed = 0;
    size_t batch_size = 8;
    size_t seq_len = 64;
    double grad_clip = 1.0;
    std::function<void(size_t step, double loss)> on_step;
};

struct RecoveryResult {
    AdapterSet adapters;
    std::vector<double> losses;
};

// Trains only the adapter factors on the train split; the base checkpoint is read-only.
RecoveryResult recover(const Checkpoint & ckpt, const AdapterSet & adapters, const Corpus & corpus,
                       const RecoverOptions & opts);

// W <- W + (alpha / rank) * A * B for every adapter.
Checkpoint merge(const Checkpoint & ckpt, const AdapterSet & adapters);

// Full-parameter alternative behind the same options; off unless requested.
Checkpoint recover_full(const Checkpoint & ckpt, const Corpus & corpus, const RecoverOptions & opts);

} // namespace kvprune
