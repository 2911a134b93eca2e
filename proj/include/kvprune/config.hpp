#pragma once

#include "kvprune/bench.hpp"
#include "kvprune/data.hpp"
#include "kvprune/finetune.hpp"
#include "kvprune/model.hpp"
#include "kvprune/sensitivity.hpp"

#include <string>
#include <vector>

namespace kvprune {

// Everything a run depends on besides the corpus bytes. Stored as flat
// "key = value" text; see describe_keys() for the list.
struct RunConfig {
    std::string corpus = "data/alice.txt";
    std::string second_corpus; // optional out-of-domain eval text
    SplitFractions split{0.8, 0.08, 0.12};
    ModelConfig model;
    uint64_t seed = 0;
    std::string out_dir = "reports";

    TrainOptions train;

    size_t screening_batches = 32;
    size_t calibration_batches = 32;
    size_t calibration_batch_size = 4;
    size_t calibration_seq_len = 64;

    Allocator allocator = Allocator::ppl_based;
    double p_total = 0.2;
    double epsilon = kDefaultEpsilon;
    std::string method = "taylor"; // l1 | l2 | taylor
    std::string rank_order = "delta-ppl"; // delta-ppl | block-index, rank-based allocator only

    AttachOptions adapter;
    RecoverOptions recover;
    bool full_finetune = false;

    size_t eval_seq_len = 64;
    size_t eval_batch_size = 8;

    GenerationConfig generation;
    size_t bench_runs = 5;
    KvReference kv_reference;

    std::vector<double> grid_p_totals = {0.2, 0.5};
    std::vector<std::string> grid_globals = {"uniform", "ppl-based"};
    std::vector<std::string> grid_methods = {"01", "l1", "l2", "taylor"};
    bool grid_parallel = false;

    // Deterministic timing for tests: every generation takes exactly one fake second.
    bool fake_clock = false;

    // Directory relative paths are resolved against; set by load_config, not serialized.
    std::string base_dir;
    std::string resolve(const std::string & path) const;

    void set(const std::string & key, const std::string & value);
    std::string get(const std::string & key) const;
    // Sorted "key = value" lines for every key.
    std::string canonical() const;
    // Content hash of canonical(); names the report directory.
    std::string run_id() const;
    void validate() const;

    GridConfig grid_config() const;
};

struct KeyDoc {
    std::string key;
    std::string doc;
};
const std::vector<KeyDoc> & describe_keys();

// Parses "key = value" lines; '#' starts a comment. Unknown keys are config errors.
RunConfig parse_config(const std::string & text, RunConfig base = {});
RunConfig load_config(const std::string & path);
// key=value
void apply_override(RunConfig & cfg, const std::string & assignment);

} // namespace kvprune
