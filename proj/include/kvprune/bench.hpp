#pragma once

#include "kvprune/data.hpp"
#include "kvprune/finetune.hpp"
#include "kvprune/json_io.hpp"
#include "kvprune/model.hpp"
#include "kvprune/sensitivity.hpp"
#include "kvprune/surgery.hpp"

#include <optional>
#include <string>
#include <vector>

namespace kvprune {

// exp(mean token NLL) over non-overlapping seq_len windows of the split; a tail
// shorter than seq_len + 1 tokens is not scored.
double eval_ppl(const Checkpoint & ckpt, const Corpus & corpus, Split split, size_t seq_len, size_t batch_size = 8);

// Timing boundary for the generation harness.
class Clock {
public:
    virtual ~Clock() = default;
    virtual double now() = 0;
    // Called after every generation the harness runs, warmup included.
    virtual void on_generation() {}
};

class SteadyClock : public Clock {
public:
    double now() override;
};

// Deterministic clock: time moves only by the injected per-generation delay.
class FakeClock : public Clock {
public:
    explicit FakeClock(double generation_delay = 1.0) : delay_(generation_delay) {}
    double now() override { return t_; }
    void on_generation() override { t_ += delay_; }

private:
    double t_ = 0.0;
    double delay_;
};

struct GenerationConfig {
    size_t batch = 1;        // M
    size_t prompt_len = 64;
    size_t output_len = 32;  // L
    size_t warmup = 10;
    bool use_cache = false;
    uint64_t seed = 0;
};

struct GenerationTiming {
    double seconds = 0.0;     // T
    double throughput = 0.0;  // M * L / T
};

double throughput_of(size_t batch, size_t output_len, double seconds);

// warmup untimed generations, then one timed generation of output_len tokens for batch sequences.
GenerationTiming measure_generation(const Checkpoint & ckpt, const GenerationConfig & cfg, Clock & clock);

struct BenchReport {
    std::string model_id;
    std::string model_hash;
    std::string eval_corpus;
    double eval_ppl = 0.0;
    std::string second_corpus;
    std::optional<double> second_ppl;
    KvReference kv_reference;
    uint64_t kv_bytes = 0;
    size_t parameters = 0;
    GenerationConfig run;
    double latency_s = 0.0;
    double throughput = 0.0;
    std::string environment;
};

ojson to_json(const BenchReport & r);
BenchReport bench_report_from_json(const ojson & j);

struct GridCell {
    std::string global; // uniform | ppl-based
    std::string method; // 01 | l1 | l2 | taylor
    double p_total = 0.0;
    std::vector<double> ratios;
    std::vector<size_t> channels_after;
    uint64_t kv_bytes = 0;
    size_t parameters = 0;
    double pruned_ppl = 0.0;
    double recovered_ppl = 0.0;
    double recover_loss_first = 0.0;
    double recover_loss_tail = 0.0; // mean over the final 10% of recovery steps
    double seconds = 0.0;
    std::string error;
};

struct GridConfig {
    std::vector<double> p_totals = {0.2, 0.5};
    std::vector<std::string> globals = {"uniform", "ppl-based"};
    std::vector<std::string> methods = {"01", "l1", "l2", "taylor"};
    double epsilon = kDefaultEpsilon;
    size_t screening_batches = 32;
    size_t calibration_batches = 32;
    size_t calibration_batch_size = 4;
    size_t seq_len = 64;
    size_t eval_seq_len = 64;
    size_t eval_batch_size = 8;
    AttachOptions adapter;
    RecoverOptions recover;
    KvReference kv_reference;
    bool parallel = false; // concurrent cells; cell timing is not recorded in this mode
};

struct AblationGrid {
    ojson config;
    double base_ppl = 0.0;
    uint64_t base_kv_bytes = 0;
    size_t base_parameters = 0;
    SensitivityReport sensitivity;
    std::vector<GridCell> cells;
    std::vector<std::string> notes;

    const GridCell * find(const std::string & global, const std::string & method, double p_total) const;
};

ojson grid_config_to_json(const GridConfig & cfg, uint64_t seed);

// Sensitivity and Taylor gradients are computed once on the dense model and shared by all cells.
// A failing cell records its error and the grid continues.
AblationGrid run_ablation_grid(const Checkpoint & base, const Corpus & corpus, const GridConfig & cfg, uint64_t seed,
                               Clock * clock = nullptr);

ojson to_json(const GridCell & c);
ojson to_json(const AblationGrid & g);
std::string grid_csv(const AblationGrid & g);
std::string bench_csv(const BenchReport & r);

// Writes grid.json, grid.csv and sensitivity.json into dir.
void emit_grid(const AblationGrid & g, const std::string & dir);
// Writes bench.json and bench.csv into dir.
void emit_bench(const BenchReport & r, const std::string & dir);

} // namespace kvprune
