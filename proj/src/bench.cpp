#include "kvprune/bench.hpp"

#include "kvprune/checkpoint_io.hpp"
#include "kvprune/errors.hpp"
#include "kvprune/scoring.hpp"

#include <chrono>
#include <cmath>
#include <future>
#include <sstream>

namespace kvprune {

double eval_ppl(const Checkpoint & ckpt, const Corpus & corpus, Split split, size_t seq_len, size_t batch_size) {
    const auto bs = sequential_batches(corpus, split, batch_size, seq_len);
    return perplexity(batch_nll(ckpt, bs));
}

double SteadyClock::now() {
    using namespace std::chrono;
    return duration<double>(steady_clock::now().time_since_epoch()).count();
}

double throughput_of(size_t batch, size_t output_len, double seconds) {
    return (double) (batch * output_len) / seconds;
}

GenerationTiming measure_generation(const Checkpoint & ckpt, const GenerationConfig & cfg, Clock & clock) {
    if (cfg.batch == 0 || cfg.prompt_len == 0 || cfg.output_len == 0) {
        throw ConfigError("generation batch, prompt_len and output_len must be >= 1");
    }
    if (cfg.prompt_len + cfg.output_len > ckpt.config.max_seq_len) {
        throw ConfigError("prompt_len + output_len exceeds max_seq_len " + std::to_string(ckpt.config.max_seq_len));
    }
    Rng rng(cfg.seed, 0x9e4);
    std::vector<std::vector<int>> prompts(cfg.batch, std::vector<int>(cfg.prompt_len));
    for (auto & p : prompts) {
        for (int & t : p) {
            t = (int) rng.below(ckpt.config.vocab_size);
        }
    }
    for (size_t i = 0; i < cfg.warmup; ++i) {
        generate(ckpt, prompts, cfg.output_len, cfg.use_cache);
        clock.on_generation();
    }
    const double t0 = clock.now();
    generate(ckpt, prompts, cfg.output_len, cfg.use_cache);
    clock.on_generation();
    const double t1 = clock.now();
    GenerationTiming out;
    out.seconds = t1 - t0;
    out.throughput = throughput_of(cfg.batch, cfg.output_len, out.seconds);
    return out;
}

namespace {

ojson to_json(const GenerationConfig & g) {
    return {{"batch", g.batch},
            {"prompt_len", g.prompt_len},
            {"output_len", g.output_len},
            {"warmup", g.warmup},
            {"use_cache", g.use_cache},
            {"seed", g.seed}};
}

ojson to_json(const KvReference & k) {
    return {{"batch", k.batch}, {"seq_len", k.seq_len}, {"bytes_per_element", k.bytes_per_element}};
}

} // namespace

ojson to_json(const BenchReport & r) {
    ojson j;
    j["model_id"] = r.model_id;
    j["model_hash"] = r.model_hash;
    j["eval_corpus"] = r.eval_corpus;
    j["eval_ppl"] = r.eval_ppl;
    j["second_corpus"] = r.second_corpus;
    j["second_ppl"] = r.second_ppl ? ojson(*r.second_ppl) : ojson(nullptr);
    j["kv_reference"] = to_json(r.kv_reference);
    j["kv_bytes"] = r.kv_bytes;
    j["parameters"] = r.parameters;
    j["run"] = to_json(r.run);
    j["latency_s"] = r.latency_s;
    j["throughput_tokens_per_s"] = r.throughput;
    j["environment"] = r.environment;
    return j;
}

BenchReport bench_report_from_json(const ojson & j) {
    try {
        BenchReport r;
        r.model_id = j.at("model_id").get<std::string>();
        r.model_hash = j.at("model_hash").get<std::string>();
        r.eval_corpus = j.at("eval_corpus").get<std::string>();
        r.eval_ppl = j.at("eval_ppl").get<double>();
        r.second_corpus = j.at("second_corpus").get<std::string>();
        if (!j.at("second_ppl").is_null()) {
            r.second_ppl = j.at("second_ppl").get<double>();
        }
        const auto & k = j.at("kv_reference");
        r.kv_reference = {k.at("batch").get<size_t>(), k.at("seq_len").get<size_t>(),
                          k.at("bytes_per_element").get<size_t>()};
        r.kv_bytes = j.at("kv_bytes").get<uint64_t>();
        r.parameters = j.at("parameters").get<size_t>();
        const auto & g = j.at("run");
        r.run.batch = g.at("batch").get<size_t>();
        r.run.prompt_len = g.at("prompt_len").get<size_t>();
        r.run.output_len = g.at("output_len").get<size_t>();
        r.run.warmup = g.at("warmup").get<size_t>();
        r.run.use_cache = g.at("use_cache").get<bool>();
        r.run.seed = g.at("seed").get<uint64_t>();
        r.latency_s = j.at("latency_s").get<double>();
        r.throughput = j.at("throughput_tokens_per_s").get<double>();
        r.environment = j.at("environment").get<std::string>();
        return r;
    } catch (const nlohmann::json::exception & e) {
        throw SchemaError(std::string("bench report: ") + e.what());
    }
}

const GridCell * AblationGrid::find(const std::string & global, const std::string & method, double p_total) const {
    for (const auto & c : cells) {
        if (c.global == global && c.method == method && std::abs(c.p_total - p_total) < 1e-12) {
            return &c;
        }
    }
    return nullptr;
}

ojson grid_config_to_json(const GridConfig & cfg, uint64_t seed) {
    ojson j;
    j["seed"] = seed;
    j["p_totals"] = cfg.p_totals;
    j["globals"] = cfg.globals;
    j["methods"] = cfg.methods;
    j["epsilon"] = cfg.epsilon;
    j["screening_batches"] = cfg.screening_batches;
    j["calibration_batches"] = cfg.calibration_batches;
    j["calibration_batch_size"] = cfg.calibration_batch_size;
    j["seq_len"] = cfg.seq_len;
    j["eval_seq_len"] = cfg.eval_seq_len;
    j["eval_batch_size"] = cfg.eval_batch_size;
    j["adapter"] = {{"rank", cfg.adapter.rank}, {"alpha", cfg.adapter.alpha}, {"seed", cfg.adapter.seed}};
    j["recover"] = {{"steps", cfg.recover.steps},
                    {"lr", cfg.recover.lr},
                    {"seed", cfg.recover.seed},
                    {"batch_size", cfg.recover.batch_size},
                    {"seq_len", cfg.recover.seq_len}};
    j["kv_reference"] = to_json(cfg.kv_reference);
    j["parallel"] = cfg.parallel;
    return j;
}

namespace {

struct SharedInputs {
    SensitivityReport sensitivity;
    std::optional<ChannelScoreTable> l1, l2, taylor;
};

GridCell run_cell(const Checkpoint & base, const Corpus & corpus, const GridConfig & cfg, const SharedInputs & shared,
                  const std::string & global, const std::string & method, double p_total, Clock * clock) {
    GridCell cell;
    cell.global = global;
    cell.method = method;
    cell.p_total = p_total;
    const double t0 = clock ? clock->now() : 0.0;
    try {
        const size_t n = base.weights.blocks.size();
        PruningPlan plan;
        if (method == "01") {
            plan = global == "ppl-based" ? allocate_rank_based(shared.sensitivity, p_total)
                                         : allocate_rank_by_index(n, p_total);
        } else if (global == "ppl-based") {
            plan = allocate_ppl_based(shared.sensitivity, p_total, cfg.epsilon);
        } else if (global == "uniform") {
            plan = allocate_uniform(p_total, n);
        } else {
            throw ConfigError("unknown global allocator '" + global + "'");
        }
        cell.ratios = plan.ratios;
        const ChannelScoreTable * table = nullptr;
        if (method == "01" || method == "l1") {
            table = &*shared.l1; // binary plans remove all or nothing, any score works
        } else if (method == "l2") {
            table = &*shared.l2;
        } else if (method == "taylor") {
            table = &*shared.taylor;
        } else {
            throw ConfigError("unknown block method '" + method + "'");
        }
        const PruneMask mask = select_mask(averaged_scores(*table), plan);
        auto [pruned, record] = apply_mask(base, mask, cfg.kv_reference);
        const auto check = verify(base, pruned, record);
        if (!check.passed) {
            throw VerificationError(check.failures.front());
        }
        cell.channels_after = record.channels_after;
        cell.kv_bytes = record.kv_bytes_after;
        cell.parameters = record.params_after;
        cell.pruned_ppl = eval_ppl(pruned, corpus, Split::eval, cfg.eval_seq_len, cfg.eval_batch_size);

        AttachOptions ao = cfg.adapter;
        ao.clamp_rank = true;
        const AdapterSet adapters = attach(pruned, ao);
        const RecoveryResult rec = recover(pruned, adapters, corpus, cfg.recover);
        const Checkpoint recovered = merge(pruned, rec.adapters);
        cell.recovered_ppl = eval_ppl(recovered, corpus, Split::eval, cfg.eval_seq_len, cfg.eval_batch_size);
        if (!rec.losses.empty()) {
            cell.recover_loss_first = rec.losses.front();
            const size_t tail = std::max<size_t>(1, rec.losses.size() / 10);
            double s = 0.0;
            for (size_t i = rec.losses.size() - tail; i < rec.losses.size(); ++i) {
                s += rec.losses[i];
            }
            cell.recover_loss_tail = s / (double) tail;
        }
    } catch (const std::exception & e) {
        cell.error = e.what();
    }
    if (clock) {
        cell.seconds = clock->now() - t0;
    }
    return cell;
}

std::vector<Batch> take_batches(const Corpus & corpus, size_t batch_size, size_t seq_len, size_t count, uint64_t seed) {
    auto all = batches(corpus, Split::calibration, batch_size, seq_len, seed);
    if (all.size() > count) {
        all.resize(count);
    }
    return all;
}

} // namespace

AblationGrid run_ablation_grid(const Checkpoint & base, const Corpus & corpus, const GridConfig & cfg, uint64_t seed,
                               Clock * clock) {
    AblationGrid grid;
    grid.config = grid_config_to_json(cfg, seed);
    grid.base_ppl = eval_ppl(base, corpus, Split::eval, cfg.eval_seq_len, cfg.eval_batch_size);
    grid.base_kv_bytes = kv_bytes(base, cfg.kv_reference.batch,
                                  cfg.kv_reference.seq_len ? cfg.kv_reference.seq_len : base.config.max_seq_len,
                                  cfg.kv_reference.bytes_per_element);
    grid.base_parameters = base.parameter_count();

    SharedInputs shared;
    const auto screening = take_batches(corpus, cfg.calibration_batch_size, cfg.seq_len, cfg.screening_batches, seed);
    shared.sensitivity = measure_block_sensitivity(base, screening);
    shared.sensitivity.seed = seed;
    grid.sensitivity = shared.sensitivity;
    shared.l1 = score_l1(base);
    shared.l2 = score_l2(base);
    bool need_taylor = false;
    for (const auto & m : cfg.methods) {
        need_taylor |= m == "taylor";
    }
    if (need_taylor) {
        const auto calib =
            take_batches(corpus, cfg.calibration_batch_size, cfg.seq_len, cfg.calibration_batches, seed + 1);
        shared.taylor = score_taylor(base, calib);
    }

    struct Key {
        std::string global, method;
        double p;
    };
    std::vector<Key> keys;
    for (double p : cfg.p_totals) {
        for (const auto & g : cfg.globals) {
            for (const auto & m : cfg.methods) {
                keys.push_back({g, m, p});
            }
        }
    }
    if (cfg.parallel) {
        std::vector<std::future<GridCell>> futs;
        for (const auto & k : keys) {
            futs.push_back(std::async(std::launch::async, [&, k] {
                return run_cell(base, corpus, cfg, shared, k.global, k.method, k.p, nullptr);
            }));
        }
        for (auto & f : futs) {
            grid.cells.push_back(f.get());
        }
    } else {
        for (const auto & k : keys) {
            grid.cells.push_back(run_cell(base, corpus, cfg, shared, k.global, k.method, k.p, clock));
        }
    }

    // soft monotonicity check: pruned PPL should not fall as P_total grows
    for (const auto & g : cfg.globals) {
        for (const auto & m : cfg.methods) {
            const GridCell * prev = nullptr;
            for (double p : cfg.p_totals) {
                const GridCell * c = grid.find(g, m, p);
                if (prev && c && prev->error.empty() && c->error.empty() && c->pruned_ppl < prev->pruned_ppl &&
                    c->p_total > prev->p_total) {
                    grid.notes.push_back("pruned PPL of (" + g + ", " + m + ") fell from " +
                                         format_double(prev->pruned_ppl) + " to " + format_double(c->pruned_ppl) +
                                         " as P_total rose to " + format_double(p));
                }
                prev = c;
            }
        }
    }
    return grid;
}

ojson to_json(const GridCell & c) {
    ojson j;
    j["global"] = c.global;
    j["method"] = c.method;
    j["p_total"] = c.p_total;
    j["ratios"] = c.ratios;
    j["channels_after"] = c.channels_after;
    j["kv_bytes"] = c.kv_bytes;
    j["parameters"] = c.parameters;
    j["pruned_ppl"] = c.pruned_ppl;
    j["recovered_ppl"] = c.recovered_ppl;
    j["recover_loss_first"] = c.recover_loss_first;
    j["recover_loss_tail"] = c.recover_loss_tail;
    j["seconds"] = c.seconds;
    j["error"] = c.error;
    return j;
}

ojson to_json(const AblationGrid & g) {
    ojson j;
    j["config"] = g.config;
    j["base_ppl"] = g.base_ppl;
    j["base_kv_bytes"] = g.base_kv_bytes;
    j["base_parameters"] = g.base_parameters;
    j["sensitivity"] = to_json(g.sensitivity);
    ojson cells = ojson::array();
    for (const auto & c : g.cells) {
        cells.push_back(to_json(c));
    }
    j["cells"] = cells;
    j["notes"] = g.notes;
    return j;
}

std::string grid_csv(const AblationGrid & g) {
    std::ostringstream os;
    os << "global,method,p_total,pruned_ppl,recovered_ppl,kv_bytes,parameters,recover_loss_first,recover_loss_tail,"
          "seconds,error\n";
    for (const auto & c : g.cells) {
        std::string err = c.error;
        for (char & ch : err) {
            if (ch == ',' || ch == '\n' || ch == '"') {
                ch = ';';
            }
        }
        os << c.global << ',' << c.method << ',' << format_double(c.p_total) << ',' << format_double(c.pruned_ppl)
           << ',' << format_double(c.recovered_ppl) << ',' << c.kv_bytes << ',' << c.parameters << ','
           << format_double(c.recover_loss_first) << ',' << format_double(c.recover_loss_tail) << ','
           << format_double(c.seconds) << ',' << err << '\n';
    }
    return os.str();
}

std::string bench_csv(const BenchReport & r) {
    std::ostringstream os;
    os << "model_id,model_hash,eval_ppl,second_ppl,kv_bytes,parameters,batch,prompt_len,output_len,warmup,use_cache,"
          "latency_s,throughput_tokens_per_s\n";
    os << r.model_id << ',' << r.model_hash << ',' << format_double(r.eval_ppl) << ','
       << (r.second_ppl ? format_double(*r.second_ppl) : std::string()) << ',' << r.kv_bytes << ',' << r.parameters
       << ',' << r.run.batch << ',' << r.run.prompt_len << ',' << r.run.output_len << ',' << r.run.warmup << ','
       << (r.run.use_cache ? 1 : 0) << ',' << format_double(r.latency_s) << ',' << format_double(r.throughput) << '\n';
    return os.str();
}

void emit_grid(const AblationGrid & g, const std::string & dir) {
    write_file(dir + "/grid.json", to_json(g).dump(2) + "\n");
    write_file(dir + "/grid.csv", grid_csv(g));
    write_file(dir + "/sensitivity.json", to_json(g.sensitivity).dump(2) + "\n");
}

void emit_bench(const BenchReport & r, const std::string & dir) {
    write_file(dir + "/bench.json", to_json(r).dump(2) + "\n");
    write_file(dir + "/bench.csv", bench_csv(r));
}

} // namespace kvprune
