#include "kvprune/cli.hpp"

#include "kvprune/bench.hpp"
#include "kvprune/checkpoint_io.hpp"
#include "kvprune/config.hpp"
#include "kvprune/errors.hpp"
#include "kvprune/scoring.hpp"
#include "kvprune/surgery.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace kvprune {

namespace {

namespace fs = std::filesystem;

// Shortest text that parses back to the same double.
std::string shortest(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out;
    std::vector<std::string> checkpoints;
    std::string plan;
    std::string output;
};

struct Context {
    RunConfig cfg;
    std::string root;
    std::ostream & out;
    std::ostream & err;
};

Context make_context(const Common & c, std::ostream & out, std::ostream & err) {
    RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
    for (const auto & o : c.overrides) {
        apply_override(cfg, o);
    }
    cfg.validate();
    std::string root = cfg.resolve(cfg.out_dir);
    if (const char * env = std::getenv("KVPRUNE_OUT"); env && *env) {
        root = env;
    }
    if (!c.out.empty()) {
        root = c.out;
    }
    return {std::move(cfg), std::move(root), out, err};
}

// Report directory for this config and the hashes of any input artifacts.
std::string run_dir(const Context & ctx, const std::vector<std::string> & input_hashes = {}) {
    std::string key = ctx.cfg.canonical();
    for (const auto & h : input_hashes) {
        key += "input = " + h + "\n";
    }
    return (fs::path(ctx.root) / content_hash(key)).string();
}

Corpus open_corpus(const RunConfig & cfg) { return load_corpus(cfg.resolve(cfg.corpus), cfg.split, cfg.seed); }

std::string save_addressed(const std::string & dir, const std::string & prefix, const Checkpoint & ckpt,
                           const AdapterSet * adapters = nullptr) {
    const std::string bytes = serialize_checkpoint(ckpt, adapters);
    const std::string path = dir + "/" + prefix + "-" + content_hash(bytes) + ".kvpr";
    write_file(path, bytes);
    return path;
}

std::string save_json_addressed(const std::string & dir, const std::string & prefix, const ojson & j) {
    const std::string text = j.dump(2) + "\n";
    const std::string path = dir + "/" + prefix + "-" + content_hash(text) + ".json";
    write_file(path, text);
    return path;
}

ojson read_json(const std::string & path, const std::string & what) {
    const std::string text = read_file(path);
    try {
        return ojson::parse(text);
    } catch (const nlohmann::json::exception & e) {
        throw SchemaError(what + " " + path + " is not valid JSON: " + e.what());
    }
}

const std::string & single_checkpoint(const Common & c, const char * cmd) {
    if (c.checkpoints.size() != 1) {
        throw ConfigError(std::string(cmd) + " needs exactly one --checkpoint");
    }
    return c.checkpoints.front();
}

Checkpoint train_dense(Context & ctx, const Corpus & corpus, const std::string & dir, std::string * path_out) {
    TrainOptions opts = ctx.cfg.train;
    opts.seed = ctx.cfg.seed;
    std::ostringstream log;
    log << "step,loss\n";
    opts.on_step = [&](size_t step, double loss) { log << step << ',' << format_double(loss) << '\n'; };
    Checkpoint ckpt = train(init_checkpoint(ctx.cfg.model, ctx.cfg.seed), corpus, opts);
    ckpt.meta.note = "corpus=" + corpus.name;
    *path_out = save_addressed(dir, "dense", ckpt);
    write_file(dir + "/train_log.csv", log.str());
    return ckpt;
}

int cmd_train(const Common & c, Context & ctx) {
    const Corpus corpus = open_corpus(ctx.cfg);
    const std::string dir = run_dir(ctx);
    std::string path;
    const Checkpoint ckpt = train_dense(ctx, corpus, dir, &path);
    if (!c.output.empty()) {
        save_checkpoint(c.output, ckpt);
        path = c.output;
    }
    ctx.out << "checkpoint " << path << "\n";
    ctx.out << "final_loss " << shortest(ckpt.meta.final_loss) << "\n";
    return 0;
}

SensitivityReport sensitivity_for(Context & ctx, const Checkpoint & ckpt, const Corpus & corpus, const std::string & dir,
                                  bool * cached) {
    const std::string hash = checkpoint_hash(ckpt);
    const std::string cache = dir + "/sensitivity.json";
    *cached = false;
    if (fs::exists(cache)) {
        try {
            SensitivityReport r = sensitivity_report_from_json(read_json(cache, "sensitivity cache"));
            if (r.checkpoint_hash == hash && r.seed == ctx.cfg.seed && r.n_blocks() == ckpt.weights.blocks.size()) {
                *cached = true;
                return r;
            }
        } catch (const Error &) {
            // stale or foreign cache, recompute
        }
    }
    auto screening = batches(corpus, Split::calibration, ctx.cfg.calibration_batch_size, ctx.cfg.calibration_seq_len,
                             ctx.cfg.seed);
    if (screening.size() > ctx.cfg.screening_batches) {
        screening.resize(ctx.cfg.screening_batches);
    }
    SensitivityReport r = measure_block_sensitivity(ckpt, screening);
    r.seed = ctx.cfg.seed;
    return r;
}

PruningPlan plan_for(const RunConfig & cfg, const SensitivityReport & r) {
    switch (cfg.allocator) {
        case Allocator::uniform: return allocate_uniform(cfg.p_total, r.n_blocks());
        case Allocator::ppl_based: return allocate_ppl_based(r, cfg.p_total, cfg.epsilon);
        case Allocator::rank_based:
            return cfg.rank_order == "block-index" ? allocate_rank_by_index(r.n_blocks(), cfg.p_total)
                                                   : allocate_rank_based(r, cfg.p_total);
    }
    throw ConfigError("unknown allocator");
}

int cmd_analyze(const Common & c, Context & ctx) {
    const Checkpoint ckpt = load_checkpoint(single_checkpoint(c, "analyze"));
    const Corpus corpus = open_corpus(ctx.cfg);
    const std::string dir = run_dir(ctx, {checkpoint_hash(ckpt)});
    bool cached = false;
    const SensitivityReport report = sensitivity_for(ctx, ckpt, corpus, dir, &cached);
    const PruningPlan plan = plan_for(ctx.cfg, report);
    write_file(dir + "/sensitivity.json", to_json(report).dump(2) + "\n");
    const std::string plan_path = save_json_addressed(dir, "plan", to_json(plan));
    ctx.out << "sensitivity " << dir << "/sensitivity.json" << (cached ? " (cached)" : "") << "\n";
    ctx.out << "base_ppl " << shortest(report.base_ppl) << "\n";
    for (size_t i = 0; i < report.n_blocks(); ++i) {
        ctx.out << "block " << i << " delta_ppl " << shortest(report.blocks[i].delta_ppl) << " rank "
                << report.blocks[i].rank << " ratio " << shortest(plan.ratios[i]) << "\n";
    }
    ctx.out << "plan " << plan_path << "\n";
    return 0;
}

ChannelScoreTable scores_for(const RunConfig & cfg, const Checkpoint & ckpt, const Corpus & corpus) {
    const ScoreMethod m = method_from_name(cfg.method);
    if (m == ScoreMethod::l1) {
        return score_l1(ckpt);
    }
    if (m == ScoreMethod::l2) {
        return score_l2(ckpt);
    }
    auto calib = batches(corpus, Split::calibration, cfg.calibration_batch_size, cfg.calibration_seq_len, cfg.seed + 1);
    if (calib.size() > cfg.calibration_batches) {
        calib.resize(cfg.calibration_batches);
    }
    return score_taylor(ckpt, calib);
}

int cmd_prune(const Common & c, Context & ctx) {
    if (c.plan.empty()) {
        throw ConfigError("prune needs --plan");
    }
    const PruningPlan plan = pruning_plan_from_json(read_json(c.plan, "plan"));
    const Checkpoint ckpt = load_checkpoint(single_checkpoint(c, "prune"));
    if (plan.n_blocks() != ckpt.weights.blocks.size()) {
        throw SchemaError("plan covers " + std::to_string(plan.n_blocks()) + " blocks, checkpoint has " +
                          std::to_string(ckpt.weights.blocks.size()));
    }
    const Corpus corpus = open_corpus(ctx.cfg);
    const ChannelScoreTable table = scores_for(ctx.cfg, ckpt, corpus);
    const PruneMask mask = select_mask(averaged_scores(table), plan);
    auto [pruned, record] = apply_mask(ckpt, mask, ctx.cfg.kv_reference);
    const std::string dir = run_dir(ctx, {checkpoint_hash(ckpt), content_hash(to_json(plan).dump())});
    const VerificationReport check = verify(ckpt, pruned, record);
    if (!check.passed) {
        for (const auto & f : check.failures) {
            ctx.err << "verify: " << f << "\n";
        }
        throw VerificationError(std::to_string(check.failures.size()) + " check(s) failed");
    }
    const std::string path = save_addressed(dir, "pruned", pruned);
    const std::string rec_path = save_json_addressed(dir, "surgery", to_json(record));
    ctx.out << "checkpoint " << path << "\n";
    ctx.out << "surgery " << rec_path << "\n";
    ctx.out << "params " << record.params_before << " -> " << record.params_after << "\n";
    ctx.out << "kv_bytes " << record.kv_bytes_before << " -> " << record.kv_bytes_after << "\n";
    return 0;
}

int cmd_finetune(const Common & c, Context & ctx) {
    const Checkpoint ckpt = load_checkpoint(single_checkpoint(c, "finetune"));
    const Corpus corpus = open_corpus(ctx.cfg);
    const std::string dir = run_dir(ctx, {checkpoint_hash(ckpt)});
    RecoverOptions ro = ctx.cfg.recover;
    ro.seed = ctx.cfg.seed;
    std::ostringstream log;
    log << "step,loss\n";
    ro.on_step = [&](size_t step, double loss) { log << step << ',' << format_double(loss) << '\n'; };
    Checkpoint recovered;
    if (ctx.cfg.full_finetune) {
        recovered = recover_full(ckpt, corpus, ro);
    } else {
        AttachOptions ao = ctx.cfg.adapter;
        ao.seed = ctx.cfg.seed;
        ao.clamp_rank = true;
        const RecoveryResult res = recover(ckpt, attach(ckpt, ao), corpus, ro);
        ctx.out << "adapters " << save_addressed(dir, "adapters", ckpt, &res.adapters) << "\n";
        recovered = merge(ckpt, res.adapters);
    }
    write_file(dir + "/finetune_log.csv", log.str());
    ctx.out << "checkpoint " << save_addressed(dir, "recovered", recovered) << "\n";
    return 0;
}

int cmd_eval(const Common & c, Context & ctx) {
    if (c.checkpoints.empty()) {
        throw ConfigError("eval needs at least one --checkpoint");
    }
    const Corpus corpus = open_corpus(ctx.cfg);
    std::optional<Corpus> second;
    if (!ctx.cfg.second_corpus.empty()) {
        second = load_corpus(ctx.cfg.resolve(ctx.cfg.second_corpus), ctx.cfg.split, ctx.cfg.seed);
    }
    std::vector<std::string> hashes;
    ojson results = ojson::array();
    std::vector<double> ppls;
    for (const auto & path : c.checkpoints) {
        const Checkpoint ckpt = load_checkpoint(path);
        hashes.push_back(checkpoint_hash(ckpt));
        const double ppl = eval_ppl(ckpt, corpus, Split::eval, ctx.cfg.eval_seq_len, ctx.cfg.eval_batch_size);
        ppls.push_back(ppl);
        ojson r = {{"checkpoint", path}, {"hash", hashes.back()}, {"eval_ppl", ppl}};
        ctx.out << "ppl " << path << " " << shortest(ppl);
        if (second) {
            const double p2 = eval_ppl(ckpt, *second, Split::eval, ctx.cfg.eval_seq_len, ctx.cfg.eval_batch_size);
            r["second_ppl"] = p2;
            ctx.out << " second " << shortest(p2);
        }
        ctx.out << "\n";
        results.push_back(r);
    }
    for (size_t i = 1; i < ppls.size(); ++i) {
        ctx.out << "ratio " << i << "/0 " << shortest(ppls[i] / ppls[0]) << "\n";
    }
    const std::string dir = run_dir(ctx, hashes);
    write_file(dir + "/eval.json", ojson({{"results", results}}).dump(2) + "\n");
    return 0;
}

std::string environment_note() {
    std::string note = "single process CPU";
#ifdef __VERSION__
    note += ", compiler " + std::string(__VERSION__);
#endif
    return note;
}

BenchReport run_bench(const RunConfig & cfg, const Checkpoint & ckpt, const std::string & model_id, const Corpus & corpus) {
    BenchReport r;
    r.model_id = model_id;
    r.model_hash = checkpoint_hash(ckpt);
    r.eval_corpus = corpus.name;
    r.eval_ppl = eval_ppl(ckpt, corpus, Split::eval, cfg.eval_seq_len, cfg.eval_batch_size);
    if (!cfg.second_corpus.empty()) {
        const Corpus second = load_corpus(cfg.resolve(cfg.second_corpus), cfg.split, cfg.seed);
        r.second_corpus = second.name;
        r.second_ppl = eval_ppl(ckpt, second, Split::eval, cfg.eval_seq_len, cfg.eval_batch_size);
    }
    r.kv_reference = cfg.kv_reference;
    r.kv_bytes = kv_bytes(ckpt, cfg.kv_reference.batch,
                          cfg.kv_reference.seq_len ? cfg.kv_reference.seq_len : ckpt.config.max_seq_len,
                          cfg.kv_reference.bytes_per_element);
    r.parameters = ckpt.parameter_count();
    r.run = cfg.generation;
    r.run.seed = cfg.seed;
    std::vector<GenerationTiming> runs;
    for (size_t i = 0; i < cfg.bench_runs; ++i) {
        std::unique_ptr<Clock> clock;
        if (cfg.fake_clock) {
            clock = std::make_unique<FakeClock>(1.0);
        } else {
            clock = std::make_unique<SteadyClock>();
        }
        runs.push_back(measure_generation(ckpt, r.run, *clock));
    }
    std::sort(runs.begin(), runs.end(), [](const auto & a, const auto & b) { return a.seconds < b.seconds; });
    const auto & median = runs[runs.size() / 2];
    r.latency_s = median.seconds;
    r.throughput = median.throughput;
    r.environment = environment_note() + (cfg.fake_clock ? ", fake clock" : "") + ", median of " +
                    std::to_string(cfg.bench_runs) + " runs";
    return r;
}

int cmd_bench(const Common & c, Context & ctx) {
    const std::string & path = single_checkpoint(c, "bench");
    const Checkpoint ckpt = load_checkpoint(path);
    const Corpus corpus = open_corpus(ctx.cfg);
    const BenchReport r = run_bench(ctx.cfg, ckpt, fs::path(path).filename().string(), corpus);
    const std::string dir = run_dir(ctx, {r.model_hash});
    emit_bench(r, dir);
    ctx.out << "bench " << dir << "/bench.json\n";
    ctx.out << "eval_ppl " << shortest(r.eval_ppl) << "\n";
    ctx.out << "kv_bytes " << r.kv_bytes << "\n";
    ctx.out << "latency_s " << shortest(r.latency_s) << "\n";
    ctx.out << "throughput " << shortest(r.throughput) << "\n";
    return 0;
}

int cmd_grid(const Common & c, Context & ctx) {
    const Corpus corpus = open_corpus(ctx.cfg);
    Checkpoint base;
    std::string dir;
    if (c.checkpoints.empty()) {
        dir = run_dir(ctx);
        // the dense model is a pure function of the config, so a previous training run can be reused
        const std::string ref = dir + "/dense.ref";
        bool loaded = false;
        if (fs::exists(ref)) {
            const std::string path = dir + "/" + read_file(ref);
            if (fs::exists(path)) {
                base = load_checkpoint(path);
                loaded = true;
                ctx.out << "base " << path << " (cached)\n";
            }
        }
        if (!loaded) {
            std::string path;
            base = train_dense(ctx, corpus, dir, &path);
            write_file(ref, fs::path(path).filename().string());
            ctx.out << "base " << path << "\n";
        }
    } else {
        base = load_checkpoint(single_checkpoint(c, "grid"));
        dir = run_dir(ctx, {checkpoint_hash(base)});
    }
    SteadyClock steady;
    FakeClock fake(0.0);
    Clock * clock = ctx.cfg.fake_clock ? static_cast<Clock *>(&fake) : &steady;
    const AblationGrid grid = run_ablation_grid(base, corpus, ctx.cfg.grid_config(), ctx.cfg.seed, clock);
    emit_grid(grid, dir);
    ctx.out << "grid " << dir << "/grid.json\n";
    ctx.out << "base_ppl " << shortest(grid.base_ppl) << "\n";
    for (const auto & cell : grid.cells) {
        ctx.out << cell.global << " " << cell.method << " p=" << shortest(cell.p_total);
        if (cell.error.empty()) {
            ctx.out << " pruned " << shortest(cell.pruned_ppl) << " recovered " << shortest(cell.recovered_ppl);
        } else {
            ctx.out << " error " << cell.error;
        }
        ctx.out << "\n";
    }
    for (const auto & n : grid.notes) {
        ctx.out << "note: " << n << "\n";
    }
    return 0;
}

std::string fixed(double v, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

int cmd_report(const Common & c, Context & ctx) {
    std::vector<std::string> dirs;
    if (c.checkpoints.empty()) {
        dirs.push_back(run_dir(ctx));
    } else {
        for (const auto & p : c.checkpoints) {
            dirs.push_back(run_dir(ctx, {checkpoint_hash(load_checkpoint(p))}));
        }
    }
    bool any = false;
    for (const auto & dir : dirs) {
        if (fs::exists(dir + "/grid.json")) {
            any = true;
            const ojson g = read_json(dir + "/grid.json", "grid");
            ctx.out << "## grid " << dir << "\n\n";
            ctx.out << "dense PPL " << fixed(g.at("base_ppl").get<double>(), 3) << "\n\n";
            ctx.out << "| global | method | P_total | pruned PPL | recovered PPL | kv_bytes |\n";
            ctx.out << "|---|---|---|---|---|---|\n";
            for (const auto & cell : g.at("cells")) {
                ctx.out << "| " << cell.at("global").get<std::string>() << " | " << cell.at("method").get<std::string>()
                        << " | " << fixed(cell.at("p_total").get<double>(), 2) << " | ";
                if (cell.at("error").get<std::string>().empty()) {
                    ctx.out << fixed(cell.at("pruned_ppl").get<double>(), 3) << " | "
                            << fixed(cell.at("recovered_ppl").get<double>(), 3) << " | "
                            << cell.at("kv_bytes").get<uint64_t>() << " |\n";
                } else {
                    ctx.out << "error | " << cell.at("error").get<std::string>() << " | |\n";
                }
            }
            ctx.out << "\n";
        }
        if (fs::exists(dir + "/bench.json")) {
            any = true;
            const BenchReport r = bench_report_from_json(read_json(dir + "/bench.json", "bench"));
            ctx.out << "## bench " << dir << "\n\n";
            ctx.out << "model " << r.model_id << " (" << r.model_hash << ")\n";
            ctx.out << "eval PPL " << fixed(r.eval_ppl, 3) << ", kv_bytes " << r.kv_bytes << ", parameters "
                    << r.parameters << "\n";
            ctx.out << "M=" << r.run.batch << " L=" << r.run.output_len << " T=" << shortest(r.latency_s)
                    << " s, throughput " << fixed(r.throughput, 2) << " tokens/s\n\n";
        }
    }
    if (!any) {
        throw IoError("no grid.json or bench.json under " + dirs.front());
    }
    return 0;
}

int cmd_config(Context & ctx, bool keys) {
    if (keys) {
        for (const auto & k : describe_keys()) {
            ctx.out << k.key << "  " << k.doc << "\n";
        }
        return 0;
    }
    ctx.out << ctx.cfg.canonical();
    ctx.out << "# run-id " << ctx.cfg.run_id() << "\n";
    return 0;
}

} // namespace

int run_cli(const std::vector<std::string> & args, std::ostream & out, std::ostream & err) {
    CLI::App app{"KV channel pruning pipeline for small decoder-only transformers", "kvprune"};
    app.require_subcommand(1);
    app.fallthrough();
    Common common;
    bool list_keys = false;

    auto add_common = [&](CLI::App * sub) {
        sub->add_option("-c,--config", common.config_path, "key = value config file");
        sub->add_option("-s,--set", common.overrides, "override a config key (key=value)");
        sub->add_option("--out", common.out, "report root (beats KVPRUNE_OUT and out_dir)");
    };
    auto * train = app.add_subcommand("train", "train the dense model");
    add_common(train);
    train->add_option("-o,--output", common.output, "also write the checkpoint here");
    auto * analyze = app.add_subcommand("analyze", "block sensitivity and pruning plan");
    add_common(analyze);
    analyze->add_option("--checkpoint", common.checkpoints)->required();
    auto * prune = app.add_subcommand("prune", "score channels, apply a plan, verify");
    add_common(prune);
    prune->add_option("--checkpoint", common.checkpoints)->required();
    prune->add_option("--plan", common.plan)->required();
    auto * finetune = app.add_subcommand("finetune", "low-rank recovery fine-tuning");
    add_common(finetune);
    finetune->add_option("--checkpoint", common.checkpoints)->required();
    auto * eval = app.add_subcommand("eval", "perplexity of one or more checkpoints");
    add_common(eval);
    eval->add_option("--checkpoint", common.checkpoints)->required();
    auto * bench = app.add_subcommand("bench", "perplexity, KV memory and generation throughput");
    add_common(bench);
    bench->add_option("--checkpoint", common.checkpoints)->required();
    auto * grid = app.add_subcommand("grid", "allocator x method x P_total ablation grid");
    add_common(grid);
    grid->add_option("--checkpoint", common.checkpoints, "base model (trained from the config when omitted)");
    auto * report = app.add_subcommand("report", "summarize grid.json and bench.json of a run");
    add_common(report);
    report->add_option("--checkpoint", common.checkpoints, "locate runs made with --checkpoint");
    auto * config = app.add_subcommand("config", "print the effective config and run-id");
    add_common(config);
    config->add_flag("--keys", list_keys, "list documented keys");

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp & e) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp & e) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError & e) {
        err << "usage error: " << e.what() << "\n" << app.help();
        return kExitUsage;
    }

    try {
        Context ctx = make_context(common, out, err);
        if (train->parsed()) return cmd_train(common, ctx);
        if (analyze->parsed()) return cmd_analyze(common, ctx);
        if (prune->parsed()) return cmd_prune(common, ctx);
        if (finetune->parsed()) return cmd_finetune(common, ctx);
        if (eval->parsed()) return cmd_eval(common, ctx);
        if (bench->parsed()) return cmd_bench(common, ctx);
        if (grid->parsed()) return cmd_grid(common, ctx);
        if (report->parsed()) return cmd_report(common, ctx);
        if (config->parsed()) return cmd_config(ctx, list_keys);
    } catch (const Error & e) {
        err << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception & e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    err << app.help();
    return kExitUsage;
}

} // namespace kvprune
