#include "kvprune/config.hpp"

#include "kvprune/checkpoint_io.hpp"
#include "kvprune/errors.hpp"
#include "kvprune/json_io.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>

namespace kvprune {

namespace {

std::string trim(const std::string & s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string & s) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, ',')) {
        cur = trim(cur);
        if (!cur.empty()) {
            out.push_back(cur);
        }
    }
    return out;
}

template <typename T>
T parse_unsigned(const std::string & key, const std::string & v) {
    T out{};
    const auto * end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end) {
        throw ConfigError("key '" + key + "' expects a non-negative integer, got '" + v + "'");
    }
    return out;
}

double parse_double(const std::string & key, const std::string & v) {
    try {
        size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) {
            throw std::invalid_argument(v);
        }
        return d;
    } catch (const std::exception &) {
        throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
    }
}

bool parse_bool(const std::string & key, const std::string & v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("key '" + key + "' expects true or false, got '" + v + "'");
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

std::string join(const std::vector<std::string> & v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        out += (i ? "," : "") + v[i];
    }
    return out;
}

struct Field {
    std::string doc;
    std::function<void(RunConfig &, const std::string &, const std::string &)> set;
    std::function<std::string(const RunConfig &)> get;
};

template <typename T>
Field uint_field(std::string doc, T RunConfig::*outer) {
    return {std::move(doc), [outer](RunConfig & c, const std::string & k, const std::string & v) {
                c.*outer = parse_unsigned<T>(k, v);
            },
            [outer](const RunConfig & c) { return std::to_string(c.*outer); }};
}

// Accessor-based fields for nested structs.
template <typename Get>
Field size_ref(std::string doc, Get ref) {
    return {std::move(doc),
            [ref](RunConfig & c, const std::string & k, const std::string & v) {
                auto & dst = ref(c);
                dst = parse_unsigned<std::remove_reference_t<decltype(dst)>>(k, v);
            },
            [ref](const RunConfig & c) { return std::to_string(ref(const_cast<RunConfig &>(c))); }};
}

template <typename Get>
Field double_ref(std::string doc, Get ref) {
    return {std::move(doc),
            [ref](RunConfig & c, const std::string & k, const std::string & v) { ref(c) = parse_double(k, v); },
            [ref](const RunConfig & c) { return format_double(ref(const_cast<RunConfig &>(c))); }};
}

template <typename Get>
Field bool_ref(std::string doc, Get ref) {
    return {std::move(doc),
            [ref](RunConfig & c, const std::string & k, const std::string & v) { ref(c) = parse_bool(k, v); },
            [ref](const RunConfig & c) { return fmt_bool(ref(const_cast<RunConfig &>(c))); }};
}

template <typename Get>
Field string_ref(std::string doc, Get ref) {
    return {std::move(doc), [ref](RunConfig & c, const std::string &, const std::string & v) { ref(c) = v; },
            [ref](const RunConfig & c) { return ref(const_cast<RunConfig &>(c)); }};
}

const std::map<std::string, Field> & fields() {
    static const std::map<std::string, Field> f = [] {
        std::map<std::string, Field> m;
        m["corpus"] = string_ref("path of the training/eval text", [](RunConfig & c) -> std::string & { return c.corpus; });
        m["second_corpus"] = string_ref("optional second eval text, empty to skip",
                                        [](RunConfig & c) -> std::string & { return c.second_corpus; });
        m["split.train"] = double_ref("train fraction", [](RunConfig & c) -> double & { return c.split.train; });
        m["split.calibration"] =
            double_ref("calibration fraction", [](RunConfig & c) -> double & { return c.split.calibration; });
        m["split.eval"] = double_ref("eval fraction", [](RunConfig & c) -> double & { return c.split.eval; });
        m["seed"] = uint_field("seed for splits, init, batching and adapters", &RunConfig::seed);
        m["out_dir"] = string_ref("report root, overridden by KVPRUNE_OUT",
                                  [](RunConfig & c) -> std::string & { return c.out_dir; });

        m["model.d_model"] = size_ref("residual width", [](RunConfig & c) -> size_t & { return c.model.d_model; });
        m["model.n_blocks"] = size_ref("decoder blocks", [](RunConfig & c) -> size_t & { return c.model.n_blocks; });
        m["model.n_heads"] = size_ref("attention heads", [](RunConfig & c) -> size_t & { return c.model.n_heads; });
        m["model.base_head_dim"] =
            size_ref("channels per head before pruning", [](RunConfig & c) -> size_t & { return c.model.base_head_dim; });
        m["model.ffn_hidden"] = size_ref("FFN width", [](RunConfig & c) -> size_t & { return c.model.ffn_hidden; });
        m["model.max_seq_len"] =
            size_ref("context length", [](RunConfig & c) -> size_t & { return c.model.max_seq_len; });
        m["model.scale_mode"] = {"fixed-original | recomputed",
                                 [](RunConfig & c, const std::string &, const std::string & v) {
                                     c.model.scale_mode = scale_mode_from_name(v);
                                 },
                                 [](const RunConfig & c) { return std::string(scale_mode_name(c.model.scale_mode)); }};

        m["train.steps"] = size_ref("optimizer steps", [](RunConfig & c) -> size_t & { return c.train.steps; });
        m["train.lr"] = double_ref("peak learning rate", [](RunConfig & c) -> double & { return c.train.lr; });
        m["train.batch_size"] = size_ref("sequences per step", [](RunConfig & c) -> size_t & { return c.train.batch_size; });
        m["train.seq_len"] = size_ref("tokens per sequence", [](RunConfig & c) -> size_t & { return c.train.seq_len; });
        m["train.warmup_steps"] =
            size_ref("linear warmup steps", [](RunConfig & c) -> size_t & { return c.train.warmup_steps; });
        m["train.grad_clip"] = double_ref("global gradient norm clip, 0 disables",
                                          [](RunConfig & c) -> double & { return c.train.grad_clip; });

        m["analyze.screening_batches"] =
            size_ref("calibration batches for block sensitivity", [](RunConfig & c) -> size_t & { return c.screening_batches; });
        m["analyze.calibration_batches"] =
            size_ref("calibration batches for Taylor gradients", [](RunConfig & c) -> size_t & { return c.calibration_batches; });
        m["analyze.batch_size"] = size_ref("sequences per calibration batch",
                                           [](RunConfig & c) -> size_t & { return c.calibration_batch_size; });
        m["analyze.seq_len"] =
            size_ref("calibration sequence length", [](RunConfig & c) -> size_t & { return c.calibration_seq_len; });

        m["prune.allocator"] = {"uniform | ppl-based | rank-based",
                                [](RunConfig & c, const std::string &, const std::string & v) {
                                    c.allocator = allocator_from_name(v);
                                },
                                [](const RunConfig & c) { return std::string(allocator_name(c.allocator)); }};
        m["prune.p_total"] = double_ref("global KV channel pruning ratio", [](RunConfig & c) -> double & { return c.p_total; });
        m["prune.epsilon"] = double_ref("ppl-based allocator epsilon", [](RunConfig & c) -> double & { return c.epsilon; });
        m["prune.method"] = string_ref("l1 | l2 | taylor", [](RunConfig & c) -> std::string & { return c.method; });
        m["prune.rank_order"] = string_ref("delta-ppl | block-index, for the rank-based allocator",
                                           [](RunConfig & c) -> std::string & { return c.rank_order; });

        m["adapter.rank"] = size_ref("LoRA rank", [](RunConfig & c) -> size_t & { return c.adapter.rank; });
        m["adapter.alpha"] = double_ref("LoRA alpha", [](RunConfig & c) -> double & { return c.adapter.alpha; });
        m["adapter.targets"] = {"comma list of wq,wk,wv,wo,w_up,w_down",
                                [](RunConfig & c, const std::string & k, const std::string & v) {
                                    c.adapter.targets.clear();
                                    for (const auto & t : split_list(v)) {
                                        try {
                                            c.adapter.targets.push_back(proj_from_name(t));
                                        } catch (const Error &) {
                                            throw ConfigError("key '" + k + "' has unknown target '" + t + "'");
                                        }
                                    }
                                },
                                [](const RunConfig & c) {
                                    std::vector<std::string> names;
                                    for (Proj p : c.adapter.targets) {
                                        names.emplace_back(proj_name(p));
                                    }
                                    return join(names);
                                }};
        m["finetune.steps"] = size_ref("recovery steps", [](RunConfig & c) -> size_t & { return c.recover.steps; });
        m["finetune.lr"] = double_ref("recovery learning rate", [](RunConfig & c) -> double & { return c.recover.lr; });
        m["finetune.batch_size"] =
            size_ref("recovery sequences per step", [](RunConfig & c) -> size_t & { return c.recover.batch_size; });
        m["finetune.seq_len"] = size_ref("recovery sequence length", [](RunConfig & c) -> size_t & { return c.recover.seq_len; });
        m["finetune.full"] = bool_ref("train all weights instead of adapters",
                                      [](RunConfig & c) -> bool & { return c.full_finetune; });

        m["eval.seq_len"] = size_ref("PPL window length", [](RunConfig & c) -> size_t & { return c.eval_seq_len; });
        m["eval.batch_size"] = size_ref("PPL windows per forward", [](RunConfig & c) -> size_t & { return c.eval_batch_size; });

        m["bench.batch"] = size_ref("sequences generated together (M)",
                                    [](RunConfig & c) -> size_t & { return c.generation.batch; });
        m["bench.prompt_len"] = size_ref("prompt tokens", [](RunConfig & c) -> size_t & { return c.generation.prompt_len; });
        m["bench.output_len"] =
            size_ref("generated tokens (L)", [](RunConfig & c) -> size_t & { return c.generation.output_len; });
        m["bench.warmup"] = size_ref("untimed warmup generations", [](RunConfig & c) -> size_t & { return c.generation.warmup; });
        m["bench.use_cache"] = bool_ref("KV-cached decoding", [](RunConfig & c) -> bool & { return c.generation.use_cache; });
        m["bench.runs"] = size_ref("timed runs, the median is reported", [](RunConfig & c) -> size_t & { return c.bench_runs; });
        m["bench.bytes_per_element"] = size_ref("KV element size for memory accounting",
                                                [](RunConfig & c) -> size_t & { return c.kv_reference.bytes_per_element; });
        m["bench.kv_batch"] =
            size_ref("batch of the KV memory reference shape", [](RunConfig & c) -> size_t & { return c.kv_reference.batch; });
        m["bench.kv_seq_len"] = size_ref("sequence length of the KV memory reference shape, 0 = max_seq_len",
                                         [](RunConfig & c) -> size_t & { return c.kv_reference.seq_len; });
        m["bench.fake_clock"] = bool_ref("deterministic fake timing (tests)", [](RunConfig & c) -> bool & { return c.fake_clock; });

        m["grid.p_totals"] = {"comma list of P_total values",
                              [](RunConfig & c, const std::string & k, const std::string & v) {
                                  c.grid_p_totals.clear();
                                  for (const auto & t : split_list(v)) {
                                      c.grid_p_totals.push_back(parse_double(k, t));
                                  }
                              },
                              [](const RunConfig & c) {
                                  std::vector<std::string> s;
                                  for (double p : c.grid_p_totals) {
                                      s.push_back(format_double(p));
                                  }
                                  return join(s);
                              }};
        m["grid.globals"] = {"comma list of uniform,ppl-based",
                             [](RunConfig & c, const std::string &, const std::string & v) { c.grid_globals = split_list(v); },
                             [](const RunConfig & c) { return join(c.grid_globals); }};
        m["grid.methods"] = {"comma list of 01,l1,l2,taylor",
                             [](RunConfig & c, const std::string &, const std::string & v) { c.grid_methods = split_list(v); },
                             [](const RunConfig & c) { return join(c.grid_methods); }};
        m["grid.parallel"] = bool_ref("run cells concurrently (no cell timing)",
                                      [](RunConfig & c) -> bool & { return c.grid_parallel; });
        return m;
    }();
    return f;
}

const Field & field(const std::string & key) {
    const auto & f = fields();
    auto it = f.find(key);
    if (it == f.end()) {
        throw ConfigError("unknown key '" + key + "'");
    }
    return it->second;
}

} // namespace

void RunConfig::set(const std::string & key, const std::string & value) {
    const auto & f = field(key);
    try {
        f.set(*this, key, value);
    } catch (const ConfigError &) {
        throw;
    } catch (const Error & e) {
        throw ConfigError("key '" + key + "': " + e.what());
    }
}

std::string RunConfig::get(const std::string & key) const { return field(key).get(*this); }

std::string RunConfig::canonical() const {
    std::string out;
    for (const auto & [k, f] : fields()) {
        if (k == "out_dir") {
            continue; // where reports go does not change what they contain
        }
        out += k + " = " + f.get(*this) + "\n";
    }
    return out;
}

std::string RunConfig::run_id() const { return content_hash(canonical()); }

void RunConfig::validate() const {
    try {
        model.validate();
    } catch (const ConfigError &) {
        throw;
    } catch (const Error & e) {
        throw ConfigError(e.what());
    }
    if (corpus.empty()) {
        throw ConfigError("corpus path is empty");
    }
    if (p_total < 0.0 || p_total > 1.0) {
        throw ConfigError("prune.p_total must be in [0, 1]");
    }
    method_from_name(method);
    if (rank_order != "delta-ppl" && rank_order != "block-index") {
        throw ConfigError("prune.rank_order must be delta-ppl or block-index");
    }
    for (double p : grid_p_totals) {
        if (p < 0.0 || p > 1.0) {
            throw ConfigError("grid.p_totals entries must be in [0, 1]");
        }
    }
    for (const auto & g : grid_globals) {
        if (g != "uniform" && g != "ppl-based") {
            throw ConfigError("grid.globals entry '" + g + "' is not uniform or ppl-based");
        }
    }
    for (const auto & m : grid_methods) {
        if (m != "01" && m != "l1" && m != "l2" && m != "taylor") {
            throw ConfigError("grid.methods entry '" + m + "' is not 01, l1, l2 or taylor");
        }
    }
    if (adapter.rank == 0) {
        throw ConfigError("adapter.rank must be >= 1");
    }
    if (bench_runs == 0) {
        throw ConfigError("bench.runs must be >= 1");
    }
}

GridConfig RunConfig::grid_config() const {
    GridConfig g;
    g.p_totals = grid_p_totals;
    g.globals = grid_globals;
    g.methods = grid_methods;
    g.epsilon = epsilon;
    g.screening_batches = screening_batches;
    g.calibration_batches = calibration_batches;
    g.calibration_batch_size = calibration_batch_size;
    g.seq_len = calibration_seq_len;
    g.eval_seq_len = eval_seq_len;
    g.eval_batch_size = eval_batch_size;
    g.adapter = adapter;
    g.adapter.seed = seed;
    g.recover = recover;
    g.recover.seed = seed;
    g.kv_reference = kv_reference;
    g.parallel = grid_parallel;
    return g;
}

const std::vector<KeyDoc> & describe_keys() {
    static const std::vector<KeyDoc> docs = [] {
        std::vector<KeyDoc> d;
        for (const auto & [k, f] : fields()) {
            d.push_back({k, f.doc});
        }
        return d;
    }();
    return docs;
}

RunConfig parse_config(const std::string & text, RunConfig base) {
    std::istringstream is(text);
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.resize(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        }
        base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return base;
}

RunConfig load_config(const std::string & path) {
    RunConfig c = parse_config(read_file(path));
    c.base_dir = std::filesystem::path(path).parent_path().string();
    return c;
}

std::string RunConfig::resolve(const std::string & path) const {
    const std::filesystem::path p(path);
    if (path.empty() || p.is_absolute() || base_dir.empty()) {
        return path;
    }
    return (std::filesystem::path(base_dir) / p).lexically_normal().string();
}

void apply_override(RunConfig & cfg, const std::string & assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("override '" + assignment + "' is not key=value");
    }
    cfg.set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

} // namespace kvprune
