#include "kvprune/json_io.hpp"

#include <cstdio>

namespace kvprune {

ojson to_json(const ModelConfig & c) {
    ojson j;
    j["vocab_size"] = c.vocab_size;
    j["d_model"] = c.d_model;
    j["n_blocks"] = c.n_blocks;
    j["n_heads"] = c.n_heads;
    j["base_head_dim"] = c.base_head_dim;
    j["ffn_hidden"] = c.ffn_hidden;
    j["max_seq_len"] = c.max_seq_len;
    j["attention_scale_mode"] = scale_mode_name(c.scale_mode);
    return j;
}

ModelConfig model_config_from_json(const ojson & j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<size_t>();
    c.d_model = j.at("d_model").get<size_t>();
    c.n_blocks = j.at("n_blocks").get<size_t>();
    c.n_heads = j.at("n_heads").get<size_t>();
    c.base_head_dim = j.at("base_head_dim").get<size_t>();
    c.ffn_hidden = j.at("ffn_hidden").get<size_t>();
    c.max_seq_len = j.at("max_seq_len").get<size_t>();
    c.scale_mode = scale_mode_from_name(j.at("attention_scale_mode").get<std::string>());
    return c;
}

ojson to_json(const TrainingMeta & m) {
    ojson j;
    j["steps"] = m.steps;
    j["seed"] = m.seed;
    j["final_loss"] = m.final_loss;
    j["note"] = m.note;
    return j;
}

TrainingMeta training_meta_from_json(const ojson & j) {
    TrainingMeta m;
    m.steps = j.at("steps").get<uint64_t>();
    m.seed = j.at("seed").get<uint64_t>();
    m.final_loss = j.at("final_loss").get<double>();
    m.note = j.value("note", std::string());
    return m;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace kvprune
