#pragma once

#include "kvprune/model.hpp"

#include <nlohmann/json.hpp>

#include <string>

namespace kvprune {

// Insertion-ordered JSON keeps emitted files byte-stable.
using ojson = nlohmann::ordered_json;

ojson to_json(const ModelConfig & c);
ModelConfig model_config_from_json(const ojson & j);

ojson to_json(const TrainingMeta & m);
TrainingMeta training_meta_from_json(const ojson & j);

// 17 significant digits; round-trips any finite double.
std::string format_double(double v);

} // namespace kvprune
