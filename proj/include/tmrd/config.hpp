#pragma once

#include <map>
#include <string>
#include <vector>

#include "tmrd/trainer.hpp"

namespace tmrd {

// Flat key=value text with '#' comments, e.g. "train.ema_alpha=0.999".
// Unknown keys and unparsable values are collected and reported together.
std::map<std::string, std::string> parse_kv_file(const std::string& path);
std::map<std::string, std::string> parse_kv_text(const std::string& text);

// Applies keys onto a default config. Throws listing every bad key/value.
TrainConfig config_from_kv(const std::map<std::string, std::string>& kv);
TrainConfig load_train_config(const std::string& path);

// Every addressable field, in fixed order, as written by serialize_config.
std::string serialize_config(const TrainConfig& cfg);

}  // namespace tmrd
