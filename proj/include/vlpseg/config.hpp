#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vlpseg/backbones.hpp"
#include "vlpseg/episodes.hpp"
#include "vlpseg/errors.hpp"
#include "vlpseg/trainer.hpp"
#include "vlpseg/vlp_encoder.hpp"

namespace vlpseg {

// Flat dotted-key configuration: "key = value" lines, '#' comments. Flags
// override file values; VLPSEG_SEED fills any *.seed key no one set. Every
// run writes its resolved config next to its outputs.
class RunConfig {
 public:
  RunConfig() {
    for (const auto& [k, v] : schema()) values_[k] = v;
  }

  static const std::map<std::string, std::string>& schema() {
    static const std::map<std::string, std::string> s = {
        {"backbone.kind", "toy-oracle"},
        {"backbone.seed", "7"},
        {"backbone.patch_size", "8"},
        {"backbone.c_vlm", "32"},
        {"backbone.c_sam", "64"},
        {"model.n_queries", "50"},
        {"model.c", "64"},
        {"model.heads", "8"},
        {"model.mode", "with-text"},
        {"data.classes", "20"},
        {"data.image_size", "64"},
        {"data.max_distractors", "2"},
        {"data.manifest", ""},
        {"train.learning_rate", "1e-4"},
        {"train.weight_decay", "1e-2"},
        {"train.clip_norm", "1.0"},
        {"train.batch_size", "8"},
        {"train.epochs", "20"},
        {"train.episodes_per_epoch", "512"},
        {"train.fold", "0"},
        {"train.seed", "1"},
        {"train.eval_interval", "0"},
        {"train.eval_pairs", "50"},
        {"eval.n_pairs", "1000"},
        {"eval.seed", "1234"},
        {"eval.workers", "1"},
    };
    return s;
  }

  void load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config " + path.string() + ": line " + std::to_string(lineno) +
                          ": expected 'key = value'");
      set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
    }
  }

  void set(const std::string& key, const std::string& value) {
    if (!schema().count(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
    explicit_.insert(key);
  }

  void apply_env_seed_fallback() {
    const char* env = std::getenv("VLPSEG_SEED");
    if (!env) return;
    for (const auto& [k, v] : schema())
      if (k.size() > 5 && k.substr(k.size() - 5) == ".seed" && !explicit_.count(k)) values_[k] = env;
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  int get_int(const std::string& key) const {
    try {
      return std::stoi(get(key));
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': expected integer, got '" + get(key) + "'");
    }
  }

  std::uint64_t get_u64(const std::string& key) const {
    try {
      return std::stoull(get(key));
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': expected unsigned integer, got '" + get(key) + "'");
    }
  }

  double get_double(const std::string& key) const {
    try {
      return std::stod(get(key));
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': expected number, got '" + get(key) + "'");
    }
  }

  BackboneConfig backbone_config() const {
    BackboneConfig bc;
    bc.kind = get("backbone.kind");
    bc.seed = get_u64("backbone.seed");
    bc.patch_size = get_int("backbone.patch_size");
    bc.c_vlm = get_int("backbone.c_vlm");
    bc.c_sam = get_int("backbone.c_sam");
    bc.n_classes = get_int("data.classes");
    return bc;
  }

  ModelConfig model_config() const {
    ModelConfig mc;
    mc.n_queries = get_int("model.n_queries");
    mc.c = get_int("model.c");
    mc.heads = get_int("model.heads");
    mc.mode = parse_mode(get("model.mode"));
    return mc;
  }

  TrainConfig train_config() const {
    TrainConfig tc;
    tc.learning_rate = get_double("train.learning_rate");
    tc.weight_decay = get_double("train.weight_decay");
    tc.clip_norm = get_double("train.clip_norm");
    tc.batch_size = get_int("train.batch_size");
    tc.epochs = get_int("train.epochs");
    tc.episodes_per_epoch = get_int("train.episodes_per_epoch");
    tc.fold_index = get_int("train.fold");
    tc.seed = get_u64("train.seed");
    tc.eval_interval = get_int("train.eval_interval");
    tc.eval_pairs = get_int("train.eval_pairs");
    return tc;
  }

  GeneratorParams generator_params() const {
    GeneratorParams gp;
    gp.image_size = get_int("data.image_size");
    gp.max_distractors = get_int("data.max_distractors");
    return gp;
  }

  std::map<std::string, std::string> snapshot() const { return values_; }

  void write_resolved(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write resolved config: " + path.string());
    out << "# resolved vlpseg configuration\n";
    for (const auto& [k, v] : values_) out << k << " = " << v << "\n";
  }

 private:
  static std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  std::map<std::string, std::string> values_;
  std::set<std::string> explicit_;
};

}  // namespace vlpseg
