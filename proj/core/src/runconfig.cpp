#include "makd/runconfig.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace makd {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* want) {
  throw std::invalid_argument("config: key '" + key + "' has value '" + value + "', expected " + want);
}

}  // namespace

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
  RunConfig rc;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("config: '" + path + "' line " + std::to_string(lineno) +
                               " is not 'key = value'");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty()) {
      throw std::runtime_error("config: '" + path + "' line " + std::to_string(lineno) + " has an empty key");
    }
    rc.values[key] = value;
  }
  return rc;
}

std::string RunConfig::get_str(const std::string& key, const std::string& fallback) const {
  auto it = values.find(key);
  return it == values.end() ? fallback : it->second;
}

int64_t RunConfig::get_int(const std::string& key, int64_t fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  try {
    size_t pos = 0;
    const int64_t v = std::stoll(it->second, &pos);
    if (pos != it->second.size()) bad_value(key, it->second, "an integer");
    return v;
  } catch (const std::invalid_argument&) {
    bad_value(key, it->second, "an integer");
  } catch (const std::out_of_range&) {
    bad_value(key, it->second, "an integer in range");
  }
}

double RunConfig::get_double(const std::string& key, double fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  try {
    size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) bad_value(key, it->second, "a number");
    return v;
  } catch (const std::invalid_argument&) {
    bad_value(key, it->second, "a number");
  } catch (const std::out_of_range&) {
    bad_value(key, it->second, "a number in range");
  }
}

bool RunConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  const std::string& v = it->second;
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  bad_value(key, v, "a boolean");
}

uint64_t RunConfig::get_u64(const std::string& key, uint64_t fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  try {
    size_t pos = 0;
    const uint64_t v = std::stoull(it->second, &pos);
    if (pos != it->second.size()) bad_value(key, it->second, "an unsigned integer");
    return v;
  } catch (const std::invalid_argument&) {
    bad_value(key, it->second, "an unsigned integer");
  } catch (const std::out_of_range&) {
    bad_value(key, it->second, "an unsigned integer in range");
  }
}

std::vector<int> RunConfig::get_layer_set(const std::string& key, const std::vector<int>& fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  const std::string& v = it->second;
  if (v == "none" || v.empty()) return {};
  std::vector<int> out;
  std::istringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (part.empty()) continue;
    const size_t dash = part.find('-');
    try {
      if (dash == std::string::npos) {
        out.push_back(std::stoi(part));
      } else {
        const int lo = std::stoi(part.substr(0, dash));
        const int hi = std::stoi(part.substr(dash + 1));
        if (hi < lo) bad_value(key, v, "ascending ranges");
        for (int l = lo; l <= hi; ++l) out.push_back(l);
      }
    } catch (const std::invalid_argument&) {
      bad_value(key, v, "layer indices like '1-4' or '1,3'");
    } catch (const std::out_of_range&) {
      bad_value(key, v, "layer indices in range");
    }
  }
  return out;
}

void RunConfig::check_known(const std::vector<std::string>& allowed) const {
  for (const auto& [key, value] : values) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw std::invalid_argument("config: unknown key '" + key + "'");
    }
  }
}

// ---- typed views --------------------------------------------------------

ModelConfig model_config_from(const RunConfig& rc) {
  ModelConfig c;
  c.kind = kind_from_string(rc.get_str("model.kind", kind_to_string(c.kind)));
  c.layers = static_cast<int>(rc.get_int("model.layers", c.layers));
  c.hidden = static_cast<int>(rc.get_int("model.hidden", c.hidden));
  c.ffn = static_cast<int>(rc.get_int("model.ffn", c.ffn));
  c.heads = static_cast<int>(rc.get_int("model.heads", c.heads));
  c.vocab_size = static_cast<int>(rc.get_int("model.vocab", c.vocab_size));
  c.max_seq_len = static_cast<int>(rc.get_int("model.max_seq", c.max_seq_len));
  c.tied_head = rc.get_bool("model.tied_head", c.tied_head);
  const std::string gelu = rc.get_str("model.gelu", "tanh");
  if (gelu != "tanh" && gelu != "erf") bad_value("model.gelu", gelu, "'tanh' or 'erf'");
  c.gelu_kind = gelu == "tanh" ? GeluKind::Tanh : GeluKind::Erf;
  c.ln_eps = rc.get_double("model.ln_eps", c.ln_eps);
  return c;
}

TrainConfig train_config_from(const RunConfig& rc) {
  TrainConfig c;
  c.mode = mode_from_string(rc.get_str("train.mode", mode_to_string(c.mode)));
  c.steps = rc.get_int("train.steps", c.steps);
  c.batch_size = static_cast<int>(rc.get_int("train.batch_size", c.batch_size));
  c.peak_lr = rc.get_double("train.peak_lr", c.peak_lr);
  c.warmup_frac = rc.get_double("train.warmup_frac", c.warmup_frac);
  c.beta1 = rc.get_double("train.beta1", c.beta1);
  c.beta2 = rc.get_double("train.beta2", c.beta2);
  c.weight_decay = rc.get_double("train.weight_decay", c.weight_decay);
  c.adam_eps = rc.get_double("train.adam_eps", c.adam_eps);
  c.clip_norm = rc.get_double("train.clip_norm", c.clip_norm);
  c.mask_rate = rc.get_double("train.mask_rate", c.mask_rate);
  c.seed = rc.get_u64("train.seed", c.seed);
  c.eval_interval = rc.get_int("train.eval_interval", c.eval_interval);
  c.checkpoint_interval = rc.get_int("train.checkpoint_interval", c.checkpoint_interval);
  c.halt_after = rc.get_int("train.halt_after", c.halt_after);
  return c;
}

DistillPlan plan_from(const RunConfig& rc, int num_layers) {
  DistillPlan plan = assign_aspects(num_layers);
  plan.matrix_layers = rc.get_layer_set("plan.matrix_layers", plan.matrix_layers);
  plan.layer_layers = rc.get_layer_set("plan.layer_layers", plan.layer_layers);
  plan.use_model_loss = rc.get_bool("plan.use_model_loss", plan.use_model_loss);
  plan.temperature = rc.get_double("plan.temperature", plan.temperature);
  plan.w_matrix = rc.get_double("plan.w_matrix", plan.w_matrix);
  plan.w_layer = rc.get_double("plan.w_layer", plan.w_layer);
  plan.w_model = rc.get_double("plan.w_model", plan.w_model);
  plan.kl_epsilon = rc.get_double("plan.kl_epsilon", plan.kl_epsilon);
  plan.allow_overlap = rc.get_bool("plan.allow_overlap", plan.allow_overlap);
  plan.reverse_kl = rc.get_bool("plan.reverse_kl", plan.reverse_kl);
  plan.t2_scale = rc.get_bool("plan.t2_scale", plan.t2_scale);
  plan.validate(num_layers);
  return plan;
}

FactorizationSpec factorization_spec_from(const RunConfig& rc) {
  FactorizationSpec spec;
  spec.uniform_rank = static_cast<int>(rc.get_int("factorize.rank", 0));
  spec.target_rate = rc.get_double("factorize.rate", 0.0);
  spec.factorize_embeddings = rc.get_bool("factorize.embeddings", false);
  const std::string map_str = rc.get_str("factorize.rank_map", "");
  if (!map_str.empty()) {
    std::istringstream ss(map_str);
    std::string part;
    while (std::getline(ss, part, ',')) {
      part = trim(part);
      if (part.empty()) continue;
      const size_t eq = part.find('=');
      if (eq == std::string::npos) bad_value("factorize.rank_map", map_str, "entries like 'wq=16'");
      try {
        spec.rank_map[trim(part.substr(0, eq))] = std::stoi(part.substr(eq + 1));
      } catch (const std::exception&) {
        bad_value("factorize.rank_map", map_str, "entries like 'wq=16'");
      }
    }
  }
  return spec;
}

const std::vector<std::string>& model_config_keys() {
  static const std::vector<std::string> keys = {
      "model.kind",  "model.layers",    "model.heads", "model.hidden", "model.ffn",
      "model.vocab", "model.tied_head", "model.gelu",  "model.ln_eps", "model.max_seq"};
  return keys;
}

const std::vector<std::string>& train_config_keys() {
  static const std::vector<std::string> keys = {
      "train.mode",       "train.steps",       "train.batch_size",   "train.peak_lr",
      "train.warmup_frac", "train.beta1",      "train.beta2",        "train.weight_decay",
      "train.adam_eps",   "train.clip_norm",   "train.mask_rate",    "train.seed",
      "train.eval_interval", "train.checkpoint_interval", "train.halt_after"};
  return keys;
}

const std::vector<std::string>& plan_keys() {
  static const std::vector<std::string> keys = {
      "plan.matrix_layers", "plan.layer_layers", "plan.use_model_loss", "plan.temperature",
      "plan.w_matrix",      "plan.w_layer",      "plan.w_model",        "plan.kl_epsilon",
      "plan.allow_overlap", "plan.reverse_kl",   "plan.t2_scale"};
  return keys;
}

const std::vector<std::string>& factorization_keys() {
  static const std::vector<std::string> keys = {"factorize.rank", "factorize.rate", "factorize.rank_map",
                                                "factorize.embeddings"};
  return keys;
}

const std::vector<std::string>& data_keys() {
  static const std::vector<std::string> keys = {"data.corpus", "data.seq_len", "data.vocab_size",
                                                "data.holdout_frac"};
  return keys;
}

void write_manifest(const RunManifest& m, const std::string& path) {
  nlohmann::json j;
  j["command"] = m.command;
  j["version"] = m.version;
  j["seed"] = m.seed;
  j["config"] = m.effective_config;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  j["wall_seconds"] = m.wall_seconds;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("manifest: cannot open '" + tmp + "' for writing");
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("manifest: write to '" + tmp + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace makd
