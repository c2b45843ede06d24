// makd: teacher pretraining, SVD factorization, multi-aspect distillation,
// evaluation, benchmarking and checkpoint inspection in one binary.
//
// Exit codes: 0 success, 2 usage error (unknown flag / bad value), 3 missing
// input file, 1 runtime failure. Errors are one line on stderr of the form
//   error: <category>: <message>
// Every artifact-producing subcommand writes a <artifact>.manifest.json with
// the merged effective configuration, inputs, outputs and wall time. Inputs
// are never modified.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "CLI11.hpp"

#include "makd/checkpoint.hpp"
#include "makd/data.hpp"
#include "makd/distill.hpp"
#include "makd/eval.hpp"
#include "makd/factorize.hpp"
#include "makd/model.hpp"
#include "makd/runconfig.hpp"
#include "makd/tensor.hpp"
#include "makd/tokenizer.hpp"
#include "makd/train.hpp"

namespace {

constexpr const char* kVersion = "0.1.0";

struct MissingFile : std::runtime_error {
  explicit MissingFile(const std::string& path) : std::runtime_error(path) {}
};

void require_file(const std::string& path) {
  if (!std::filesystem::exists(path)) throw MissingFile(path);
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_layers(const std::vector<int>& layers) {
  if (layers.empty()) return "none";
  std::string out;
  for (size_t i = 0; i < layers.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(layers[i]);
  }
  return out;
}

// Flags that shadow run-config keys: the config file is authoritative and
// each flag the user actually passed overrides its key.
struct KeyedFlags {
  std::vector<std::tuple<std::string, CLI::Option*, bool>> items;  // key, option, is_flag

  void option(CLI::App* cmd, const std::string& flag, const std::string& key, const std::string& desc) {
    items.emplace_back(key, cmd->add_option(flag)->description(desc), false);
  }
  void flag(CLI::App* cmd, const std::string& flag, const std::string& key, const std::string& desc) {
    items.emplace_back(key, cmd->add_flag(flag)->description(desc), true);
  }
  void merge_into(makd::RunConfig& rc) const {
    for (const auto& [key, opt, is_flag] : items) {
      if (opt->count() == 0) continue;
      rc.merge_override(key, is_flag ? "true" : opt->results().back());
    }
  }
};

makd::RunConfig merged_config(const std::string& config_path, const KeyedFlags& kv) {
  makd::RunConfig rc;
  if (!config_path.empty()) {
    require_file(config_path);
    rc = makd::RunConfig::from_file(config_path);
  }
  kv.merge_into(rc);
  return rc;
}

std::vector<std::string> concat_keys(std::initializer_list<const std::vector<std::string>*> lists) {
  std::vector<std::string> out;
  for (const auto* l : lists) out.insert(out.end(), l->begin(), l->end());
  return out;
}

// --resume points at the <checkpoint>.state file of a paused run; the model
// parameters reload from the checkpoint it sits next to.
std::string resume_checkpoint_path(const std::string& state_path) {
  const std::string suffix = ".state";
  if (state_path.size() <= suffix.size() ||
      state_path.compare(state_path.size() - suffix.size(), suffix.size(), suffix) != 0) {
    throw std::invalid_argument("--resume expects the '<checkpoint>.state' file of the paused run (got '" +
                                state_path + "')");
  }
  return state_path.substr(0, state_path.size() - suffix.size());
}

// Write back every resolved field so the manifest records the full effective
// configuration, defaults included.
void echo_model(makd::RunConfig& rc, const makd::ModelConfig& c) {
  rc.merge_override("model.kind", makd::kind_to_string(c.kind));
  rc.merge_override("model.layers", std::to_string(c.layers));
  rc.merge_override("model.hidden", std::to_string(c.hidden));
  rc.merge_override("model.ffn", std::to_string(c.ffn));
  rc.merge_override("model.heads", std::to_string(c.heads));
  rc.merge_override("model.vocab", std::to_string(c.vocab_size));
  rc.merge_override("model.max_seq", std::to_string(c.max_seq_len));
  rc.merge_override("model.tied_head", c.tied_head ? "true" : "false");
  rc.merge_override("model.gelu", c.gelu_kind == makd::GeluKind::Tanh ? "tanh" : "erf");
  rc.merge_override("model.ln_eps", fmt_double(c.ln_eps));
}

void echo_train(makd::RunConfig& rc, const makd::TrainConfig& c) {
  rc.merge_override("train.mode", makd::mode_to_string(c.mode));
  rc.merge_override("train.steps", std::to_string(c.steps));
  rc.merge_override("train.batch_size", std::to_string(c.batch_size));
  rc.merge_override("train.peak_lr", fmt_double(c.peak_lr));
  rc.merge_override("train.warmup_frac", fmt_double(c.warmup_frac));
  rc.merge_override("train.beta1", fmt_double(c.beta1));
  rc.merge_override("train.beta2", fmt_double(c.beta2));
  rc.merge_override("train.weight_decay", fmt_double(c.weight_decay));
  rc.merge_override("train.adam_eps", fmt_double(c.adam_eps));
  rc.merge_override("train.clip_norm", fmt_double(c.clip_norm));
  rc.merge_override("train.mask_rate", fmt_double(c.mask_rate));
  rc.merge_override("train.seed", std::to_string(c.seed));
  rc.merge_override("train.eval_interval", std::to_string(c.eval_interval));
  rc.merge_override("train.checkpoint_interval", std::to_string(c.checkpoint_interval));
  rc.merge_override("train.halt_after", std::to_string(c.halt_after));
}

void echo_plan(makd::RunConfig& rc, const makd::DistillPlan& p) {
  rc.merge_override("plan.matrix_layers", fmt_layers(p.matrix_layers));
  rc.merge_override("plan.layer_layers", fmt_layers(p.layer_layers));
  rc.merge_override("plan.use_model_loss", p.use_model_loss ? "true" : "false");
  rc.merge_override("plan.temperature", fmt_double(p.temperature));
  rc.merge_override("plan.w_matrix", fmt_double(p.w_matrix));
  rc.merge_override("plan.w_layer", fmt_double(p.w_layer));
  rc.merge_override("plan.w_model", fmt_double(p.w_model));
  rc.merge_override("plan.kl_epsilon", fmt_double(p.kl_epsilon));
  rc.merge_override("plan.allow_overlap", p.allow_overlap ? "true" : "false");
  rc.merge_override("plan.reverse_kl", p.reverse_kl ? "true" : "false");
  rc.merge_override("plan.t2_scale", p.t2_scale ? "true" : "false");
}

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

std::string join_argv(int argc, char** argv) {
  std::string out;
  for (int i = 0; i < argc; ++i) {
    if (i) out += ' ';
    out += argv[i];
  }
  return out;
}

std::string g_command_line;  // set once in main before dispatch

void emit_manifest(const makd::RunConfig& rc, uint64_t seed, std::vector<std::string> inputs,
                   std::vector<std::string> outputs, double wall_seconds, const std::string& path) {
  makd::RunManifest m;
  m.command = g_command_line;
  m.version = kVersion;
  m.seed = seed;
  m.effective_config = rc.values;
  m.inputs = std::move(inputs);
  m.outputs = std::move(outputs);
  m.wall_seconds = wall_seconds;
  makd::write_manifest(m, path);
}

void write_kv_report(const std::vector<std::pair<std::string, std::string>>& rows, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("report: cannot open '" + tmp + "' for writing");
    for (const auto& [k, v] : rows) out << k << "=" << v << "\n";
    if (!out) throw std::runtime_error("report: write to '" + tmp + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

// ---- pretrain-teacher ---------------------------------------------------

struct PretrainArgs {
  CLI::App* cmd = nullptr;
  std::string config_path, corpus, out, vocab_out, metrics, resume;
  KeyedFlags kv;
};

void setup_pretrain(CLI::App& app, PretrainArgs& a) {
  a.cmd = app.add_subcommand("pretrain-teacher", "Train a dense teacher on a plain-text corpus");
  a.cmd->add_option("--config", a.config_path, "Run-config file (model.*/train.*/data.* keys)");
  a.cmd->add_option("--corpus", a.corpus, "Corpus file, one document per line")->required();
  a.cmd->add_option("--out", a.out, "Output checkpoint path")->required();
  a.cmd->add_option("--vocab-out", a.vocab_out, "Tokenizer output path (default <out>.vocab)");
  a.cmd->add_option("--metrics", a.metrics, "Metrics log path (default <out>.metrics)");
  a.cmd->add_option("--resume", a.resume, "Optimizer-state file to resume from");
  a.kv.option(a.cmd, "--kind", "model.kind", "encoder-mlm | decoder-causal");
  a.kv.option(a.cmd, "--layers", "model.layers", "Transformer layers");
  a.kv.option(a.cmd, "--hidden", "model.hidden", "Hidden width d");
  a.kv.option(a.cmd, "--ffn", "model.ffn", "Feed-forward width d_f (default 4*hidden)");
  a.kv.option(a.cmd, "--heads", "model.heads", "Attention heads");
  a.kv.option(a.cmd, "--max-seq", "model.max_seq", "Maximum sequence length");
  a.kv.option(a.cmd, "--steps", "train.steps", "Optimization steps");
  a.kv.option(a.cmd, "--batch-size", "train.batch_size", "Sequences per step");
  a.kv.option(a.cmd, "--peak-lr", "train.peak_lr", "Peak learning rate");
  a.kv.option(a.cmd, "--mask-rate", "train.mask_rate", "MLM corruption rate (encoder)");
  a.kv.option(a.cmd, "--seed", "train.seed", "Run seed");
  a.kv.option(a.cmd, "--eval-interval", "train.eval_interval", "Steps between metric records");
  a.kv.option(a.cmd, "--checkpoint-interval", "train.checkpoint_interval", "Steps between snapshots (0 = end only)");
  a.kv.option(a.cmd, "--halt-after", "train.halt_after", "Pause after N steps, keeping the full lr schedule");
  a.kv.option(a.cmd, "--seq-len", "data.seq_len", "Training sequence length (default max_seq)");
  a.kv.option(a.cmd, "--vocab-size", "data.vocab_size", "Tokenizer vocabulary cap");
}

int run_pretrain(const PretrainArgs& a) {
  Timer timer;
  require_file(a.corpus);
  makd::RunConfig rc = merged_config(a.config_path, a.kv);
  rc.check_known(concat_keys({&makd::model_config_keys(), &makd::train_config_keys(), &makd::data_keys()}));

  const std::vector<std::string> docs = makd::read_corpus(a.corpus);
  const int vocab_cap = static_cast<int>(rc.get_int("data.vocab_size", 512));
  const makd::Tokenizer tok = makd::build_tokenizer(docs, vocab_cap);

  makd::ModelConfig mc = makd::model_config_from(rc);
  if (rc.has("model.vocab") && mc.vocab_size != tok.vocab_size()) {
    throw std::invalid_argument("pretrain-teacher: model.vocab " + std::to_string(mc.vocab_size) +
                                " does not match tokenizer vocabulary " + std::to_string(tok.vocab_size()) +
                                "; omit model.vocab, it is derived from the corpus");
  }
  mc.vocab_size = tok.vocab_size();
  mc.finalize();

  makd::TrainConfig tcfg = makd::train_config_from(rc);
  tcfg.mode = makd::TrainMode::TeacherPretrain;
  tcfg.validate();

  const int seq_len = static_cast<int>(rc.get_int("data.seq_len", mc.max_seq_len));
  const auto examples = makd::make_examples(tok, docs, seq_len);

  makd::TransformerModel model;
  if (!a.resume.empty()) {
    require_file(a.resume);
    const std::string prev = resume_checkpoint_path(a.resume);
    require_file(prev);
    model = makd::load_checkpoint(prev);
    if (model.config.vocab_size != tok.vocab_size()) {
      throw std::runtime_error("pretrain-teacher: resumed checkpoint vocabulary " +
                               std::to_string(model.config.vocab_size) + " does not match the corpus (" +
                               std::to_string(tok.vocab_size()) + ")");
    }
    mc = model.config;  // manifest records what actually trains
  } else {
    model = makd::init_model(mc, tcfg.seed);
  }
  const std::string vocab_out = a.vocab_out.empty() ? a.out + ".vocab" : a.vocab_out;
  const std::string metrics = a.metrics.empty() ? a.out + ".metrics" : a.metrics;
  makd::save_tokenizer(tok, vocab_out);

  makd::RunIO io{metrics, a.out, a.resume};
  const makd::TrainResult res = makd::pretrain(model, examples, tok, tcfg, io);

  echo_model(rc, mc);
  echo_train(rc, tcfg);
  rc.merge_override("data.seq_len", std::to_string(seq_len));
  rc.merge_override("data.vocab_size", std::to_string(vocab_cap));
  std::vector<std::string> inputs{a.corpus};
  if (!a.config_path.empty()) inputs.push_back(a.config_path);
  if (!a.resume.empty()) inputs.push_back(a.resume);
  emit_manifest(rc, tcfg.seed, inputs, {a.out, a.out + ".state", vocab_out, metrics}, timer.seconds(),
                a.out + ".manifest.json");

  std::cout << "pretrain-teacher: " << res.final_step << " steps, " << examples.size() << " examples, vocab "
            << tok.vocab_size() << ", checkpoint '" << a.out << "'\n";
  if (!res.metrics_lines.empty()) std::cout << res.metrics_lines.back() << "\n";
  return 0;
}

// ---- factorize ----------------------------------------------------------

struct FactorizeArgs {
  CLI::App* cmd = nullptr;
  std::string config_path, teacher, out, report;
  KeyedFlags kv;
};

void setup_factorize(CLI::App& app, FactorizeArgs& a) {
  a.cmd = app.add_subcommand("factorize", "SVD-truncate a dense teacher into a low-rank student");
  a.cmd->add_option("--config", a.config_path, "Run-config file (factorize.* keys)");
  a.cmd->add_option("--teacher", a.teacher, "Dense teacher checkpoint")->required();
  a.cmd->add_option("--out", a.out, "Output student checkpoint")->required();
  a.cmd->add_option("--report", a.report, "Compression report path (default <out>.report)");
  a.kv.option(a.cmd, "--rank", "factorize.rank", "Uniform preserved rank k for every projection");
  a.kv.option(a.cmd, "--rate", "factorize.rate", "Target teacher/student parameter ratio (> 1)");
  a.kv.option(a.cmd, "--rank-map", "factorize.rank_map", "Per-role ranks, e.g. 'wq=16,wk=16,wu=32'");
  a.kv.flag(a.cmd, "--factorize-embeddings", "factorize.embeddings", "Also factorize the token embedding");
}

int run_factorize(const FactorizeArgs& a) {
  Timer timer;
  require_file(a.teacher);
  makd::RunConfig rc = merged_config(a.config_path, a.kv);
  rc.check_known(makd::factorization_keys());
  const makd::FactorizationSpec spec = makd::factorization_spec_from(rc);
  if (rc.has("factorize.rank") && spec.uniform_rank < 1) {
    throw std::invalid_argument("factorize: rank must be at least 1 (got " +
                                std::to_string(spec.uniform_rank) + "); the upper bound is min(n, m) per matrix");
  }

  const makd::TransformerModel teacher = makd::load_checkpoint(a.teacher);
  const makd::TransformerModel student = makd::build_student(teacher, spec);
  makd::save_checkpoint(student, a.out);
  const makd::CompressionReport rep = makd::compression_report(teacher, student);

  // Human-readable table.
  std::cout << std::left << std::setw(16) << "matrix" << std::right << std::setw(6) << "n" << std::setw(6)
            << "m" << std::setw(6) << "k" << std::setw(12) << "dense" << std::setw(12) << "factored"
            << std::setw(13) << "frob_err" << std::setw(10) << "energy" << "\n";
  for (const auto& m : rep.matrices) {
    std::cout << std::left << std::setw(16) << m.name << std::right << std::setw(6) << m.n << std::setw(6)
              << m.m << std::setw(6) << m.k << std::setw(12) << m.dense_params << std::setw(12)
              << m.factorized_params << std::setw(13) << std::scientific << std::setprecision(3)
              << m.truncation_error << std::fixed << std::setprecision(4) << std::setw(10)
              << m.retained_energy << "\n";
  }
  std::cout << "params: teacher " << rep.teacher_params << ", student " << rep.student_params << ", ratio "
            << std::setprecision(3) << rep.param_ratio << "x\n";
  std::cout << "linear MACs/token: teacher " << rep.teacher_linear_macs << ", student "
            << rep.student_linear_macs << ", ratio " << std::setprecision(3) << rep.macs_ratio << "x\n";
  if (rep.expands) std::cout << "warning: factorization does not reduce compute (k > nm/(n+m))\n";

  const std::string report = a.report.empty() ? a.out + ".report" : a.report;
  std::vector<std::pair<std::string, std::string>> rows;
  rows.emplace_back("teacher_params", std::to_string(rep.teacher_params));
  rows.emplace_back("student_params", std::to_string(rep.student_params));
  rows.emplace_back("param_ratio", fmt_double(rep.param_ratio));
  rows.emplace_back("teacher_linear_macs_per_token", std::to_string(rep.teacher_linear_macs));
  rows.emplace_back("student_linear_macs_per_token", std::to_string(rep.student_linear_macs));
  rows.emplace_back("macs_ratio", fmt_double(rep.macs_ratio));
  rows.emplace_back("expands", rep.expands ? "true" : "false");
  for (const auto& m : rep.matrices) {
    const std::string p = "matrix." + m.name + ".";
    rows.emplace_back(p + "n", std::to_string(m.n));
    rows.emplace_back(p + "m", std::to_string(m.m));
    rows.emplace_back(p + "k", std::to_string(m.k));
    rows.emplace_back(p + "dense_params", std::to_string(m.dense_params));
    rows.emplace_back(p + "factorized_params", std::to_string(m.factorized_params));
    rows.emplace_back(p + "truncation_error", fmt_double(m.truncation_error));
    rows.emplace_back(p + "retained_energy", fmt_double(m.retained_energy));
  }
  write_kv_report(rows, report);

  std::vector<std::string> inputs{a.teacher};
  if (!a.config_path.empty()) inputs.push_back(a.config_path);
  emit_manifest(rc, 0, inputs, {a.out, report}, timer.seconds(), a.out + ".manifest.json");
  return 0;
}

// ---- distill ------------------------------------------------------------

struct DistillArgs {
  CLI::App* cmd = nullptr;
  std::string config_path, teacher, corpus, vocab, out, metrics, resume;
  std::string student_init = "svd";
  KeyedFlags kv;
};

void setup_distill(CLI::App& app, DistillArgs& a) {
  a.cmd = app.add_subcommand("distill", "Train a factorized student against a frozen teacher");
  a.cmd->add_option("--config", a.config_path, "Run-config file (train.*/plan.*/factorize.*/data.* keys)");
  a.cmd->add_option("--teacher", a.teacher, "Dense teacher checkpoint")->required();
  a.cmd->add_option("--corpus", a.corpus, "Corpus file, one document per line")->required();
  a.cmd->add_option("--vocab", a.vocab, "Tokenizer file (default <teacher>.vocab)");
  a.cmd->add_option("--out", a.out, "Output student checkpoint")->required();
  a.cmd->add_option("--metrics", a.metrics, "Metrics log path (default <out>.metrics)");
  a.cmd->add_option("--resume", a.resume, "Optimizer-state file to resume from");
  a.cmd->add_option("--student-init", a.student_init, "svd (teacher factors) | random")
      ->check(CLI::IsMember({"svd", "random"}));
  a.kv.option(a.cmd, "--mode", "train.mode", "distill-makd | distill-logit-only");
  a.kv.option(a.cmd, "--steps", "train.steps", "Optimization steps");
  a.kv.option(a.cmd, "--batch-size", "train.batch_size", "Sequences per step");
  a.kv.option(a.cmd, "--peak-lr", "train.peak_lr", "Peak learning rate");
  a.kv.option(a.cmd, "--mask-rate", "train.mask_rate", "MLM corruption rate (encoder)");
  a.kv.option(a.cmd, "--seed", "train.seed", "Run seed");
  a.kv.option(a.cmd, "--eval-interval", "train.eval_interval", "Steps between metric records");
  a.kv.option(a.cmd, "--checkpoint-interval", "train.checkpoint_interval", "Steps between snapshots (0 = end only)");
  a.kv.option(a.cmd, "--halt-after", "train.halt_after", "Pause after N steps, keeping the full lr schedule");
  a.kv.option(a.cmd, "--rank", "factorize.rank", "Uniform preserved rank k");
  a.kv.option(a.cmd, "--rate", "factorize.rate", "Target parameter ratio (> 1)");
  a.kv.option(a.cmd, "--rank-map", "factorize.rank_map", "Per-role ranks, e.g. 'wq=16,wu=32'");
  a.kv.flag(a.cmd, "--factorize-embeddings", "factorize.embeddings", "Also factorize the token embedding");
  a.kv.option(a.cmd, "--matrix-layers", "plan.matrix_layers", "Layers under matrix-aspect loss, e.g. '1-2' or 'none'");
  a.kv.option(a.cmd, "--layer-layers", "plan.layer_layers", "Layers under layer-aspect loss, e.g. '3-4'");
  a.kv.option(a.cmd, "--use-model-loss", "plan.use_model_loss", "Include the soft-logit model loss (true/false)");
  a.kv.option(a.cmd, "--temperature", "plan.temperature", "Model-loss softmax temperature");
  a.kv.flag(a.cmd, "--allow-overlap", "plan.allow_overlap", "Permit a layer in both aspect sets");
  a.kv.option(a.cmd, "--seq-len", "data.seq_len", "Training sequence length (default teacher max_seq)");
}

int run_distill(const DistillArgs& a) {
  Timer timer;
  require_file(a.teacher);
  require_file(a.corpus);
  const std::string vocab = a.vocab.empty() ? a.teacher + ".vocab" : a.vocab;
  require_file(vocab);
  if (!a.resume.empty()) require_file(a.resume);

  makd::RunConfig rc = merged_config(a.config_path, a.kv);
  rc.check_known(concat_keys({&makd::train_config_keys(), &makd::plan_keys(), &makd::factorization_keys(),
                              &makd::data_keys()}));

  makd::TrainConfig tcfg = makd::train_config_from(rc);
  if (!rc.has("train.mode")) {
    tcfg.mode = makd::TrainMode::DistillMakd;
  } else if (tcfg.mode == makd::TrainMode::TeacherPretrain) {
    throw std::invalid_argument("distill: train.mode must be distill-makd or distill-logit-only");
  }
  tcfg.validate();

  const makd::Tokenizer tok = makd::load_tokenizer(vocab);
  const makd::TransformerModel teacher = makd::load_checkpoint(a.teacher);
  if (teacher.config.vocab_size != tok.vocab_size()) {
    throw std::runtime_error("distill: teacher vocabulary " + std::to_string(teacher.config.vocab_size) +
                             " does not match tokenizer '" + vocab + "' (" +
                             std::to_string(tok.vocab_size()) + ")");
  }

  const makd::FactorizationSpec spec = makd::factorization_spec_from(rc);
  makd::DistillPlan plan = makd::plan_from(rc, teacher.config.layers);
  if (tcfg.mode == makd::TrainMode::DistillLogitOnly) {
    plan.matrix_layers.clear();
    plan.layer_layers.clear();
    plan.use_model_loss = true;
  }

  makd::TransformerModel student;
  if (!a.resume.empty()) {
    const std::string prev = resume_checkpoint_path(a.resume);
    require_file(prev);
    student = makd::load_checkpoint(prev);
    if (student.config.vocab_size != teacher.config.vocab_size) {
      throw std::runtime_error("distill: resumed student vocabulary " +
                               std::to_string(student.config.vocab_size) + " does not match the teacher (" +
                               std::to_string(teacher.config.vocab_size) + ")");
    }
  } else if (a.student_init == "svd") {
    student = makd::build_student(teacher, spec);
  } else {
    makd::ModelConfig smc = teacher.config;
    smc.rank_map = spec.resolve(teacher.config);
    smc.finalize();
    student = makd::init_model(smc, tcfg.seed);
  }

  const std::vector<std::string> docs = makd::read_corpus(a.corpus);
  const int seq_len = static_cast<int>(rc.get_int("data.seq_len", teacher.config.max_seq_len));
  const auto examples = makd::make_examples(tok, docs, seq_len);

  const std::string metrics = a.metrics.empty() ? a.out + ".metrics" : a.metrics;
  makd::RunIO io{metrics, a.out, a.resume};
  const makd::TrainResult res = makd::distill_run(teacher, student, examples, tok, plan, tcfg, io);

  echo_train(rc, tcfg);
  echo_plan(rc, plan);
  rc.merge_override("data.seq_len", std::to_string(seq_len));
  rc.merge_override("student_init", a.student_init);
  std::vector<std::string> inputs{a.teacher, a.corpus, vocab};
  if (!a.config_path.empty()) inputs.push_back(a.config_path);
  if (!a.resume.empty()) inputs.push_back(a.resume);
  emit_manifest(rc, tcfg.seed, inputs, {a.out, a.out + ".state", metrics}, timer.seconds(),
                a.out + ".manifest.json");

  std::cout << "distill: " << res.final_step << " steps (" << makd::mode_to_string(tcfg.mode) << ", "
            << plan.describe() << "), student '" << a.out << "'\n";
  if (!res.metrics_lines.empty()) std::cout << res.metrics_lines.back() << "\n";
  return 0;
}

// ---- eval ---------------------------------------------------------------

struct EvalArgs {
  CLI::App* cmd = nullptr;
  std::string model, teacher, data, vocab, report;
  int seq_len = 0;       // 0: model max_seq
  int batch_size = 8;
  int max_new = 16;
  int max_prompts = 64;
  double mask_rate = 0.15;
  uint64_t seed = 42;
};

void setup_eval(CLI::App& app, EvalArgs& a) {
  a.cmd = app.add_subcommand("eval", "Held-out accuracy, teacher agreement, and generation overlap");
  a.cmd->add_option("--model", a.model, "Checkpoint to evaluate")->required();
  a.cmd->add_option("--teacher", a.teacher, "Reference checkpoint for agreement / generation overlap");
  a.cmd->add_option("--data", a.data, "Evaluation corpus, one document per line")->required();
  a.cmd->add_option("--vocab", a.vocab, "Tokenizer file")->required();
  a.cmd->add_option("--report", a.report, "Report output path")->required();
  a.cmd->add_option("--seq-len", a.seq_len, "Sequence length (default model max_seq)");
  a.cmd->add_option("--batch-size", a.batch_size, "Sequences per evaluation batch");
  a.cmd->add_option("--max-new", a.max_new, "Greedy-decoded continuation length (decoder)");
  a.cmd->add_option("--max-prompts", a.max_prompts, "Documents to decode (decoder)");
  a.cmd->add_option("--mask-rate", a.mask_rate, "MLM corruption rate (encoder)");
  a.cmd->add_option("--seed", a.seed, "Masking seed");
}

std::vector<int> strip_special(const std::vector<int>& ids) {
  std::vector<int> out;
  for (int id : ids) {
    if (id >= makd::Tokenizer::kNumSpecial) out.push_back(id);
  }
  return out;
}

int run_eval(const EvalArgs& a) {
  Timer timer;
  require_file(a.model);
  require_file(a.data);
  require_file(a.vocab);
  if (!a.teacher.empty()) require_file(a.teacher);

  const makd::Tokenizer tok = makd::load_tokenizer(a.vocab);
  const makd::TransformerModel model = makd::load_checkpoint(a.model);
  if (model.config.vocab_size != tok.vocab_size()) {
    throw std::runtime_error("eval: model vocabulary " + std::to_string(model.config.vocab_size) +
                             " does not match tokenizer (" + std::to_string(tok.vocab_size()) + ")");
  }
  const std::vector<std::string> docs = makd::read_corpus(a.data);
  const int seq_len = a.seq_len > 0 ? a.seq_len : model.config.max_seq_len;
  const auto examples = makd::make_examples(tok, docs, seq_len);

  std::vector<std::pair<std::string, std::string>> rows;
  rows.emplace_back("model", a.model);
  rows.emplace_back("examples", std::to_string(examples.size()));
  rows.emplace_back("seq_len", std::to_string(seq_len));
  rows.emplace_back("seed", std::to_string(a.seed));

  if (model.config.kind == makd::ModelKind::EncoderMlm) {
    std::vector<size_t> order(examples.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::vector<makd::Batch> batches;
    for (size_t begin = 0; begin < examples.size(); begin += static_cast<size_t>(a.batch_size)) {
      const int bs = static_cast<int>(std::min<size_t>(a.batch_size, examples.size() - begin));
      makd::Batch b = makd::make_batch(examples, order, begin, bs);
      batches.push_back(makd::mlm_mask(b, tok, a.mask_rate,
                                       makd::Rng::derive(a.seed, 0x6576616c, static_cast<uint64_t>(begin))));
    }
    const double acc = makd::masked_accuracy(model, batches);
    rows.emplace_back("mask_rate", fmt_double(a.mask_rate));
    rows.emplace_back("masked_accuracy", fmt_double(acc));
    std::cout << "masked_accuracy=" << fmt_double(acc) << "\n";
    if (!a.teacher.empty()) {
      const makd::TransformerModel teacher = makd::load_checkpoint(a.teacher);
      const makd::AgreementReport ar = makd::agreement(model, teacher, batches);
      rows.emplace_back("logit_kl", fmt_double(ar.logit_kl));
      rows.emplace_back("top1_agreement", fmt_double(ar.top1_agreement));
      for (size_t l = 0; l < ar.attn_kl.size(); ++l) {
        rows.emplace_back("attn_kl.layer" + std::to_string(l), fmt_double(ar.attn_kl[l]));
      }
      std::cout << "logit_kl=" << fmt_double(ar.logit_kl) << " top1_agreement=" << fmt_double(ar.top1_agreement)
                << "\n";
    }
  } else {
    // Decoder: greedy-decode a continuation per document and score its
    // Rouge-L overlap against the teacher's greedy continuation (or the
    // document's own tail when no teacher is given).
    std::unique_ptr<makd::TransformerModel> teacher;
    if (!a.teacher.empty()) {
      teacher = std::make_unique<makd::TransformerModel>(makd::load_checkpoint(a.teacher));
    }
    double p_sum = 0.0, r_sum = 0.0, f_sum = 0.0;
    int scored = 0, skipped = 0;
    const int limit = std::min<int>(a.max_prompts, static_cast<int>(docs.size()));
    for (int d = 0; d < limit; ++d) {
      const std::vector<int> ids = tok.encode(docs[static_cast<size_t>(d)]);
      if (ids.size() < 2) {
        ++skipped;
        continue;
      }
      const size_t cut = std::min<size_t>((ids.size() + 1) / 2,
                                          static_cast<size_t>(model.config.max_seq_len / 2));
      std::vector<int> prompt{makd::Tokenizer::kBos};
      prompt.insert(prompt.end(), ids.begin(), ids.begin() + static_cast<long>(cut));
      const std::vector<int> out = makd::greedy_decode(model, prompt, a.max_new);
      const std::vector<int> cand =
          strip_special(std::vector<int>(out.begin() + static_cast<long>(prompt.size()), out.end()));
      std::vector<int> ref;
      if (teacher) {
        const std::vector<int> tout = makd::greedy_decode(*teacher, prompt, a.max_new);
        ref = strip_special(std::vector<int>(tout.begin() + static_cast<long>(prompt.size()), tout.end()));
      } else {
        ref = strip_special(std::vector<int>(ids.begin() + static_cast<long>(cut), ids.end()));
      }
      if (ref.empty()) {
        ++skipped;
        continue;
      }
      const makd::RougeScore rs = makd::rouge_l(cand, ref);
      p_sum += rs.precision;
      r_sum += rs.recall;
      f_sum += rs.f;
      ++scored;
    }
    if (scored == 0) throw std::runtime_error("eval: no scorable prompts in '" + a.data + "'");
    const double inv = 1.0 / scored;
    rows.emplace_back("reference", teacher ? "teacher-greedy" : "corpus-tail");
    rows.emplace_back("prompts", std::to_string(scored));
    rows.emplace_back("prompts_skipped", std::to_string(skipped));
    rows.emplace_back("rouge_l_precision", fmt_double(p_sum * inv));
    rows.emplace_back("rouge_l_recall", fmt_double(r_sum * inv));
    rows.emplace_back("rouge_l_f", fmt_double(f_sum * inv));
    std::cout << "rouge_l_f=" << fmt_double(f_sum * inv) << " over " << scored << " prompts\n";
  }

  write_kv_report(rows, a.report);
  makd::RunConfig rc;
  for (const auto& [k, v] : rows) rc.merge_override(k, v);
  std::vector<std::string> inputs{a.model, a.data, a.vocab};
  if (!a.teacher.empty()) inputs.push_back(a.teacher);
  emit_manifest(rc, a.seed, inputs, {a.report}, timer.seconds(), a.report + ".manifest.json");
  return 0;
}

// ---- bench --------------------------------------------------------------

struct BenchArgs {
  CLI::App* cmd = nullptr;
  std::string model, report;
  int seq_len = 32;
  int reps = 5;
};

void setup_bench(CLI::App& app, BenchArgs& a) {
  a.cmd = app.add_subcommand("bench", "Forward-pass throughput and analytic MAC counts");
  a.cmd->add_option("--model", a.model, "Checkpoint to benchmark")->required();
  a.cmd->add_option("--seq-len", a.seq_len, "Benchmark sequence length");
  a.cmd->add_option("--reps", a.reps, "Timed repetitions (median reported)");
  a.cmd->add_option("--report", a.report, "Optional report output path");
}

int run_bench(const BenchArgs& a) {
  Timer timer;
  require_file(a.model);
  const makd::TransformerModel model = makd::load_checkpoint(a.model);
  const makd::ThroughputReport r = makd::throughput_bench(model, a.seq_len, a.reps);
  std::cout << "model=" << a.model << " kind=" << makd::kind_to_string(model.config.kind)
            << " layers=" << model.config.layers << " hidden=" << model.config.hidden << "\n";
  std::cout << "seq_len=" << r.seq_len << " reps=" << r.repetitions << "\n";
  std::cout << "median_forward_seconds=" << fmt_double(r.median_forward_seconds) << "\n";
  std::cout << "tokens_per_sec=" << fmt_double(r.tokens_per_sec) << "\n";
  std::cout << "linear_macs_per_token=" << r.linear_macs_per_token << "\n";
  if (!a.report.empty()) {
    std::vector<std::pair<std::string, std::string>> rows;
    rows.emplace_back("model", a.model);
    rows.emplace_back("seq_len", std::to_string(r.seq_len));
    rows.emplace_back("reps", std::to_string(r.repetitions));
    rows.emplace_back("median_forward_seconds", fmt_double(r.median_forward_seconds));
    rows.emplace_back("tokens_per_sec", fmt_double(r.tokens_per_sec));
    rows.emplace_back("linear_macs_per_token", std::to_string(r.linear_macs_per_token));
    write_kv_report(rows, a.report);
    makd::RunConfig rc;
    for (const auto& [k, v] : rows) rc.merge_override(k, v);
    emit_manifest(rc, 0, {a.model}, {a.report}, timer.seconds(), a.report + ".manifest.json");
  }
  return 0;
}

// ---- inspect ------------------------------------------------------------

struct InspectArgs {
  CLI::App* cmd = nullptr;
  std::string ckpt;
  int trace_seq = 16;
  bool tensors = false;
};

void setup_inspect(CLI::App& app, InspectArgs& a) {
  a.cmd = app.add_subcommand("inspect", "Dump a checkpoint's config, parameter counts, and trace shapes");
  a.cmd->add_option("checkpoint", a.ckpt, "Checkpoint path")->required();
  a.cmd->add_option("--trace-seq", a.trace_seq, "Sequence length for the activation-shape listing");
  a.cmd->add_flag("--tensors", a.tensors, "List every stored tensor with its shape");
}

int run_inspect(const InspectArgs& a) {
  require_file(a.ckpt);
  const makd::CheckpointInfo info = makd::read_checkpoint_info(a.ckpt);
  const makd::ModelConfig& c = info.config;
  std::cout << "kind=" << makd::kind_to_string(c.kind) << " layers=" << c.layers << " hidden=" << c.hidden
            << " ffn=" << c.ffn << " heads=" << c.heads << " head_dim=" << c.head_dim()
            << " vocab=" << c.vocab_size << " max_seq=" << c.max_seq_len
            << " tied_head=" << (c.tied_head ? "true" : "false") << "\n";
  if (!c.rank_map.empty()) {
    std::cout << "ranks:";
    for (const auto& [role, k] : c.rank_map) std::cout << " " << role << "=" << k;
    std::cout << "\n";
  }
  std::cout << "parameters=" << info.total_params << "\n";
  const int t = a.trace_seq;
  std::cout << "trace shapes at seq_len=" << t << ":\n";
  std::cout << "  input_hidden [" << t << " x " << c.hidden << "]\n";
  std::cout << "  per layer: q,k,v [" << t << " x " << c.head_dim() << "] per head (" << c.heads
            << " heads); attn [" << t << " x " << t << "] per head; mha_out [" << t << " x " << c.hidden
            << "]; ffn_up [" << t << " x " << c.ffn << "]; ffn_down [" << t << " x " << c.hidden
            << "]; hidden [" << t << " x " << c.hidden << "]\n";
  std::cout << "  logits [" << t << " x " << c.vocab_size << "]\n";
  if (a.tensors) {
    for (const auto& e : info.manifest) {
      std::cout << "tensor " << e.name << " [";
      for (size_t i = 0; i < e.shape.size(); ++i) std::cout << (i ? " x " : "") << e.shape[i];
      std::cout << "] numel=" << e.numel << "\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"makd: low-rank transformer distillation toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  g_command_line = join_argv(argc, argv);

  PretrainArgs pretrain_args;
  FactorizeArgs factorize_args;
  DistillArgs distill_args;
  EvalArgs eval_args;
  BenchArgs bench_args;
  InspectArgs inspect_args;
  setup_pretrain(app, pretrain_args);
  setup_factorize(app, factorize_args);
  setup_distill(app, distill_args);
  setup_eval(app, eval_args);
  setup_bench(app, bench_args);
  setup_inspect(app, inspect_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    std::cerr << app.help();
    return 2;
  }

  try {
    if (pretrain_args.cmd->parsed()) return run_pretrain(pretrain_args);
    if (factorize_args.cmd->parsed()) return run_factorize(factorize_args);
    if (distill_args.cmd->parsed()) return run_distill(distill_args);
    if (eval_args.cmd->parsed()) return run_eval(eval_args);
    if (bench_args.cmd->parsed()) return run_bench(bench_args);
    if (inspect_args.cmd->parsed()) return run_inspect(inspect_args);
  } catch (const MissingFile& e) {
    std::cerr << "error: missing-file: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: runtime: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "error: usage: no subcommand\n";
  return 2;
}
