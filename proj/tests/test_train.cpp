#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "makd/checkpoint.hpp"
#include "makd/data.hpp"
#include "makd/factorize.hpp"
#include "makd/model.hpp"
#include "makd/tokenizer.hpp"
#include "makd/train.hpp"
#include "oracles.hpp"

using makd::AdamState;
using makd::ModelConfig;
using makd::ModelKind;
using makd::ParamRef;
using makd::Tensor;
using makd::TrainConfig;
using makd::TrainMode;
using makd::TransformerModel;

namespace {

std::string tmp_path(const std::string& stem) {
  return (std::filesystem::temp_directory_path() / stem).string();
}

ModelConfig small_config(ModelKind kind, int vocab) {
  ModelConfig c;
  c.kind = kind;
  c.layers = 2;
  c.hidden = 8;
  c.ffn = 16;
  c.heads = 2;
  c.vocab_size = vocab;
  c.max_seq_len = 16;
  c.finalize();
  return c;
}

TrainConfig fast_cfg(int64_t steps) {
  TrainConfig cfg;
  cfg.steps = steps;
  cfg.batch_size = 4;
  cfg.peak_lr = 3e-3;
  cfg.eval_interval = 10;
  cfg.seed = 5;
  return cfg;
}

double param_diff(const TransformerModel& a, const TransformerModel& b) {
  const auto pa = makd::parameters(a);
  const auto pb = makd::parameters(b);
  REQUIRE(pa.size() == pb.size());
  double worst = 0.0;
  for (size_t i = 0; i < pa.size(); ++i) {
    worst = std::max(worst, makd::max_abs_diff(*pa[i].tensor, *pb[i].tensor));
  }
  return worst;
}

}  // namespace

TEST_CASE("train modes round trip through their names") {
  for (TrainMode m : {TrainMode::TeacherPretrain, TrainMode::DistillMakd, TrainMode::DistillLogitOnly}) {
    CHECK(makd::mode_from_string(makd::mode_to_string(m)) == m);
  }
  CHECK_THROWS(makd::mode_from_string("finetune"));
}

TEST_CASE("train config validation rejects each bad knob") {
  TrainConfig ok;
  CHECK_NOTHROW(ok.validate());
  auto expect_throw = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    CHECK_THROWS(c.validate());
  };
  expect_throw([](TrainConfig& c) { c.steps = 0; });
  expect_throw([](TrainConfig& c) { c.batch_size = 0; });
  expect_throw([](TrainConfig& c) { c.peak_lr = -1e-3; });
  expect_throw([](TrainConfig& c) { c.warmup_frac = 1.0; });
  expect_throw([](TrainConfig& c) { c.beta1 = 1.0; });
  expect_throw([](TrainConfig& c) { c.beta2 = -0.1; });
  expect_throw([](TrainConfig& c) { c.adam_eps = 0.0; });
  expect_throw([](TrainConfig& c) { c.weight_decay = -0.01; });
  expect_throw([](TrainConfig& c) { c.clip_norm = -1.0; });
  expect_throw([](TrainConfig& c) { c.mask_rate = 0.0; });
  expect_throw([](TrainConfig& c) { c.mask_rate = 1.0; });
  expect_throw([](TrainConfig& c) { c.eval_interval = 0; });
  expect_throw([](TrainConfig& c) { c.checkpoint_interval = -1; });
  expect_throw([](TrainConfig& c) { c.halt_after = -1; });
}

TEST_CASE("learning rate warms up linearly then decays to zero") {
  TrainConfig cfg;
  cfg.steps = 100;
  cfg.warmup_frac = 0.1;
  cfg.peak_lr = 2e-3;
  CHECK(makd::lr_at(cfg, 0) == doctest::Approx(2e-4).epsilon(1e-12));
  CHECK(makd::lr_at(cfg, 9) == doctest::Approx(2e-3).epsilon(1e-12));   // last warmup step
  CHECK(makd::lr_at(cfg, 10) == doctest::Approx(2e-3).epsilon(1e-12));  // decay starts at peak
  CHECK(makd::lr_at(cfg, 55) == doctest::Approx(2e-3 * 45.0 / 90.0).epsilon(1e-12));
  CHECK(makd::lr_at(cfg, 99) == doctest::Approx(2e-3 / 90.0).epsilon(1e-12));
  for (int64_t s = 1; s < 100; ++s) {
    if (s < 10) CHECK(makd::lr_at(cfg, s) > makd::lr_at(cfg, s - 1));
    if (s > 10) CHECK(makd::lr_at(cfg, s) < makd::lr_at(cfg, s - 1));
  }
  // zero warmup fraction still spends one step warming up
  TrainConfig flat;
  flat.steps = 10;
  flat.warmup_frac = 0.0;
  flat.peak_lr = 1e-3;
  CHECK(makd::lr_at(flat, 0) == doctest::Approx(1e-3).epsilon(1e-12));
}

TEST_CASE("adamw tracks the scalar oracle on a quadratic bowl") {
  for (double wd : {0.0, 0.05}) {
    TrainConfig cfg;
    cfg.weight_decay = wd;
    Tensor p({1}, {10.0});
    std::vector<ParamRef> params{{"p", &p}};
    AdamState state;
    oracle::AdamScalar ref;
    double p_ref = 10.0;
    for (int s = 0; s < 5; ++s) {
      const double g = p.values()[0] - 3.0;  // d/dp of (p-3)^2/2
      const double g_ref = p_ref - 3.0;
      makd::adamw_step(params, {Tensor({1}, {g})}, state, 0.1, cfg);
      p_ref = ref.step(p_ref, g_ref, 0.1, cfg.beta1, cfg.beta2, cfg.adam_eps, wd);
      CHECK(p.values()[0] == doctest::Approx(p_ref).epsilon(1e-12));
    }
    CHECK(state.step == 5);
    // five steps of descent moved p toward the minimum
    CHECK(std::fabs(p.values()[0] - 3.0) < 7.0);
  }
}

TEST_CASE("adamw rejects mismatched inputs and names the bad gradient") {
  Tensor a = Tensor::zeros({2, 2});
  Tensor b = Tensor::zeros({3});
  std::vector<ParamRef> params{{"layer0.wq.weight", &a}, {"layer0.wq.bias", &b}};
  AdamState state;
  TrainConfig cfg;
  CHECK_THROWS(makd::adamw_step(params, {Tensor::zeros({2, 2})}, state, 0.1, cfg));  // count
  CHECK_THROWS(makd::adamw_step(params, {Tensor::zeros({2, 2}), Tensor::zeros({4})}, state, 0.1, cfg));

  Tensor bad = Tensor::zeros({3});
  bad.mut()[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(makd::adamw_step(params, {Tensor::zeros({2, 2}), bad}, state, 0.1, cfg),
                       doctest::Contains("layer0.wq.bias"), std::runtime_error);

  // state primed for a different parameter count
  makd::adamw_step(params, {Tensor::zeros({2, 2}), Tensor::zeros({3})}, state, 0.1, cfg);
  std::vector<ParamRef> fewer{{"p", &a}};
  CHECK_THROWS(makd::adamw_step(fewer, {Tensor::zeros({2, 2})}, state, 0.1, cfg));
}

TEST_CASE("gradient clipping caps the global norm and reports the raw one") {
  std::vector<Tensor> grads{Tensor({2}, {3.0, 0.0}), Tensor({1}, {4.0})};  // norm 5
  CHECK(makd::clip_gradients(grads, 2.5) == doctest::Approx(5.0).epsilon(1e-12));
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double x : g.values()) sq += x * x;
  CHECK(std::sqrt(sq) == doctest::Approx(2.5).epsilon(1e-12));
  CHECK(grads[0].values()[0] == doctest::Approx(1.5).epsilon(1e-12));

  std::vector<Tensor> small{Tensor({1}, {0.6}), Tensor({1}, {0.8})};  // norm 1
  CHECK(makd::clip_gradients(small, 2.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(small[0].values()[0] == 0.6);  // untouched below the cap

  std::vector<Tensor> free{Tensor({1}, {30.0})};
  CHECK(makd::clip_gradients(free, 0.0) == doctest::Approx(30.0).epsilon(1e-12));
  CHECK(free[0].values()[0] == 30.0);  // zero cap disables clipping
}

TEST_CASE("optimizer state files round trip and police identity") {
  TransformerModel m = makd::init_model(small_config(ModelKind::EncoderMlm, 11), 3);
  std::vector<ParamRef> params = makd::parameters(m);
  AdamState state;
  // three real steps so the moments are nonzero
  for (int s = 0; s < 3; ++s) {
    std::vector<Tensor> grads;
    makd::Rng rng(static_cast<uint64_t>(s) + 1);
    for (const ParamRef& p : params) grads.push_back(makd::random_normal(p.tensor->shape(), rng, 0.01));
    makd::adamw_step(params, grads, state, 1e-3, TrainConfig{});
  }
  const std::string p = tmp_path("makd_state_test.bin");
  makd::save_train_state(state, params, 42, p);
  const AdamState back = makd::load_train_state(p, params, 42);
  CHECK(back.step == 3);
  REQUIRE(back.m.size() == params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    CHECK(makd::max_abs_diff(back.m[i], state.m[i]) == 0.0);
    CHECK(makd::max_abs_diff(back.v[i], state.v[i]) == 0.0);
  }
  CHECK_THROWS(makd::load_train_state(p, params, 43));  // wrong seed
  TransformerModel other = makd::init_model(small_config(ModelKind::EncoderMlm, 12), 3);
  std::vector<ParamRef> other_params = makd::parameters(other);
  CHECK_THROWS(makd::load_train_state(p, other_params, 42));  // different shapes
  std::remove(p.c_str());
}

TEST_CASE("pretraining runs, logs, and resumes bit-exactly") {
  const auto docs = makd::gen_mirror_corpus(24, 7);
  const makd::Tokenizer tok = makd::build_tokenizer(docs, 64);
  const auto examples = makd::make_examples(tok, docs, 16);
  const ModelConfig mc = small_config(ModelKind::EncoderMlm, tok.vocab_size());

  TransformerModel full = makd::init_model(mc, 1);
  const makd::TrainResult res = makd::pretrain(full, examples, tok, fast_cfg(40), makd::RunIO{});
  CHECK(res.final_step == 40);
  REQUIRE(res.metrics_lines.size() == 4);
  CHECK(res.metrics_lines.front().find("step=10 ") == 0);
  CHECK(res.metrics_lines.front().find(" ce=") != std::string::npos);
  CHECK(res.metrics_lines.front().find(" grad_norm=") != std::string::npos);

  // identical run: identical parameters and identical log lines
  TransformerModel again = makd::init_model(mc, 1);
  const makd::TrainResult res2 = makd::pretrain(again, examples, tok, fast_cfg(40), makd::RunIO{});
  CHECK(param_diff(full, again) == 0.0);
  CHECK(res.metrics_lines == res2.metrics_lines);

  // pause at the midpoint, checkpoint, resume: same endpoint as the straight run
  const std::string ck = tmp_path("makd_resume_test.bin");
  TransformerModel half = makd::init_model(mc, 1);
  makd::TrainConfig paused = fast_cfg(40);
  paused.halt_after = 20;
  makd::RunIO io_half;
  io_half.out_checkpoint = ck;
  CHECK(makd::pretrain(half, examples, tok, paused, io_half).final_step == 20);
  TransformerModel resumed = makd::load_checkpoint(ck);
  makd::RunIO io_rest;
  io_rest.resume_state = ck + ".state";
  makd::pretrain(resumed, examples, tok, fast_cfg(40), io_rest);
  CHECK(param_diff(full, resumed) <= 1e-12);
  std::remove(ck.c_str());
  std::remove((ck + ".state").c_str());
}

TEST_CASE("distillation trains the student, freezes the teacher, and replays exactly") {
  const auto docs = makd::gen_mirror_corpus(24, 11);
  const makd::Tokenizer tok = makd::build_tokenizer(docs, 64);
  const auto examples = makd::make_examples(tok, docs, 16);
  const ModelConfig mc = small_config(ModelKind::EncoderMlm, tok.vocab_size());

  TransformerModel teacher = makd::init_model(mc, 2);
  makd::FactorizationSpec spec;
  spec.uniform_rank = 3;
  makd::DistillPlan plan = makd::assign_aspects(mc.layers);

  TransformerModel student = makd::build_student(teacher, spec);
  const Tensor teacher_wq = teacher.layers[0].wq.weight.clone();
  const Tensor student_a0 = student.layers[0].wq.a.clone();

  const makd::TrainResult res =
      makd::distill_run(teacher, student, examples, tok, plan, fast_cfg(30), makd::RunIO{});
  CHECK(res.final_step == 30);
  REQUIRE(res.metrics_lines.size() == 3);
  const std::string& line = res.metrics_lines.front();
  for (const char* key : {"step=", " total=", " matrix=", " layer=", " model=", " grad_norm=", " l1.mha=",
                          " l1.ffn=", " l2.attn=", " l2.hidn="}) {
    CHECK_MESSAGE(line.find(key) != std::string::npos, "missing " << key << " in: " << line);
  }
  CHECK(makd::max_abs_diff(teacher.layers[0].wq.weight, teacher_wq) == 0.0);  // frozen
  CHECK(makd::max_abs_diff(student.layers[0].wq.a, student_a0) != 0.0);       // trained

  // bit-identical metrics on a repeat run with the same seed
  TransformerModel student2 = makd::build_student(teacher, spec);
  const makd::TrainResult res2 =
      makd::distill_run(teacher, student2, examples, tok, plan, fast_cfg(30), makd::RunIO{});
  CHECK(res.metrics_lines == res2.metrics_lines);
  CHECK(param_diff(student, student2) == 0.0);

  // pause at step 15, resume to 30, land within 1e-12 of the straight run
  const std::string ck = tmp_path("makd_distill_resume.bin");
  TransformerModel student3 = makd::build_student(teacher, spec);
  makd::TrainConfig paused = fast_cfg(30);
  paused.halt_after = 15;
  makd::RunIO io_half;
  io_half.out_checkpoint = ck;
  CHECK(makd::distill_run(teacher, student3, examples, tok, plan, paused, io_half).final_step == 15);
  TransformerModel resumed = makd::load_checkpoint(ck);
  makd::RunIO io_rest;
  io_rest.resume_state = ck + ".state";
  makd::distill_run(teacher, resumed, examples, tok, plan, fast_cfg(30), io_rest);
  CHECK(param_diff(student, resumed) <= 1e-12);
  std::remove(ck.c_str());
  std::remove((ck + ".state").c_str());
}
