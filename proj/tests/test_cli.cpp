#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "makd/data.hpp"

namespace fs = std::filesystem;

namespace {

// Each invocation writes stdout/stderr to files in the scratch dir so tests
// can assert on the one-line error contract.
struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const fs::path& scratch() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "makd_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string at(const std::string& name) { return (scratch() / name).string(); }

CliResult run_cli(const std::string& args) {
  const std::string out = at("last_stdout.txt"), err = at("last_stderr.txt");
  const std::string cmd = std::string(MAKD_CLI_PATH) + " " + args + " > " + out + " 2> " + err;
  const int raw = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

// Shared tiny teacher trained once; later cases reuse it.
const std::string& teacher_ckpt() {
  static const std::string path = [] {
    makd::write_corpus(makd::gen_mirror_corpus(16, 5), at("corpus.txt"));
    const CliResult r = run_cli("pretrain-teacher --corpus " + at("corpus.txt") + " --out " + at("tea.ckpt") +
                                " --kind encoder-mlm --layers 2 --hidden 8 --heads 2 --max-seq 16" +
                                " --steps 6 --batch-size 2 --eval-interval 3 --seed 9 --vocab-size 64");
    REQUIRE(r.code == 0);
    return at("tea.ckpt");
  }();
  return path;
}

}  // namespace

TEST_CASE("version, missing subcommand and unknown flags are usage errors") {
  CHECK(run_cli("--version").code == 0);
  CHECK(contains(run_cli("--version").out, "0.1.0"));

  const CliResult none = run_cli("");
  CHECK(none.code == 2);
  CHECK(contains(none.err, "error: usage:"));

  const CliResult unknown = run_cli("frobnicate");
  CHECK(unknown.code == 2);
  CHECK(contains(unknown.err, "error: usage:"));

  const CliResult badflag = run_cli("inspect x.ckpt --no-such-flag");
  CHECK(badflag.code == 2);
}

TEST_CASE("missing input files exit 3 with a one-line error") {
  const CliResult r = run_cli("pretrain-teacher --corpus " + at("no_such_corpus.txt") + " --out " + at("x.ckpt"));
  CHECK(r.code == 3);
  CHECK(r.err.rfind("error: missing-file:", 0) == 0);
  CHECK(r.err.find('\n') == r.err.size() - 1);  // exactly one line
  CHECK(run_cli("inspect " + at("no_such.ckpt")).code == 3);
  CHECK(run_cli("bench --model " + at("no_such.ckpt")).code == 3);
}

TEST_CASE("pretrain-teacher trains, snapshots and records a manifest") {
  const std::string ckpt = teacher_ckpt();
  const std::string corpus_before = slurp(at("corpus.txt"));

  CHECK(fs::exists(ckpt));
  CHECK(fs::exists(ckpt + ".vocab"));
  CHECK(fs::exists(ckpt + ".state"));
  CHECK(fs::exists(ckpt + ".metrics"));
  CHECK(fs::exists(ckpt + ".manifest.json"));

  const std::string metrics = slurp(ckpt + ".metrics");
  CHECK(contains(metrics, "step=3"));
  CHECK(contains(metrics, "ce="));
  CHECK(contains(metrics, "grad_norm="));

  std::ifstream min(ckpt + ".manifest.json");
  const nlohmann::json j = nlohmann::json::parse(min);
  CHECK(j.at("config").at("train.steps") == "6");
  CHECK(j.at("config").at("model.ffn") == "32");  // default 4*hidden echoed back
  CHECK(j.at("seed") == 9);
  CHECK(j.at("inputs")[0] == at("corpus.txt"));
  CHECK(j.at("wall_seconds").get<double>() > 0.0);

  // inputs are read-only
  CHECK(slurp(at("corpus.txt")) == corpus_before);
}

TEST_CASE("config file is authoritative and flags override individual keys") {
  teacher_ckpt();
  {
    std::ofstream cfg(at("run.cfg"));
    cfg << "# tiny run\n"
        << "model.layers = 1\n"
        << "model.hidden = 8\n"
        << "model.heads = 2\n"
        << "model.max_seq = 16\n"
        << "train.steps = 4\n"
        << "train.batch_size = 2\n"
        << "train.eval_interval = 2\n"
        << "data.vocab_size = 64\n";
  }
  const std::string base = "pretrain-teacher --config " + at("run.cfg") + " --corpus " + at("corpus.txt");

  const CliResult from_file = run_cli(base + " --out " + at("cfg_a.ckpt"));
  REQUIRE(from_file.code == 0);
  std::ifstream ma(at("cfg_a.ckpt.manifest.json"));
  CHECK(nlohmann::json::parse(ma).at("config").at("train.steps") == "4");

  const CliResult overridden = run_cli(base + " --out " + at("cfg_b.ckpt") + " --steps 6");
  REQUIRE(overridden.code == 0);
  std::ifstream mb(at("cfg_b.ckpt.manifest.json"));
  CHECK(nlohmann::json::parse(mb).at("config").at("train.steps") == "6");

  {
    std::ofstream cfg(at("typo.cfg"));
    cfg << "train.stepz = 4\n";
  }
  const CliResult typo = run_cli("pretrain-teacher --config " + at("typo.cfg") + " --corpus " +
                                 at("corpus.txt") + " --out " + at("cfg_c.ckpt"));
  CHECK(typo.code == 2);
  CHECK(contains(typo.err, "train.stepz"));
}

TEST_CASE("factorize writes a student, a report and rejects bad selectors") {
  const std::string tea = teacher_ckpt();
  const CliResult r = run_cli("factorize --teacher " + tea + " --out " + at("stu.ckpt") + " --rank 4");
  REQUIRE(r.code == 0);
  CHECK(fs::exists(at("stu.ckpt")));
  CHECK(fs::exists(at("stu.ckpt.manifest.json")));
  const std::string report = slurp(at("stu.ckpt.report"));
  CHECK(contains(report, "param_ratio="));
  CHECK(contains(report, "matrix.layer0.wq.k=4"));
  CHECK(contains(report, "macs_ratio="));
  CHECK(contains(r.out, "ratio"));

  const std::string inspect = run_cli("inspect " + at("stu.ckpt")).out;
  CHECK(contains(inspect, "wq=4"));

  CHECK(run_cli("factorize --teacher " + tea + " --out " + at("x.ckpt") + " --rank 4 --rate 2.0").code == 2);
  CHECK(run_cli("factorize --teacher " + tea + " --out " + at("x.ckpt") + " --rank 0").code == 2);
  CHECK(run_cli("factorize --teacher " + tea + " --out " + at("x.ckpt")).code == 2);
}

TEST_CASE("distill trains a student and identical seeds give identical artifacts") {
  const std::string tea = teacher_ckpt();
  const std::string base = "distill --teacher " + tea + " --corpus " + at("corpus.txt") +
                           " --rank 4 --steps 4 --batch-size 2 --eval-interval 2 --seed 3";
  const CliResult r1 = run_cli(base + " --out " + at("dst_a.ckpt"));
  REQUIRE(r1.code == 0);
  CHECK(contains(r1.out, "distill: 4 steps"));
  const std::string metrics = slurp(at("dst_a.ckpt.metrics"));
  CHECK(contains(metrics, "total="));
  CHECK(contains(metrics, "matrix="));
  CHECK(contains(metrics, "model="));

  const CliResult r2 = run_cli(base + " --out " + at("dst_b.ckpt"));
  REQUIRE(r2.code == 0);
  CHECK(slurp(at("dst_a.ckpt")) == slurp(at("dst_b.ckpt")));
  CHECK(slurp(at("dst_a.ckpt.metrics")) == slurp(at("dst_b.ckpt.metrics")));

  // default vocab path <teacher>.vocab must exist
  fs::rename(tea + ".vocab", tea + ".vocab.hidden");
  CHECK(run_cli(base + " --out " + at("dst_c.ckpt")).code == 3);
  fs::rename(tea + ".vocab.hidden", tea + ".vocab");
}

TEST_CASE("eval scores a model and agreement against a reference") {
  const std::string tea = teacher_ckpt();
  const CliResult r = run_cli("eval --model " + at("stu.ckpt") + " --teacher " + tea + " --data " +
                              at("corpus.txt") + " --vocab " + tea + ".vocab --report " + at("eval.rep"));
  REQUIRE(r.code == 0);
  CHECK(contains(r.out, "masked_accuracy="));
  const std::string rep = slurp(at("eval.rep"));
  CHECK(contains(rep, "masked_accuracy="));
  CHECK(contains(rep, "logit_kl="));
  CHECK(contains(rep, "top1_agreement="));
  CHECK(contains(rep, "attn_kl.layer0="));
  CHECK(fs::exists(at("eval.rep.manifest.json")));
}

TEST_CASE("bench reports throughput for a checkpoint") {
  const std::string tea = teacher_ckpt();
  const CliResult r = run_cli("bench --model " + tea + " --seq-len 8 --reps 3 --report " + at("bench.rep"));
  REQUIRE(r.code == 0);
  CHECK(contains(r.out, "tokens_per_sec="));
  CHECK(contains(r.out, "linear_macs_per_token="));
  const std::string rep = slurp(at("bench.rep"));
  CHECK(contains(rep, "median_forward_seconds="));
  CHECK(fs::exists(at("bench.rep.manifest.json")));
}

TEST_CASE("inspect prints shapes without touching the file") {
  const std::string tea = teacher_ckpt();
  const auto mtime = fs::last_write_time(tea);
  const CliResult r = run_cli("inspect " + tea + " --tensors");
  REQUIRE(r.code == 0);
  CHECK(contains(r.out, "kind=encoder-mlm"));
  CHECK(contains(r.out, "parameters="));
  CHECK(contains(r.out, "tensor tok_embed"));
  CHECK(contains(r.out, "logits ["));
  CHECK(fs::last_write_time(tea) == mtime);
}
