#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "makd/model.hpp"
#include "makd/tape.hpp"
#include "makd/tensor.hpp"
#include "oracles.hpp"

using makd::ActivationTrace;
using makd::ModelConfig;
using makd::ModelKind;
using makd::Tensor;
using makd::TransformerModel;

namespace {

ModelConfig tiny_config(ModelKind kind, int layers = 2, int hidden = 8, int heads = 2, int vocab = 11,
                        int max_seq = 6) {
  ModelConfig c;
  c.kind = kind;
  c.layers = layers;
  c.hidden = hidden;
  c.ffn = hidden * 2;
  c.heads = heads;
  c.vocab_size = vocab;
  c.max_seq_len = max_seq;
  c.finalize();
  return c;
}

// Slow reference forward: per-head loops over explicit row/column slices,
// oracle matmul/softmax/layer-norm/gelu throughout. Dense tied models only.
struct OracleTrace {
  std::vector<std::vector<oracle::Mat>> q, k, v, attn;  // [layer][head]
  std::vector<oracle::Mat> mha_out, ffn_up, ffn_down, hidden;
  oracle::Mat logits;
};

std::vector<double> vec_of(const Tensor& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

std::vector<double> row_of(const Tensor& t, int r) {
  std::vector<double> out(static_cast<size_t>(t.cols()));
  for (int j = 0; j < t.cols(); ++j) out[static_cast<size_t>(j)] = t.at(r, j);
  return out;
}

oracle::Mat linear_oracle(const oracle::Mat& x, const Tensor& w, const Tensor& bias) {
  oracle::Mat out = oracle::matmul(x, oracle::to_mat(w));
  for (auto& row : out)
    for (size_t j = 0; j < row.size(); ++j) row[j] += bias.values()[j];
  return out;
}

OracleTrace oracle_forward(const TransformerModel& m, const std::vector<int>& tokens) {
  const ModelConfig& c = m.config;
  const int t_len = static_cast<int>(tokens.size());
  const int dk = c.head_dim();
  const bool causal = c.kind == ModelKind::DecoderCausal;
  OracleTrace tr;

  oracle::Mat h(static_cast<size_t>(t_len));
  for (int i = 0; i < t_len; ++i) {
    std::vector<double> row = row_of(m.tok_embed, tokens[static_cast<size_t>(i)]);
    const std::vector<double> pos = row_of(m.pos_embed, i);
    for (size_t j = 0; j < row.size(); ++j) row[j] += pos[j];
    h[static_cast<size_t>(i)] = row;
  }

  const std::vector<double> ones(static_cast<size_t>(c.hidden), 1.0);
  for (int l = 0; l < c.layers; ++l) {
    const makd::LayerParams& lp = m.layers[static_cast<size_t>(l)];
    const oracle::Mat qf = linear_oracle(h, lp.wq.weight, lp.wq.bias);
    const oracle::Mat kf = linear_oracle(h, lp.wk.weight, lp.wk.bias);
    const oracle::Mat vf = linear_oracle(h, lp.wv.weight, lp.wv.bias);

    std::vector<oracle::Mat> qs, ks, vs, attns;
    oracle::Mat ctx_cat(static_cast<size_t>(t_len), std::vector<double>(static_cast<size_t>(c.hidden)));
    for (int a = 0; a < c.heads; ++a) {
      oracle::Mat qa(static_cast<size_t>(t_len)), ka(static_cast<size_t>(t_len)),
          va(static_cast<size_t>(t_len));
      for (int i = 0; i < t_len; ++i) {
        for (int j = 0; j < dk; ++j) {
          qa[static_cast<size_t>(i)].push_back(qf[static_cast<size_t>(i)][static_cast<size_t>(a * dk + j)]);
          ka[static_cast<size_t>(i)].push_back(kf[static_cast<size_t>(i)][static_cast<size_t>(a * dk + j)]);
          va[static_cast<size_t>(i)].push_back(vf[static_cast<size_t>(i)][static_cast<size_t>(a * dk + j)]);
        }
      }
      oracle::Mat attn(static_cast<size_t>(t_len), std::vector<double>(static_cast<size_t>(t_len), 0.0));
      for (int i = 0; i < t_len; ++i) {
        std::vector<double> scores;
        std::vector<int> allowed;
        for (int j = 0; j < t_len; ++j) {
          if (causal && j > i) continue;
          double dot = 0.0;
          for (int e = 0; e < dk; ++e)
            dot += qa[static_cast<size_t>(i)][static_cast<size_t>(e)] *
                   ka[static_cast<size_t>(j)][static_cast<size_t>(e)];
          scores.push_back(dot / std::sqrt(static_cast<double>(dk)));
          allowed.push_back(j);
        }
        const std::vector<double> probs = oracle::softmax_row(scores);
        for (size_t s = 0; s < allowed.size(); ++s)
          attn[static_cast<size_t>(i)][static_cast<size_t>(allowed[s])] = probs[s];
      }
      const oracle::Mat ctx = oracle::matmul(attn, va);
      for (int i = 0; i < t_len; ++i)
        for (int j = 0; j < dk; ++j)
          ctx_cat[static_cast<size_t>(i)][static_cast<size_t>(a * dk + j)] =
              ctx[static_cast<size_t>(i)][static_cast<size_t>(j)];
      qs.push_back(qa);
      ks.push_back(ka);
      vs.push_back(va);
      attns.push_back(attn);
    }
    tr.q.push_back(qs);
    tr.k.push_back(ks);
    tr.v.push_back(vs);
    tr.attn.push_back(attns);

    const oracle::Mat proj = linear_oracle(ctx_cat, lp.wo.weight, lp.wo.bias);
    oracle::Mat o(static_cast<size_t>(t_len));
    for (int i = 0; i < t_len; ++i) {
      std::vector<double> sum = h[static_cast<size_t>(i)];
      for (size_t j = 0; j < sum.size(); ++j) sum[j] += proj[static_cast<size_t>(i)][j];
      o[static_cast<size_t>(i)] = oracle::layer_norm_row(sum, vec_of(lp.ln1_gain), vec_of(lp.ln1_bias), c.ln_eps);
    }
    tr.mha_out.push_back(o);

    oracle::Mat up = linear_oracle(o, lp.wu.weight, lp.wu.bias);
    for (auto& row : up)
      for (double& x : row) x = oracle::gelu_tanh(x);
    tr.ffn_up.push_back(up);
    const oracle::Mat down = linear_oracle(up, lp.wd.weight, lp.wd.bias);
    tr.ffn_down.push_back(down);
    oracle::Mat hn(static_cast<size_t>(t_len));
    for (int i = 0; i < t_len; ++i) {
      std::vector<double> sum = o[static_cast<size_t>(i)];
      for (size_t j = 0; j < sum.size(); ++j) sum[j] += down[static_cast<size_t>(i)][j];
      hn[static_cast<size_t>(i)] = oracle::layer_norm_row(sum, vec_of(lp.ln2_gain), vec_of(lp.ln2_bias), c.ln_eps);
    }
    tr.hidden.push_back(hn);
    h = hn;
  }

  tr.logits = oracle::matmul(h, oracle::transpose(oracle::to_mat(m.tok_embed)));
  for (auto& row : tr.logits)
    for (size_t j = 0; j < row.size(); ++j) row[j] += m.head_bias.values()[j];
  return tr;
}

double mat_diff(const Tensor& got, const oracle::Mat& want) {
  double worst = 0.0;
  for (int i = 0; i < got.rows(); ++i)
    for (int j = 0; j < got.cols(); ++j)
      worst = std::max(worst,
                       std::fabs(got.at(i, j) - want[static_cast<size_t>(i)][static_cast<size_t>(j)]));
  return worst;
}

}  // namespace

TEST_CASE("config finalize resolves defaults and rejects bad shapes") {
  ModelConfig c = tiny_config(ModelKind::EncoderMlm);
  CHECK(c.ffn == 16);
  ModelConfig d;
  d.vocab_size = 10;
  d.finalize();
  CHECK(d.ffn == 4 * d.hidden);  // default d_f = 4d

  ModelConfig bad = tiny_config(ModelKind::EncoderMlm);
  bad.heads = 3;  // 8 % 3 != 0
  CHECK_THROWS(bad.finalize());
  ModelConfig no_vocab;
  CHECK_THROWS(no_vocab.finalize());
}

TEST_CASE("init is deterministic and counts parameters correctly") {
  const ModelConfig c = tiny_config(ModelKind::EncoderMlm);
  const TransformerModel a = makd::init_model(c, 5);
  const TransformerModel b = makd::init_model(c, 5);
  const TransformerModel other = makd::init_model(c, 6);
  CHECK(makd::max_abs_diff(a.tok_embed, b.tok_embed) == 0.0);
  CHECK(makd::max_abs_diff(a.layers[1].wu.weight, b.layers[1].wu.weight) == 0.0);
  CHECK(makd::max_abs_diff(a.tok_embed, other.tok_embed) != 0.0);

  // tied head: vocab*d + max_seq*d + vocab + L*(4(d^2+d) + d*df+df + df*d+d + 4d)
  const int64_t d = c.hidden, df = c.ffn, v = c.vocab_size, t = c.max_seq_len, l = c.layers;
  const int64_t want = v * d + t * d + v + l * (4 * (d * d + d) + d * df + df + df * d + d + 4 * d);
  CHECK(makd::parameter_count(a) == want);

  int64_t acc = 0;
  for (const auto& p : makd::parameters(a)) acc += p.tensor->numel();
  CHECK(acc == want);
}

TEST_CASE("forward matches the unfused per-head oracle") {
  for (ModelKind kind : {ModelKind::EncoderMlm, ModelKind::DecoderCausal}) {
    const ModelConfig c = tiny_config(kind, 2, 8, 2, 11, 6);
    const TransformerModel m = makd::init_model(c, 21);
    const std::vector<int> tokens{1, 4, 7, 2};
    const ActivationTrace got = makd::model_forward(m, tokens);
    const OracleTrace want = oracle_forward(m, tokens);
    for (int l = 0; l < c.layers; ++l) {
      const auto& lt = got.layers[static_cast<size_t>(l)];
      for (int a = 0; a < c.heads; ++a) {
        CHECK(mat_diff(lt.q[static_cast<size_t>(a)], want.q[static_cast<size_t>(l)][static_cast<size_t>(a)]) < 1e-10);
        CHECK(mat_diff(lt.k[static_cast<size_t>(a)], want.k[static_cast<size_t>(l)][static_cast<size_t>(a)]) < 1e-10);
        CHECK(mat_diff(lt.v[static_cast<size_t>(a)], want.v[static_cast<size_t>(l)][static_cast<size_t>(a)]) < 1e-10);
        CHECK(mat_diff(lt.attn[static_cast<size_t>(a)], want.attn[static_cast<size_t>(l)][static_cast<size_t>(a)]) < 1e-10);
      }
      CHECK(mat_diff(lt.mha_out, want.mha_out[static_cast<size_t>(l)]) < 1e-10);
      CHECK(mat_diff(lt.ffn_up, want.ffn_up[static_cast<size_t>(l)]) < 1e-10);
      CHECK(mat_diff(lt.ffn_down, want.ffn_down[static_cast<size_t>(l)]) < 1e-10);
      CHECK(mat_diff(lt.hidden, want.hidden[static_cast<size_t>(l)]) < 1e-10);
    }
    CHECK(mat_diff(got.logits, want.logits) < 1e-10);
  }
}

TEST_CASE("attention rows normalize; causal upper triangle is exactly zero") {
  const ModelConfig c = tiny_config(ModelKind::DecoderCausal, 2, 8, 2, 11, 8);
  const TransformerModel m = makd::init_model(c, 31);
  const std::vector<int> tokens{3, 1, 4, 1, 5};
  const ActivationTrace tr = makd::model_forward(m, tokens);
  for (const auto& lt : tr.layers) {
    for (const Tensor& attn : lt.attn) {
      for (int i = 0; i < attn.rows(); ++i) {
        double s = 0.0;
        for (int j = 0; j < attn.cols(); ++j) {
          s += attn.at(i, j);
          if (j > i) CHECK(attn.at(i, j) == 0.0);
        }
        CHECK(std::fabs(s - 1.0) < 1e-10);
      }
    }
  }
}

TEST_CASE("one-token input gives the trivial attention matrix") {
  const TransformerModel m = makd::init_model(tiny_config(ModelKind::EncoderMlm), 41);
  const ActivationTrace tr = makd::model_forward(m, std::vector<int>{2});
  for (const auto& lt : tr.layers) {
    for (const Tensor& attn : lt.attn) {
      REQUIRE(attn.rows() == 1);
      CHECK(attn.at(0, 0) == 1.0);
    }
  }
}

TEST_CASE("zeroed query projection yields uniform attention that averages values") {
  const ModelConfig c = tiny_config(ModelKind::EncoderMlm, 1, 8, 1, 11, 6);
  TransformerModel m = makd::init_model(c, 51);
  m.layers[0].wq.weight = Tensor::zeros({8, 8});
  m.layers[0].wq.bias = Tensor::zeros({8});
  const ActivationTrace tr = makd::model_forward(m, std::vector<int>{1, 2});
  const Tensor& attn = tr.layers[0].attn[0];
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(attn.at(i, j) == doctest::Approx(0.5).epsilon(1e-12));
  // uniform attention -> per-head context rows are the mean of the value rows
  const Tensor& v = tr.layers[0].v[0];
  const Tensor ctx = makd::matmul(attn, v);
  for (int j = 0; j < v.cols(); ++j) {
    const double mean = 0.5 * (v.at(0, j) + v.at(1, j));
    CHECK(ctx.at(0, j) == doctest::Approx(mean).epsilon(1e-12));
    CHECK(ctx.at(1, j) == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("null ffn reduces the layer to a second layer norm") {
  const ModelConfig c = tiny_config(ModelKind::EncoderMlm, 1, 8, 2, 11, 6);
  TransformerModel m = makd::init_model(c, 61);
  m.layers[0].wu.weight = Tensor::zeros({8, 16});
  m.layers[0].wu.bias = Tensor::zeros({16});
  m.layers[0].wd.weight = Tensor::zeros({16, 8});
  m.layers[0].wd.bias = Tensor::zeros({8});
  const ActivationTrace tr = makd::model_forward(m, std::vector<int>{1, 2, 3});
  const Tensor want =
      makd::layer_norm(tr.layers[0].mha_out, m.layers[0].ln2_gain, m.layers[0].ln2_bias, c.ln_eps);
  CHECK(makd::max_abs_diff(tr.layers[0].hidden, want) < 1e-12);
}

TEST_CASE("hand-worked identity ffn on a 2-wide layer") {
  // One layer, d = d_f = 2, all attention weights zero (so O = LN(h)),
  // identity up/down projections. Token embedding [1, 2], no position
  // term: O = LN([1,2]) = [-1, 1], then x + gelu(x) at -1 and 1 is
  // centered at +-1.5 because gelu(1) - gelu(-1) = 1 exactly, so the
  // final norm gives H = [-1, 1] again.
  ModelConfig c;
  c.kind = ModelKind::EncoderMlm;
  c.layers = 1;
  c.hidden = 2;
  c.ffn = 2;
  c.heads = 1;
  c.vocab_size = 3;
  c.max_seq_len = 2;
  c.ln_eps = 1e-12;
  c.finalize();
  TransformerModel m = makd::build_model_shell(c);
  m.tok_embed = Tensor({3, 2}, {1, 2, 0, 0, 0, 0});
  for (auto* t : {&m.layers[0].ln1_gain, &m.layers[0].ln2_gain}) *t = Tensor::full({2}, 1.0);
  m.layers[0].wu.weight = Tensor::identity(2);
  m.layers[0].wd.weight = Tensor::identity(2);
  const ActivationTrace tr = makd::model_forward(m, std::vector<int>{0});
  CHECK(tr.layers[0].mha_out.at(0, 0) == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(tr.layers[0].mha_out.at(0, 1) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(tr.layers[0].ffn_up.at(0, 0) == doctest::Approx(oracle::gelu_tanh(-1.0)).epsilon(1e-9));
  CHECK(tr.layers[0].ffn_up.at(0, 1) == doctest::Approx(oracle::gelu_tanh(1.0)).epsilon(1e-9));
  CHECK(tr.layers[0].hidden.at(0, 0) == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(tr.layers[0].hidden.at(0, 1) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("zero-layer model emits embeddings straight into the head") {
  const ModelConfig c = tiny_config(ModelKind::EncoderMlm, 0, 8, 2, 11, 6);
  const TransformerModel m = makd::init_model(c, 71);
  const std::vector<int> tokens{1, 5, 9};
  const ActivationTrace tr = makd::model_forward(m, tokens);
  CHECK(tr.layers.empty());
  const Tensor want = makd::add_row_bias(makd::matmul_nt(tr.input_hidden, m.tok_embed), m.head_bias);
  CHECK(makd::max_abs_diff(tr.logits, want) == 0.0);
}

TEST_CASE("decoder logits are invariant to future-token changes") {
  const ModelConfig c = tiny_config(ModelKind::DecoderCausal, 2, 8, 2, 11, 8);
  const TransformerModel m = makd::init_model(c, 81);
  std::vector<int> tokens{3, 1, 4, 1, 5, 9};
  const ActivationTrace before = makd::model_forward(m, tokens);
  tokens[4] = 7;  // perturb position 4
  const ActivationTrace after = makd::model_forward(m, tokens);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < c.vocab_size; ++j) CHECK(before.logits.at(i, j) == after.logits.at(i, j));
  // ...and the perturbed position itself does change
  double diff = 0.0;
  for (int j = 0; j < c.vocab_size; ++j) diff += std::fabs(before.logits.at(4, j) - after.logits.at(4, j));
  CHECK(diff > 0.0);
}

TEST_CASE("padding is invisible to valid positions") {
  const ModelConfig c = tiny_config(ModelKind::EncoderMlm, 2, 8, 2, 11, 8);
  const TransformerModel m = makd::init_model(c, 91);
  std::vector<int> tokens{3, 1, 4, 0, 0};
  const std::vector<uint8_t> key_valid{1, 1, 1, 0, 0};
  const ActivationTrace before = makd::model_forward(m, tokens, key_valid);
  CHECK(before.valid_rows == std::vector<int>{0, 1, 2});
  tokens[3] = 9;  // change a padded slot
  const ActivationTrace after = makd::model_forward(m, tokens, key_valid);
  for (int i : before.valid_rows)
    for (int j = 0; j < c.vocab_size; ++j) CHECK(before.logits.at(i, j) == after.logits.at(i, j));
  // no valid row spends attention on the padded columns
  for (const auto& lt : before.layers)
    for (const Tensor& attn : lt.attn)
      for (int i : before.valid_rows) {
        CHECK(attn.at(i, 3) == 0.0);
        CHECK(attn.at(i, 4) == 0.0);
      }
}

TEST_CASE("forward input validation") {
  const TransformerModel m = makd::init_model(tiny_config(ModelKind::EncoderMlm, 1, 8, 2, 11, 4), 101);
  CHECK_THROWS(makd::model_forward(m, std::vector<int>{}));
  CHECK_THROWS(makd::model_forward(m, std::vector<int>{1, 2, 3, 4, 5}));    // > max_seq
  CHECK_THROWS(makd::model_forward(m, std::vector<int>{1, 11}));            // token out of range
  CHECK_THROWS(makd::model_forward(m, std::vector<int>{1, -1}));
  CHECK_THROWS(makd::model_forward(m, std::vector<int>{1, 2}, std::vector<uint8_t>{1}));  // mask length
}

TEST_CASE("eager overload equals a frozen taped forward") {
  const TransformerModel m = makd::init_model(tiny_config(ModelKind::EncoderMlm), 111);
  const std::vector<int> tokens{1, 2, 3};
  const ActivationTrace eager = makd::model_forward(m, tokens);
  makd::GradientTape tape(true);
  const makd::BoundModel bm = makd::bind_frozen(m, tape);
  const ActivationTrace taped = makd::model_forward(bm, tape, tokens);
  CHECK(makd::max_abs_diff(eager.logits, taped.logits) == 0.0);
  CHECK(makd::max_abs_diff(eager.layers[1].hidden, taped.layers[1].hidden) == 0.0);
}

TEST_CASE("trainable binding exposes a gradient for every parameter; frozen exposes none") {
  TransformerModel m = makd::init_model(tiny_config(ModelKind::EncoderMlm, 1, 8, 2, 11, 6), 121);
  makd::GradientTape tape(true);
  makd::BoundModel bm = makd::bind_trainable(m, tape);
  CHECK(bm.refs.size() == makd::parameters(m).size());
  const ActivationTrace tr = makd::model_forward(bm, tape, std::vector<int>{1, 2, 3});
  tape.backward(tape.mse_vs(tr.logits_v, Tensor::zeros({3, 11}), {0, 1, 2}));
  const auto grads = makd::gradient_map(bm, tape);
  CHECK(grads.size() == bm.refs.size());
  int nonzero = 0;
  for (const auto& [name, g] : grads) {
    if (makd::frobenius_norm(g) > 0.0) ++nonzero;
  }
  CHECK(nonzero > static_cast<int>(grads.size()) / 2);

  const TransformerModel frozen_model = makd::init_model(tiny_config(ModelKind::EncoderMlm), 122);
  makd::GradientTape tape2(true);
  const makd::BoundModel fb = makd::bind_frozen(frozen_model, tape2);
  CHECK(fb.refs.empty());
  CHECK(fb.ref_vars.empty());
}

TEST_CASE("untied head uses its own projection") {
  ModelConfig c = tiny_config(ModelKind::EncoderMlm, 1, 8, 2, 11, 6);
  c.tied_head = false;
  const TransformerModel m = makd::init_model(c, 131);
  const std::vector<int> tokens{1, 2};
  const ActivationTrace tr = makd::model_forward(m, tokens);
  const Tensor want =
      makd::add_row_bias(makd::matmul_nt(tr.layers[0].hidden, m.head_weight), m.head_bias);
  CHECK(makd::max_abs_diff(tr.logits, want) == 0.0);
  // untied adds vocab*d parameters over the tied layout
  ModelConfig tied = c;
  tied.tied_head = true;
  const TransformerModel mt = makd::init_model(tied, 131);
  CHECK(makd::parameter_count(m) - makd::parameter_count(mt) ==
        static_cast<int64_t>(c.vocab_size) * c.hidden);
}
