#include "makd/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace makd {

std::string kind_to_string(ModelKind k) {
  return k == ModelKind::EncoderMlm ? "encoder-mlm" : "decoder-causal";
}

ModelKind kind_from_string(const std::string& s) {
  if (s == "encoder-mlm") return ModelKind::EncoderMlm;
  if (s == "decoder-causal") return ModelKind::DecoderCausal;
  throw std::invalid_argument("unknown model kind: " + s);
}

static const char* const kRoles[] = {"wq", "wk", "wv", "wo", "wu", "wd", "embed"};

static void role_dims(const ModelConfig& c, const std::string& role, int* in, int* out) {
  if (role == "wu") {
    *in = c.hidden;
    *out = c.ffn;
  } else if (role == "wd") {
    *in = c.ffn;
    *out = c.hidden;
  } else if (role == "embed") {
    *in = c.vocab_size;
    *out = c.hidden;
  } else {
    *in = c.hidden;
    *out = c.hidden;
  }
}

void ModelConfig::finalize() {
  if (ffn == 0) ffn = 4 * hidden;
  if (layers < 0) throw std::invalid_argument("config: layers must be >= 0");
  if (hidden < 1 || ffn < 1) throw std::invalid_argument("config: hidden and ffn must be positive");
  if (heads < 1) throw std::invalid_argument("config: heads must be positive");
  if (hidden % heads != 0) {
    throw std::invalid_argument("config: hidden " + std::to_string(hidden) + " not divisible by heads " +
                                std::to_string(heads));
  }
  if (vocab_size < 1) throw std::invalid_argument("config: vocab_size must be positive");
  if (max_seq_len < 1) throw std::invalid_argument("config: max_seq_len must be positive");
  if (ln_eps <= 0.0) throw std::invalid_argument("config: ln_eps must be positive");
  for (const auto& [role, k] : rank_map) {
    if (std::find_if(std::begin(kRoles), std::end(kRoles),
                     [&](const char* r) { return role == r; }) == std::end(kRoles)) {
      throw std::invalid_argument("config: unknown rank_map role '" + role + "'");
    }
    int in = 0, out = 0;
    role_dims(*this, role, &in, &out);
    if (k < 1 || k > std::min(in, out)) {
      throw std::invalid_argument("config: rank " + std::to_string(k) + " for role '" + role +
                                  "' outside [1, " + std::to_string(std::min(in, out)) + "]");
    }
  }
}

LinearLayer LinearLayer::dense(int in, int out, Rng& rng, double stddev) {
  LinearLayer l;
  l.weight = random_normal({in, out}, rng, stddev);
  l.bias = Tensor::zeros({out});
  l.factorized = false;
  return l;
}

LinearLayer LinearLayer::from_factors(Tensor a, Tensor b, Tensor bias) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw std::invalid_argument("from_factors: incompatible factors " + a.shape_str() + " and " + b.shape_str());
  }
  if (bias.rank() != 1 || bias.dim(0) != b.cols()) {
    throw std::invalid_argument("from_factors: bias " + bias.shape_str() + " does not match output dim " +
                                std::to_string(b.cols()));
  }
  LinearLayer l;
  l.a = std::move(a);
  l.b = std::move(b);
  l.bias = std::move(bias);
  l.factorized = true;
  return l;
}

static LinearLayer init_linear(const ModelConfig& c, const std::string& role, Rng& rng, double stddev) {
  int in = 0, out = 0;
  role_dims(c, role, &in, &out);
  auto it = c.rank_map.find(role);
  if (it == c.rank_map.end()) return LinearLayer::dense(in, out, rng, stddev);
  const int k = it->second;
  return LinearLayer::from_factors(random_normal({in, k}, rng, stddev), random_normal({k, out}, rng, stddev),
                                   Tensor::zeros({out}));
}

TransformerModel init_model(ModelConfig config, uint64_t seed, double init_stddev) {
  config.finalize();
  TransformerModel m;
  m.config = config;
  Rng rng(Rng::derive(seed, /*stream=*/0x696e6974, 0));
  if (config.embed_factorized()) {
    const int k = config.rank_map.at("embed");
    m.tok_embed_a = random_normal({config.vocab_size, k}, rng, init_stddev);
    m.tok_embed_b = random_normal({k, config.hidden}, rng, init_stddev);
  } else {
    m.tok_embed = random_normal({config.vocab_size, config.hidden}, rng, init_stddev);
  }
  m.pos_embed = random_normal({config.max_seq_len, config.hidden}, rng, init_stddev);
  if (!config.tied_head) m.head_weight = random_normal({config.vocab_size, config.hidden}, rng, init_stddev);
  m.head_bias = Tensor::zeros({config.vocab_size});
  m.layers.reserve(static_cast<size_t>(config.layers));
  for (int l = 0; l < config.layers; ++l) {
    LayerParams lay;
    lay.wq = init_linear(config, "wq", rng, init_stddev);
    lay.wk = init_linear(config, "wk", rng, init_stddev);
    lay.wv = init_linear(config, "wv", rng, init_stddev);
    lay.wo = init_linear(config, "wo", rng, init_stddev);
    lay.ln1_gain = Tensor::full({config.hidden}, 1.0);
    lay.ln1_bias = Tensor::zeros({config.hidden});
    lay.wu = init_linear(config, "wu", rng, init_stddev);
    lay.wd = init_linear(config, "wd", rng, init_stddev);
    lay.ln2_gain = Tensor::full({config.hidden}, 1.0);
    lay.ln2_bias = Tensor::zeros({config.hidden});
    m.layers.push_back(std::move(lay));
  }
  return m;
}

static LinearLayer shell_linear(const ModelConfig& c, const std::string& role) {
  int in = 0, out = 0;
  role_dims(c, role, &in, &out);
  auto it = c.rank_map.find(role);
  if (it == c.rank_map.end()) {
    LinearLayer l;
    l.weight = Tensor::zeros({in, out});
    l.bias = Tensor::zeros({out});
    return l;
  }
  return LinearLayer::from_factors(Tensor::zeros({in, it->second}), Tensor::zeros({it->second, out}),
                                   Tensor::zeros({out}));
}

TransformerModel build_model_shell(ModelConfig config) {
  config.finalize();
  TransformerModel m;
  m.config = config;
  if (config.embed_factorized()) {
    const int k = config.rank_map.at("embed");
    m.tok_embed_a = Tensor::zeros({config.vocab_size, k});
    m.tok_embed_b = Tensor::zeros({k, config.hidden});
  } else {
    m.tok_embed = Tensor::zeros({config.vocab_size, config.hidden});
  }
  m.pos_embed = Tensor::zeros({config.max_seq_len, config.hidden});
  if (!config.tied_head) m.head_weight = Tensor::zeros({config.vocab_size, config.hidden});
  m.head_bias = Tensor::zeros({config.vocab_size});
  m.layers.reserve(static_cast<size_t>(config.layers));
  for (int l = 0; l < config.layers; ++l) {
    LayerParams lay;
    lay.wq = shell_linear(config, "wq");
    lay.wk = shell_linear(config, "wk");
    lay.wv = shell_linear(config, "wv");
    lay.wo = shell_linear(config, "wo");
    lay.ln1_gain = Tensor::zeros({config.hidden});
    lay.ln1_bias = Tensor::zeros({config.hidden});
    lay.wu = shell_linear(config, "wu");
    lay.wd = shell_linear(config, "wd");
    lay.ln2_gain = Tensor::zeros({config.hidden});
    lay.ln2_bias = Tensor::zeros({config.hidden});
    m.layers.push_back(std::move(lay));
  }
  return m;
}

// Single naming walk shared by the const and mutable parameter views and
// by the binding code, so checkpoint manifests, optimizer state, and
// gradient maps all agree on order.
template <typename ModelT, typename Fn>
static void walk_params(ModelT& m, Fn&& fn) {
  if (m.config.embed_factorized()) {
    fn("tok_embed.a", m.tok_embed_a);
    fn("tok_embed.b", m.tok_embed_b);
  } else {
    fn("tok_embed", m.tok_embed);
  }
  fn("pos_embed", m.pos_embed);
  if (!m.config.tied_head) fn("head_weight", m.head_weight);
  fn("head_bias", m.head_bias);
  for (size_t l = 0; l < m.layers.size(); ++l) {
    auto& lay = m.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    auto lin = [&](const char* role, auto& ll) {
      if (ll.factorized) {
        fn(p + role + ".a", ll.a);
        fn(p + role + ".b", ll.b);
      } else {
        fn(p + role + ".weight", ll.weight);
      }
      fn(p + role + ".bias", ll.bias);
    };
    lin("wq", lay.wq);
    lin("wk", lay.wk);
    lin("wv", lay.wv);
    lin("wo", lay.wo);
    fn(p + "ln1.gain", lay.ln1_gain);
    fn(p + "ln1.bias", lay.ln1_bias);
    lin("wu", lay.wu);
    lin("wd", lay.wd);
    fn(p + "ln2.gain", lay.ln2_gain);
    fn(p + "ln2.bias", lay.ln2_bias);
  }
}

std::vector<ParamRef> parameters(TransformerModel& m) {
  std::vector<ParamRef> out;
  walk_params(m, [&](std::string name, Tensor& t) { out.push_back({std::move(name), &t}); });
  return out;
}

std::vector<ConstParamRef> parameters(const TransformerModel& m) {
  std::vector<ConstParamRef> out;
  walk_params(m, [&](std::string name, const Tensor& t) { out.push_back({std::move(name), &t}); });
  return out;
}

int64_t parameter_count(const TransformerModel& m) {
  int64_t n = 0;
  walk_params(m, [&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

// ---- binding ------------------------------------------------------------

static Var bind_one(GradientTape& tape, const Tensor& t, bool grad, std::vector<Var>& order) {
  Var v = tape.leaf(t, grad);
  order.push_back(v);
  return v;
}

static BoundLinear bind_linear(GradientTape& tape, const LinearLayer& l, bool grad, std::vector<Var>& order) {
  BoundLinear b;
  b.factorized = l.factorized;
  if (l.factorized) {
    b.a = bind_one(tape, l.a, grad, order);
    b.b = bind_one(tape, l.b, grad, order);
  } else {
    b.weight = bind_one(tape, l.weight, grad, order);
  }
  b.bias = bind_one(tape, l.bias, grad, order);
  return b;
}

static BoundModel bind_impl(const TransformerModel& m, GradientTape& tape, bool grad) {
  BoundModel bm;
  bm.model = &m;
  if (m.config.embed_factorized()) {
    bm.tok_embed_a = bind_one(tape, m.tok_embed_a, grad, bm.ref_vars);
    bm.tok_embed_b = bind_one(tape, m.tok_embed_b, grad, bm.ref_vars);
  } else {
    bm.tok_embed = bind_one(tape, m.tok_embed, grad, bm.ref_vars);
  }
  bm.pos_embed = bind_one(tape, m.pos_embed, grad, bm.ref_vars);
  if (!m.config.tied_head) bm.head_weight = bind_one(tape, m.head_weight, grad, bm.ref_vars);
  bm.head_bias = bind_one(tape, m.head_bias, grad, bm.ref_vars);
  bm.layers.reserve(m.layers.size());
  for (const auto& lay : m.layers) {
    BoundLayer bl;
    bl.wq = bind_linear(tape, lay.wq, grad, bm.ref_vars);
    bl.wk = bind_linear(tape, lay.wk, grad, bm.ref_vars);
    bl.wv = bind_linear(tape, lay.wv, grad, bm.ref_vars);
    bl.wo = bind_linear(tape, lay.wo, grad, bm.ref_vars);
    bl.ln1_gain = bind_one(tape, lay.ln1_gain, grad, bm.ref_vars);
    bl.ln1_bias = bind_one(tape, lay.ln1_bias, grad, bm.ref_vars);
    bl.wu = bind_linear(tape, lay.wu, grad, bm.ref_vars);
    bl.wd = bind_linear(tape, lay.wd, grad, bm.ref_vars);
    bl.ln2_gain = bind_one(tape, lay.ln2_gain, grad, bm.ref_vars);
    bl.ln2_bias = bind_one(tape, lay.ln2_bias, grad, bm.ref_vars);
    bm.layers.push_back(bl);
  }
  return bm;
}

BoundModel bind_trainable(TransformerModel& m, GradientTape& tape) {
  BoundModel bm = bind_impl(m, tape, true);
  bm.refs = parameters(m);
  if (bm.refs.size() != bm.ref_vars.size()) {
    throw std::logic_error("bind_trainable: parameter walk disagrees with binding order");
  }
  return bm;
}

BoundModel bind_frozen(const TransformerModel& m, GradientTape& tape) {
  BoundModel bm = bind_impl(m, tape, false);
  bm.ref_vars.clear();
  return bm;
}

std::map<std::string, Tensor> gradient_map(const BoundModel& bm, const GradientTape& tape) {
  std::map<std::string, Tensor> out;
  for (size_t i = 0; i < bm.refs.size(); ++i) out[bm.refs[i].name] = tape.grad(bm.ref_vars[i]);
  return out;
}

// ---- forward ------------------------------------------------------------

static Var linear_apply(GradientTape& tape, Var x, const BoundLinear& l) {
  Var h = l.factorized ? tape.matmul(tape.matmul(x, l.a), l.b) : tape.matmul(x, l.weight);
  return tape.add_row_bias(h, l.bias);
}

void ActivationTrace::drop_vars() {
  logits_v = Var{};
  for (auto& lt : layers) {
    lt.q_v.clear();
    lt.k_v.clear();
    lt.v_v.clear();
    lt.attn_v.clear();
    lt.mha_out_v = lt.ffn_up_v = lt.ffn_down_v = lt.hidden_v = Var{};
  }
}

ActivationTrace model_forward(const BoundModel& bm, GradientTape& tape, std::span<const int> tokens,
                              std::span<const uint8_t> key_valid) {
  const TransformerModel& m = *bm.model;
  const ModelConfig& c = m.config;
  const int t_len = static_cast<int>(tokens.size());
  if (t_len < 1) throw std::invalid_argument("model_forward: empty token sequence");
  if (t_len > c.max_seq_len) {
    throw std::invalid_argument("model_forward: sequence length " + std::to_string(t_len) +
                                " exceeds max_seq_len " + std::to_string(c.max_seq_len));
  }
  if (!key_valid.empty() && static_cast<int>(key_valid.size()) != t_len) {
    throw std::invalid_argument("model_forward: mask length " + std::to_string(key_valid.size()) +
                                " does not match sequence length " + std::to_string(t_len));
  }
  for (int id : tokens) {
    if (id < 0 || id >= c.vocab_size) {
      throw std::invalid_argument("model_forward: token id " + std::to_string(id) + " outside vocab of " +
                                  std::to_string(c.vocab_size));
    }
  }

  ActivationTrace tr;
  tr.seq_len = t_len;
  for (int i = 0; i < t_len; ++i) {
    if (key_valid.empty() || key_valid[static_cast<size_t>(i)]) tr.valid_rows.push_back(i);
  }

  std::vector<int> ids(tokens.begin(), tokens.end());
  std::vector<int> pos(static_cast<size_t>(t_len));
  std::iota(pos.begin(), pos.end(), 0);
  Var tok_rows = c.embed_factorized() ? tape.matmul(tape.gather_rows(bm.tok_embed_a, ids), bm.tok_embed_b)
                                      : tape.gather_rows(bm.tok_embed, ids);
  Var h = tape.add(tok_rows, tape.gather_rows(bm.pos_embed, pos));
  tr.input_hidden = tape.value(h);

  const bool causal = c.kind == ModelKind::DecoderCausal;
  Tensor mask;
  const Tensor* mask_ptr = nullptr;
  if (causal || !key_valid.empty()) {
    mask = Tensor({t_len, t_len});
    double* pm = mask.mut();
    for (int i = 0; i < t_len; ++i) {
      for (int j = 0; j < t_len; ++j) {
        const bool ok = (key_valid.empty() || key_valid[static_cast<size_t>(j)]) && (!causal || j <= i);
        pm[static_cast<size_t>(i) * t_len + j] = ok ? 1.0 : 0.0;
      }
    }
    mask_ptr = &mask;
  }

  const int dk = c.head_dim();
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  tr.layers.reserve(static_cast<size_t>(c.layers));
  for (int l = 0; l < c.layers; ++l) {
    const BoundLayer& bl = bm.layers[static_cast<size_t>(l)];
    LayerTrace lt;
    Var q_full = linear_apply(tape, h, bl.wq);
    Var k_full = linear_apply(tape, h, bl.wk);
    Var v_full = linear_apply(tape, h, bl.wv);
    std::vector<Var> ctx;
    ctx.reserve(static_cast<size_t>(c.heads));
    for (int a = 0; a < c.heads; ++a) {
      Var qa = tape.slice_cols(q_full, a * dk, (a + 1) * dk);
      Var ka = tape.slice_cols(k_full, a * dk, (a + 1) * dk);
      Var va = tape.slice_cols(v_full, a * dk, (a + 1) * dk);
      Var attn = tape.softmax_rows(tape.scale(tape.matmul_nt(qa, ka), inv_sqrt_dk), mask_ptr);
      ctx.push_back(tape.matmul(attn, va));
      lt.q_v.push_back(qa);
      lt.k_v.push_back(ka);
      lt.v_v.push_back(va);
      lt.attn_v.push_back(attn);
      lt.q.push_back(tape.value(qa));
      lt.k.push_back(tape.value(ka));
      lt.v.push_back(tape.value(va));
      lt.attn.push_back(tape.value(attn));
    }
    Var o = tape.layer_norm(tape.add(h, linear_apply(tape, tape.concat_cols(ctx), bl.wo)), bl.ln1_gain,
                            bl.ln1_bias, c.ln_eps);
    lt.mha_out_v = o;
    lt.mha_out = tape.value(o);
    Var up = tape.gelu(linear_apply(tape, o, bl.wu), c.gelu_kind);
    lt.ffn_up_v = up;
    lt.ffn_up = tape.value(up);
    Var down = linear_apply(tape, up, bl.wd);
    lt.ffn_down_v = down;
    lt.ffn_down = tape.value(down);
    h = tape.layer_norm(tape.add(o, down), bl.ln2_gain, bl.ln2_bias, c.ln_eps);
    lt.hidden_v = h;
    lt.hidden = tape.value(h);
    tr.layers.push_back(std::move(lt));
  }

  Var proj;
  if (!c.tied_head) {
    proj = tape.matmul_nt(h, bm.head_weight);
  } else if (c.embed_factorized()) {
    proj = tape.matmul_nt(tape.matmul_nt(h, bm.tok_embed_b), bm.tok_embed_a);
  } else {
    proj = tape.matmul_nt(h, bm.tok_embed);
  }
  Var logits = tape.add_row_bias(proj, bm.head_bias);
  tr.logits_v = logits;
  tr.logits = tape.value(logits);
  return tr;
}

ActivationTrace model_forward(const TransformerModel& m, std::span<const int> tokens,
                              std::span<const uint8_t> key_valid) {
  GradientTape tape(false);
  ActivationTrace tr = model_forward(bind_frozen(m, tape), tape, tokens, key_valid);
  tr.drop_vars();
  return tr;
}

}  // namespace makd
