#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "makd/tape.hpp"
#include "makd/tensor.hpp"

namespace makd {

enum class ModelKind { EncoderMlm, DecoderCausal };

std::string kind_to_string(ModelKind k);
ModelKind kind_from_string(const std::string& s);

struct ModelConfig {
  ModelKind kind = ModelKind::EncoderMlm;
  int layers = 4;
  int hidden = 128;      // d
  int ffn = 0;           // d_f; 0 resolves to 4*hidden
  int heads = 4;         // A_h
  int vocab_size = 0;
  int max_seq_len = 64;
  bool tied_head = true;
  double ln_eps = 1e-5;
  GeluKind gelu_kind = GeluKind::Tanh;
  // role -> preserved rank for factorized layers; absent role means dense.
  // Roles: wq wk wv wo wu wd, plus "embed" for the token embedding.
  std::map<std::string, int> rank_map;

  int head_dim() const { return hidden / heads; }
  bool embed_factorized() const { return rank_map.count("embed") != 0; }
  // Resolves ffn default and checks divisibility/positivity constraints.
  void finalize();
};

// Dense weight [in x out] or factorized pair a[in x k], b[k x out]. The
// bias rides on the output side so the affine map is preserved exactly.
// Factorized forward is (x*a)*b; a*b is never materialized.
struct LinearLayer {
  Tensor weight;
  Tensor a, b;
  Tensor bias;
  bool factorized = false;

  int in_dim() const { return factorized ? a.rows() : weight.rows(); }
  int out_dim() const { return factorized ? b.cols() : weight.cols(); }
  int rank() const { return factorized ? a.cols() : 0; }

  static LinearLayer dense(int in, int out, Rng& rng, double stddev);
  static LinearLayer from_factors(Tensor a, Tensor b, Tensor bias);
};

struct LayerParams {
  LinearLayer wq, wk, wv, wo;   // d x d projections
  Tensor ln1_gain, ln1_bias;    // after the attention residual
  LinearLayer wu, wd;           // d x d_f and d_f x d
  Tensor ln2_gain, ln2_bias;    // after the ffn residual
};

struct TransformerModel {
  ModelConfig config;
  Tensor tok_embed;                  // [vocab x d]; dense embedding path
  Tensor tok_embed_a, tok_embed_b;   // [vocab x k], [k x d] when "embed" is in rank_map
  Tensor pos_embed;                  // [max_seq x d]
  std::vector<LayerParams> layers;
  Tensor head_weight;                // [vocab x d]; unused when tied_head
  Tensor head_bias;                  // [vocab]
};

TransformerModel init_model(ModelConfig config, uint64_t seed, double init_stddev = 0.02);
// Zero-filled model of the right shapes (checkpoint loading, tests).
TransformerModel build_model_shell(ModelConfig config);

struct ParamRef {
  std::string name;
  Tensor* tensor;
};
struct ConstParamRef {
  std::string name;
  const Tensor* tensor;
};

// Stable, checkpoint-manifest order.
std::vector<ParamRef> parameters(TransformerModel& m);
std::vector<ConstParamRef> parameters(const TransformerModel& m);
int64_t parameter_count(const TransformerModel& m);

// ---- forward ------------------------------------------------------------

struct BoundLinear {
  Var weight, a, b, bias;
  bool factorized = false;
};

struct BoundLayer {
  BoundLinear wq, wk, wv, wo, wu, wd;
  Var ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

// Model parameters leafed onto a tape. With trainable=true each parameter
// var collects gradients and `refs` points back at the owning tensors for
// the optimizer.
struct BoundModel {
  const TransformerModel* model = nullptr;
  Var tok_embed, tok_embed_a, tok_embed_b, pos_embed, head_weight, head_bias;
  std::vector<BoundLayer> layers;
  std::vector<ParamRef> refs;  // empty for constant bindings
  std::vector<Var> ref_vars;   // parallel to refs
};

BoundModel bind_trainable(TransformerModel& m, GradientTape& tape);
BoundModel bind_frozen(const TransformerModel& m, GradientTape& tape);

// Gradient map after backward: parameter name -> accumulated gradient.
std::map<std::string, Tensor> gradient_map(const BoundModel& bm, const GradientTape& tape);

// Everything the aspect losses consume, captured per layer. Tensors are
// plain values; the *_v handles are live only while the originating tape is.
struct LayerTrace {
  std::vector<Tensor> q, k, v;  // per head, [T x d_k]
  std::vector<Tensor> attn;     // per head, [T x T]
  Tensor mha_out;               // O_l, [T x d]
  Tensor ffn_up;                // post-gelu up activation, [T x d_f]
  Tensor ffn_down;              // down projection output, [T x d]
  Tensor hidden;                // H_l, [T x d]
  std::vector<Var> q_v, k_v, v_v, attn_v;
  Var mha_out_v, ffn_up_v, ffn_down_v, hidden_v;
};

struct ActivationTrace {
  int seq_len = 0;
  std::vector<int> valid_rows;  // unpadded query positions
  Tensor input_hidden;          // H^0
  std::vector<LayerTrace> layers;
  Tensor logits;                // [T x vocab]
  Var logits_v;

  void drop_vars();
};

// Forward pass for one sequence. key_valid marks attendable positions
// (empty = all valid); decoder-causal models additionally mask j > i.
// Token ids must be in [0, vocab); length must not exceed max_seq_len.
ActivationTrace model_forward(const BoundModel& bm, GradientTape& tape, std::span<const int> tokens,
                              std::span<const uint8_t> key_valid = {});

// Eager convenience overload; returned trace has values only.
ActivationTrace model_forward(const TransformerModel& m, std::span<const int> tokens,
                              std::span<const uint8_t> key_valid = {});

}  // namespace makd
