// Microbenchmarks for the kernels the training loop lives in, plus a
// dense-vs-factorized forward comparison at a BERT-base-shaped layer.

#include <benchmark/benchmark.h>

#include <vector>

#include "makd/factorize.hpp"
#include "makd/model.hpp"
#include "makd/svd.hpp"
#include "makd/tensor.hpp"

namespace {

makd::Tensor rand_mat(int n, int m, uint64_t seed) {
  makd::Rng rng(seed);
  return makd::random_normal({n, m}, rng, 1.0);
}

void bm_matmul(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const makd::Tensor a = rand_mat(n, n, 1);
  const makd::Tensor b = rand_mat(n, n, 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(makd::matmul(a, b));
  }
  state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}
BENCHMARK(bm_matmul)->Arg(64)->Arg(128)->Arg(256);

void bm_softmax_rows(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const makd::Tensor x = rand_mat(n, n, 3);
  for (auto _ : state) {
    benchmark::DoNotOptimize(makd::softmax_rows(x));
  }
}
BENCHMARK(bm_softmax_rows)->Arg(64)->Arg(256);

void bm_layer_norm(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const makd::Tensor x = rand_mat(n, n, 4);
  makd::Tensor gain({n});
  makd::Tensor bias({n});
  for (int i = 0; i < n; ++i) gain.mut()[static_cast<size_t>(i)] = 1.0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(makd::layer_norm(x, gain, bias, 1e-5));
  }
}
BENCHMARK(bm_layer_norm)->Arg(128);

void bm_gelu(benchmark::State& state) {
  const makd::Tensor x = rand_mat(256, 256, 5);
  for (auto _ : state) {
    benchmark::DoNotOptimize(makd::gelu(x, makd::GeluKind::Tanh));
  }
}
BENCHMARK(bm_gelu);

// x[T x d] through a dense d x d projection vs. its rank-k factor pair:
// T*d*d MACs vs. T*k*(2d) MACs.
void bm_linear_dense(benchmark::State& state) {
  const int d = 768, t = 32;
  const makd::Tensor x = rand_mat(t, d, 6);
  const makd::Tensor w = rand_mat(d, d, 7);
  for (auto _ : state) {
    benchmark::DoNotOptimize(makd::matmul(x, w));
  }
  state.SetItemsProcessed(state.iterations() * 2LL * t * d * d);
}
BENCHMARK(bm_linear_dense);

void bm_linear_factorized(benchmark::State& state) {
  const int d = 768, k = 256, t = 32;
  const makd::Tensor x = rand_mat(t, d, 8);
  const makd::Tensor w = rand_mat(d, d, 9);
  auto [a, b] = makd::svd_truncate(w, k);
  for (auto _ : state) {
    benchmark::DoNotOptimize(makd::matmul(makd::matmul(x, a), b));
  }
  state.SetItemsProcessed(state.iterations() * 2LL * t * k * (d + d));
}
BENCHMARK(bm_linear_factorized);

void bm_svd(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const makd::Tensor w = rand_mat(n, n, 10);
  for (auto _ : state) {
    benchmark::DoNotOptimize(makd::svd(w));
  }
}
BENCHMARK(bm_svd)->Arg(32)->Arg(64);

void bm_model_forward(benchmark::State& state) {
  makd::ModelConfig mc;
  mc.kind = makd::ModelKind::EncoderMlm;
  mc.layers = 4;
  mc.hidden = 64;
  mc.ffn = 256;
  mc.heads = 4;
  mc.vocab_size = 64;
  mc.max_seq_len = 32;
  mc.finalize();
  const makd::TransformerModel model = makd::init_model(mc, 11);
  std::vector<int> tokens(16);
  makd::Rng rng(12);
  for (auto& t : tokens) t = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(mc.vocab_size)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(makd::model_forward(model, tokens));
  }
}
BENCHMARK(bm_model_forward);

}  // namespace

BENCHMARK_MAIN();
