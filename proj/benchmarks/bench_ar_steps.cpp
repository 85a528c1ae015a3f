#include <benchmark/benchmark.h>

#include "valler/lm.hpp"

namespace {

using namespace valler;

const lm::LMWeights& model() {
  static const lm::LMWeights w = [] {
    lm::LMConfig cfg;
    cfg.layers = 4;
    cfg.heads = 4;
    cfg.dim = 128;
    cfg.ffn = 512;
    cfg.max_seq_len = 800;
    return lm::LMWeights(lm::ModelKind::AR, cfg, 1);
  }();
  return w;
}

// Cached decoder loop: 375 steps is the merged block rate of 10 s at 75 Hz, 750 the full rate.
void BM_CachedArSteps(benchmark::State& state) {
  const auto& w = model();
  const std::vector<int> prompt{1, 2, 3, 4, 5, 6, 7, 8};
  const int steps = static_cast<int>(state.range(0));
  for (auto _ : state) {
    lm::ARDecoder dec(w, prompt);
    int a = w.config().acoustic_bos();
    for (int s = 0; s < steps; ++s) {
      const auto out = dec.step(a, prompt[static_cast<std::size_t>(s) % prompt.size()]);
      Eigen::Index best = 0;
      out.acoustic.head(w.config().acoustic_vocab).maxCoeff(&best);
      a = static_cast<int>(best);
    }
    benchmark::DoNotOptimize(a);
  }
  state.SetItemsProcessed(state.iterations() * steps);
}
BENCHMARK(BM_CachedArSteps)->Arg(375)->Arg(750)->Unit(benchmark::kMillisecond);

void BM_ArForwardFullSequence(benchmark::State& state) {
  const auto& w = model();
  lm::ARSequence seq;
  seq.prompt = {1, 2, 3, 4, 5, 6, 7, 8};
  for (int s = 0; s < state.range(0); ++s) {
    seq.acoustic.push_back(s % w.config().acoustic_vocab);
    seq.phonemes.push_back(s % 8);
  }
  for (auto _ : state) benchmark::DoNotOptimize(lm::ar_forward(w, seq));
}
BENCHMARK(BM_ArForwardFullSequence)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

}  // namespace
