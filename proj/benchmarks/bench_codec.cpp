#include <benchmark/benchmark.h>

#include <random>

#include "valler/codec.hpp"
#include "valler/common.hpp"

namespace {

using namespace valler;

LatentSeq gaussian(std::size_t length, std::size_t dim, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  LatentSeq z(length, dim);
  for (Eigen::Index i = 0; i < z.frames.size(); ++i) z.frames.data()[i] = static_cast<float>(normal(rng));
  return z;
}

codec::CodebookSet books(int k, int dim, const codec::MergeConfig& merge) {
  Rng rng(1);
  codec::CodebookSet set;
  set.merge = merge;
  double scale = 1.0;
  for (int d = 0; d < codec::kNumLayers; ++d) {
    set.books.emplace_back(d, gaussian(static_cast<std::size_t>(k), static_cast<std::size_t>(dim), rng, scale).frames);
    scale *= 0.5;
  }
  return set;
}

void BM_QuantizeLayer(benchmark::State& state) {
  Rng rng(2);
  const auto set = books(static_cast<int>(state.range(0)), 16, codec::MergeConfig::none());
  const auto z = gaussian(750, 16, rng);
  for (auto _ : state) benchmark::DoNotOptimize(codec::quantize_layer(z, set.books[0]));
  state.SetItemsProcessed(state.iterations() * 750);
}
BENCHMARK(BM_QuantizeLayer)->Arg(64)->Arg(256)->Arg(1024);

void BM_Encode(benchmark::State& state) {
  Rng rng(3);
  const auto merge = state.range(0) ? codec::MergeConfig::layers(1, 1, 2) : codec::MergeConfig::none();
  const auto set = books(64, 16, merge);
  const auto z = gaussian(750, 16, rng);
  for (auto _ : state) benchmark::DoNotOptimize(codec::encode(z, set));
  state.SetLabel(merge.label());
  state.SetItemsProcessed(state.iterations() * 750);
}
BENCHMARK(BM_Encode)->Arg(0)->Arg(1);

void BM_Decode(benchmark::State& state) {
  Rng rng(4);
  const auto set = books(64, 16, codec::MergeConfig::layers(1, 1, 2));
  const auto codes = codec::encode(gaussian(750, 16, rng), set);
  for (auto _ : state) benchmark::DoNotOptimize(codec::decode(codes, set));
  state.SetItemsProcessed(state.iterations() * 750);
}
BENCHMARK(BM_Decode);

}  // namespace
