#include <benchmark/benchmark.h>

#include "hts/data.hpp"
#include "hts/image.hpp"
#include "hts/model.hpp"
#include "hts/ops.hpp"
#include "hts/rng.hpp"
#include "hts/training.hpp"

using namespace hts;

namespace {

template <typename T>
Tensor<T> random(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal());
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random<float>({n, n}, 1);
  const auto b = random<float>({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

template <typename T>
void BM_ToyForward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const auto spec = model::ModelSpec::preset("toy", model::Task::age8);
  Rng rng(3);
  auto params = model::init_parameters<T>(spec, rng);
  const auto images = random<T>({batch, 32, 32, 3}, 4);
  for (auto _ : state) {
    Tape<T> tape;
    auto bound = model::bind(tape, params);
    benchmark::DoNotOptimize(model::forward(tape, bound, spec, images, model::ForwardOptions<T>{}));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK_TEMPLATE(BM_ToyForward, float)->Arg(1)->Arg(32);
BENCHMARK_TEMPLATE(BM_ToyForward, double)->Arg(32);

void BM_ToyTrainEpoch(benchmark::State& state) {
  const auto spec = model::ModelSpec::preset("toy", model::Task::age8);
  data::SynthOptions o;
  o.n = static_cast<std::size_t>(state.range(0));
  const auto synth = data::synthesize_dataset(o);
  data::BatchOptions bo;
  const auto batches = data::make_batches<float>(synth.dataset, bo);
  Rng rng(5);
  auto params = model::init_parameters<float>(spec, rng);
  train::RAdam<float> opt(train::RAdamOptions{1e-3});
  const auto loss = train::LossConfig::for_task(model::Task::age8);
  for (auto _ : state) benchmark::DoNotOptimize(train::train_epoch(spec, params, batches, loss, opt));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ToyTrainEpoch)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_Augment(benchmark::State& state) {
  data::SynthOptions o;
  o.n = 8;
  o.size = static_cast<std::size_t>(state.range(0));
  const auto img = data::synthesize_dataset(o).dataset.images.front();
  const data::AugmentConfig cfg;
  Rng rng(6);
  for (auto _ : state) benchmark::DoNotOptimize(data::augment(img, cfg, rng));
}
BENCHMARK(BM_Augment)->Arg(32)->Arg(224);

void BM_Resize(benchmark::State& state) {
  data::SynthOptions o;
  o.n = 8;
  o.size = 224;
  const auto img = data::synthesize_dataset(o).dataset.images.front();
  const auto out = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(image::resize_bilinear(img, out, out));
}
BENCHMARK(BM_Resize)->Arg(32)->Arg(224);

void BM_NormalizeBatch(benchmark::State& state) {
  const auto batch = random<float>({32, 32, 32, 3}, 7);
  for (auto _ : state) benchmark::DoNotOptimize(data::normalize_batch(batch));
}
BENCHMARK(BM_NormalizeBatch);

}  // namespace

BENCHMARK_MAIN();
