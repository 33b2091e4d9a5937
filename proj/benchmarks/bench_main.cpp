#include <benchmark/benchmark.h>

#include <vector>

#include "exfm/das.hpp"
#include "exfm/distill.hpp"
#include "exfm/stream.hpp"

using namespace exfm;

namespace {

void BM_VmForward(benchmark::State& state) {
  numerics::SeededRng rng(1);
  const auto vm = models::make_vm(models::VmShape{}, rng);
  const auto x = numerics::gaussian_vector(rng, 16);
  for (auto _ : state) benchmark::DoNotOptimize(models::forward(vm, x.span()).y_s);
}
BENCHMARK(BM_VmForward);

void BM_VmGradients(benchmark::State& state) {
  numerics::SeededRng rng(2);
  const auto vm = models::make_vm(models::VmShape{}, rng);
  const auto x = numerics::gaussian_vector(rng, 16);
  const auto mode = static_cast<distill::DistillMode>(state.range(0));
  for (auto _ : state) {
    auto g = distill::vm_gradients(vm, x.span(), {1, 0.3, 0.4}, mode, {});
    benchmark::DoNotOptimize(g.terms.serving);
  }
}
BENCHMARK(BM_VmGradients)->DenseRange(0, 3);

void BM_VmTrainStepAdapter(benchmark::State& state) {
  numerics::SeededRng rng(3);
  auto vm = models::make_vm(models::VmShape{}, rng);
  auto sa = models::make_student_adapter(8, rng);
  const auto x = numerics::gaussian_vector(rng, 16);
  for (auto _ : state) {
    distill::vm_train_step(vm, sa, {x.span(), 1, 0.3}, distill::DistillMode::kAHPlusSA, {}, {});
  }
}
BENCHMARK(BM_VmTrainStepAdapter);

void BM_FmForward(benchmark::State& state) {
  numerics::SeededRng rng(4);
  const std::vector<std::size_t> hidden{256, 256};
  const auto fm = models::make_fm(16, hidden, rng);
  const auto x = numerics::gaussian_vector(rng, 16);
  for (auto _ : state) benchmark::DoNotOptimize(models::fm_forward(fm, x.span()));
}
BENCHMARK(BM_FmForward);

void BM_Auc(benchmark::State& state) {
  numerics::SeededRng rng(5);
  std::vector<double> s(state.range(0));
  std::vector<int> y(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = rng.uniform();
    y[i] = rng.bernoulli(0.3);
  }
  for (auto _ : state) benchmark::DoNotOptimize(stream::auc(s, y));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Auc)->RangeMultiplier(10)->Range(1000, 100000)->Complexity();

void BM_DasSupervise(benchmark::State& state) {
  numerics::SeededRng rng(6);
  const std::vector<std::size_t> hidden{256, 256};
  const auto fm = models::make_fm(16, hidden, rng);
  das::DasService svc(das::ServiceConfig{});
  svc.publish(1, fm.net, 0);
  stream::Example ex;
  ex.features = numerics::gaussian_vector(rng, 16);
  das::SharedDatasetRow row;
  row.example = &ex;
  das::Time now = 1'000'000;
  for (auto _ : state) {
    row.example_id++;
    benchmark::DoNotOptimize(svc.supervise(row, now++).y_f);
  }
}
BENCHMARK(BM_DasSupervise);

void BM_ExhaustiveSmall(benchmark::State& state) {
  das::Scenario sc;
  sc.num_tasks = 1;
  sc.publish_times = {1, 9};
  sc.horizon = 20;
  for (auto _ : state) benchmark::DoNotOptimize(das::explore_exhaustive(sc).states);
}
BENCHMARK(BM_ExhaustiveSmall)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
