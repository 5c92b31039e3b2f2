#include <benchmark/benchmark.h>

#include "higfa/allocator.hpp"
#include "higfa/contour.hpp"
#include "higfa/guidance.hpp"
#include "higfa/models.hpp"
#include "higfa/synthbench.hpp"

using namespace higfa;
using nd::Tensor;

namespace {

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng = make_rng(1);
  const Tensor a = Tensor::randn({n, n}, rng), b = Tensor::randn({n, n}, rng);
  for (auto _ : state) {
    nd::Tape tape;
    benchmark::DoNotOptimize(nd::matmul(tape.constant(a), tape.constant(b)).value());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

models::DenoiseBatch batch_of(std::size_t rows, Rng& rng) {
  models::DenoiseBatch b;
  b.x = Tensor::randn({rows, 256}, rng);
  b.t.assign(rows, 500);
  for (std::size_t r = 0; r < rows; ++r) b.cond.push_back({static_cast<int>(r % 4), 0});
  b.contour = Tensor({rows, 256}, 0.0);
  b.contour_scale.assign(rows, 1.0);
  return b;
}

void BM_DenoiserForward(benchmark::State& state) {
  Rng rng = make_rng(2);
  models::DenoiserConfig cfg;
  cfg.prompts = 4;
  const models::Denoiser d(cfg, 3);
  const auto batch = batch_of(static_cast<std::size_t>(state.range(0)), rng);
  for (auto _ : state) benchmark::DoNotOptimize(d.predict(batch));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DenoiserForward)->Arg(1)->Arg(64)->Arg(384);

void BM_GuidedSampling(benchmark::State& state) {
  models::DenoiserConfig cfg;
  cfg.prompts = 4;
  const models::Denoiser d(cfg, 4);
  const models::Classifier c({256, 128, 128, 4}, 5);
  const auto schedule = diffusion::build_schedule();
  const auto em = contour::canny(synthbench::render(2, 200, 0, 0));
  std::vector<guidance::SampleRequest> reqs;
  for (int i = 0; i < state.range(0); ++i) {
    reqs.push_back({{i % 4, 0}, guidance::edge_tensor(em), i % 4, static_cast<std::uint64_t>(i)});
  }
  const guidance::GuidanceConfig g;
  for (auto _ : state) {
    benchmark::DoNotOptimize(guidance::higfa_sample_batch(d, &c, models::Decoder::identity(), reqs, g, schedule));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_GuidedSampling)->Arg(1)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_Canny(benchmark::State& state) {
  const auto img = synthbench::render(5, 200, 1, -1);
  for (auto _ : state) benchmark::DoNotOptimize(contour::canny(img));
}
BENCHMARK(BM_Canny);

void BM_AugmentContourNonrigid(benchmark::State& state) {
  const auto img = synthbench::render(4, 200, 0, 0);
  std::uint64_t seed = 0;
  for (auto _ : state) {
    Rng rng = make_rng(++seed);
    benchmark::DoNotOptimize(contour::augment_contour(img, contour::Rigidity::nonrigid, {}, rng));
  }
}
BENCHMARK(BM_AugmentContourNonrigid);

void BM_FitTps(benchmark::State& state) {
  Rng rng = make_rng(6);
  std::uniform_real_distribution<double> u(0.0, 15.0);
  std::vector<contour::Point> src, dst;
  for (int i = 0; i < state.range(0); ++i) {
    src.push_back({u(rng), u(rng)});
    dst.push_back({src.back().x + 0.5, src.back().y - 0.5});
  }
  for (auto _ : state) benchmark::DoNotOptimize(contour::fit_tps(src, dst));
}
BENCHMARK(BM_FitTps)->Arg(5)->Arg(20);

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
