#include <benchmark/benchmark.h>

#include "semiseg/augment.hpp"

using namespace semiseg;

namespace {

void BM_SampleAndApplyGeom(benchmark::State& st) {
    AugmentConfig cfg;
    cfg.elastic_prob = st.range(0) ? 1.0 : 0.0;
    Image img(64, 64, 0.5f);
    Rng rng(0);
    for (auto _ : st) {
        const auto t = sample_geom(rng, cfg, 64, 64);
        benchmark::DoNotOptimize(apply_geom(img, t));
    }
}
BENCHMARK(BM_SampleAndApplyGeom)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);

}  // namespace
