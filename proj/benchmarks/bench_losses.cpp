#include <benchmark/benchmark.h>

#include "semiseg/losses.hpp"

using namespace semiseg;

namespace {

torch::Tensor block_labels(int B, int H, int W, int C) {
    auto l = torch::zeros({B, H, W}, torch::kInt64);
    for (int c = 1; c <= C; ++c) l.slice(1, c * H / (C + 2), (c + 1) * H / (C + 2)).fill_(c);
    return l;
}

void BM_ContrastiveBatch(benchmark::State& st) {
    const int B = static_cast<int>(st.range(0)), H = 64, C = 3;
    torch::manual_seed(0);
    const auto z = torch::randn({B, 16, H, H});
    const auto l = block_labels(B, H, H, C);
    ContrastiveConfig cfg;
    cfg.mode = st.range(1) ? MatchMode::inter : MatchMode::intra;
    Rng rng(1);
    for (auto _ : st) benchmark::DoNotOptimize(contrastive_batch_loss(z, l, C, cfg, rng).value);
}
BENCHMARK(BM_ContrastiveBatch)->Args({20, 0})->Args({20, 1})->Unit(benchmark::kMicrosecond);

void BM_DiceForwardBackward(benchmark::State& st) {
    const int B = static_cast<int>(st.range(0));
    torch::manual_seed(0);
    const auto logits = torch::randn({B, 4, 64, 64});
    const auto l = block_labels(B, 64, 64, 3);
    for (auto _ : st) {
        auto x = logits.clone().requires_grad_(true);
        dice_loss(torch::softmax(x, 1), l).backward();
        benchmark::DoNotOptimize(x.grad());
    }
}
BENCHMARK(BM_DiceForwardBackward)->Arg(10)->Arg(20)->Unit(benchmark::kMicrosecond);

}  // namespace
