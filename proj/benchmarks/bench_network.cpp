#include <benchmark/benchmark.h>

#include "semiseg/losses.hpp"
#include "semiseg/network.hpp"

using namespace semiseg;

namespace {

// One Adam step of the segmentation branch on a desk-sized batch.
void BM_TrainStep(benchmark::State& st) {
    NetworkConfig cfg;
    cfg.input_dims = {static_cast<int>(st.range(0)), static_cast<int>(st.range(0))};
    auto net = init_parameters(cfg, 0);
    auto opt = make_adam(net, {});
    torch::manual_seed(0);
    const auto x = torch::randn({10, 1, cfg.input_dims[0], cfg.input_dims[1]});
    const auto y = torch::randint(0, cfg.num_classes_plus_bg, {10, cfg.input_dims[0], cfg.input_dims[1]}, torch::kInt64);
    for (auto _ : st) {
        opt.zero_grad();
        auto loss = dice_loss(net->segment(net->features(x)), y);
        loss.backward();
        opt.step();
    }
}
BENCHMARK(BM_TrainStep)->Arg(48)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_Inference(benchmark::State& st) {
    NetworkConfig cfg;
    auto net = init_parameters(cfg, 0);
    InferenceGuard g(*net);
    const auto x = torch::randn({16, 1, 64, 64});
    for (auto _ : st) benchmark::DoNotOptimize(net->segment(net->features(x)));
}
BENCHMARK(BM_Inference)->Unit(benchmark::kMillisecond);

}  // namespace
