#include "test_doctest.hpp"

#include <cmath>
#include <fstream>
#include <iterator>

#include "semiseg/checkpoint.hpp"
#include "semiseg/network.hpp"
#include "test_util.hpp"

using namespace semiseg;

namespace {

NetworkConfig tiny() {
    NetworkConfig c;
    c.num_enc_blocks = 3;
    c.num_dec_blocks = 2;
    c.base_channels = 4;
    c.num_classes_plus_bg = 4;
    c.contrastive_dim = 6;
    c.input_dims = {16, 16};
    return c;
}

bool same_state(SegNet& a, SegNet& b) {
    const auto sa = snapshot(a), sb = snapshot(b);
    if (sa.size() != sb.size()) return false;
    for (std::size_t i = 0; i < sa.size(); ++i) {
        if (sa[i].first != sb[i].first || !torch::equal(sa[i].second, sb[i].second)) return false;
    }
    return true;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST_SUITE("network") {

TEST_CASE("config validation") {
    auto c = tiny();
    CHECK_NOTHROW(c.validate());
    c.num_dec_blocks = 1;
    CHECK_THROWS(c.validate());
    c = tiny();
    c.input_dims = {18, 16};
    CHECK_THROWS(c.validate());
    CHECK(tiny().encoder_channels() == std::vector<int>{4, 8, 16});
}

TEST_CASE("initialization is deterministic per seed") {
    auto a = init_parameters(tiny(), 3), b = init_parameters(tiny(), 3), c = init_parameters(tiny(), 4);
    CHECK(same_state(a, b));
    CHECK_FALSE(same_state(a, c));
}

TEST_CASE("conv weights follow the He-normal scale") {
    auto net = init_parameters(tiny(), 1);
    int checked = 0;
    for (const auto& p : net->named_parameters()) {
        const auto& w = p.value();
        if (w.dim() != 4 || w.numel() < 64) continue;
        const double fan_in = static_cast<double>(w.size(1) * w.size(2) * w.size(3));
        const double target = std::sqrt(2.0 / fan_in);
        const double got = w.std().item<double>();
        CHECK_MESSAGE(got > target / 3.0, p.key());
        CHECK_MESSAGE(got < target * 3.0, p.key());
        ++checked;
    }
    CHECK(checked > 5);
    for (const auto& p : net->named_parameters()) {
        if (p.key().ends_with(".bias") && p.key().find("bn") == std::string::npos) CHECK(p.value().abs().max().item<double>() == 0.0);
    }
}

TEST_CASE("output shapes and softmax") {
    auto net = init_parameters(tiny(), 2);
    InferenceGuard g(*net);
    const auto x = torch::randn({3, 1, 16, 16});
    const auto f = net->features(x);
    CHECK(f.sizes() == torch::IntArrayRef({3, 4, 16, 16}));
    const auto p = net->segment(f);
    CHECK(p.sizes() == torch::IntArrayRef({3, 4, 16, 16}));
    CHECK(torch::allclose(p.sum(1), torch::ones({3, 16, 16}), 1e-5, 1e-6));
    CHECK((p >= 0).all().item<bool>());
    const auto z = net->embed(f);
    CHECK(z.sizes() == torch::IntArrayRef({3, 6, 16, 16}));
    CHECK(torch::isfinite(z).all().item<bool>());
    CHECK_THROWS(net->features(torch::randn({1, 1, 8, 16})));
}

TEST_CASE("eval mode treats batch items independently") {
    auto net = init_parameters(tiny(), 5);
    InferenceGuard g(*net);
    const auto x = torch::randn({1, 1, 16, 16});
    const auto single = net->segment(net->features(x));
    const auto dup = net->segment(net->features(torch::cat({x, torch::randn({1, 1, 16, 16}), x})));
    CHECK(torch::allclose(dup[0], single[0], 1e-5, 1e-6));
    CHECK(torch::allclose(dup[2], single[0], 1e-5, 1e-6));
}

TEST_CASE("the contrastive head commutes with spatial permutations") {
    auto net = init_parameters(tiny(), 6);
    InferenceGuard g(*net);
    const auto f = torch::randn({2, 4, 16, 16});
    const auto perm = torch::randperm(256);
    const auto flat = f.reshape({2, 4, 256}).index_select(2, perm).reshape({2, 4, 16, 16});
    const auto z = net->embed(f).reshape({2, 6, 256}).index_select(2, perm);
    const auto zp = net->embed(flat).reshape({2, 6, 256});
    CHECK(torch::allclose(z, zp, 1e-5, 1e-6));
}

TEST_CASE("segment_volume returns labels in range") {
    auto net = init_parameters(tiny(), 7);
    Volume v("v", 3, 16, 16, {1.0, 1.0});
    std::mt19937_64 gen(1);
    std::normal_distribution<float> d;
    for (auto& x : v.intensities) x = d(gen);
    const auto lab = segment_volume(net, v, 2);
    CHECK(lab.slices == 3);
    for (auto l : lab.labels) CHECK(l < 4);
    CHECK(net->is_training());
}

TEST_CASE("Adam with zero learning rate leaves parameters bitwise unchanged") {
    auto net = init_parameters(tiny(), 8);
    const auto before = snapshot(net);
    AdamOptions o;
    o.learning_rate = 0.0;
    auto opt = make_adam(net, o);
    const auto x = torch::randn({2, 1, 16, 16});
    opt.zero_grad();
    net->segment(net->features(x)).pow(2).mean().backward();
    opt.step();
    // Running statistics move in train mode; parameters must not.
    const auto params = net->named_parameters();
    for (const auto& [name, t] : before) {
        if (const auto* p = params.find(name)) CHECK_MESSAGE(torch::equal(*p, t), name);
    }
}

TEST_CASE("Adam matches the reference update on a scalar") {
    auto w = torch::tensor({1.0f}, torch::requires_grad());
    AdamOptions o;
    o.learning_rate = 0.1;
    Adam opt({{"w", w}}, o);
    double m = 0, v = 0, ref = 1.0;
    for (int t = 1; t <= 5; ++t) {
        opt.zero_grad();
        (w * w).sum().backward();
        const double g = 2 * ref;
        m = o.beta1 * m + (1 - o.beta1) * g;
        v = o.beta2 * v + (1 - o.beta2) * g * g;
        const double mh = m / (1 - std::pow(o.beta1, t)), vh = v / (1 - std::pow(o.beta2, t));
        ref -= o.learning_rate * mh / (std::sqrt(vh) + o.eps);
        opt.step();
        CHECK(w.item<double>() == doctest::Approx(ref).epsilon(1e-6));
    }
    opt.reset();
    CHECK(opt.state().empty());
}

}  // TEST_SUITE

TEST_SUITE("checkpoint") {

TEST_CASE("save, load, save gives identical bytes") {
    testutil::TempDir dir("ckpt");
    auto net = init_parameters(tiny(), 1);
    auto opt = make_adam(net, {});
    opt.zero_grad();
    net->segment(net->features(torch::randn({2, 1, 16, 16}))).pow(2).mean().backward();
    opt.step();
    save_checkpoint(dir.path() / "a.ckpt", net, &opt, 17, {{"note", "x"}});

    auto other = init_parameters(tiny(), 2);
    auto opt2 = make_adam(other, {});
    CHECK(load_checkpoint(dir.path() / "a.ckpt", other, &opt2) == 17);
    CHECK(same_state(net, other));
    save_checkpoint(dir.path() / "b.ckpt", other, &opt2, 17, {{"note", "x"}});
    CHECK(slurp(dir.path() / "a.ckpt") == slurp(dir.path() / "b.ckpt"));

    const auto data = read_checkpoint(dir.path() / "a.ckpt");
    CHECK(data.config == tiny());
    CHECK(data.extra["note"] == "x");
    auto built = load_network(dir.path() / "a.ckpt");
    CHECK(same_state(built, net));
}

TEST_CASE("config mismatch and corrupt files are rejected") {
    testutil::TempDir dir("ckptbad");
    auto net = init_parameters(tiny(), 1);
    save_checkpoint(dir.path() / "a.ckpt", net, nullptr, 0);
    auto c = tiny();
    c.contrastive_dim = 7;
    auto other = init_parameters(c, 1);
    CHECK_THROWS(load_checkpoint(dir.path() / "a.ckpt", other));
    std::ofstream(dir.path() / "bad.ckpt", std::ios::binary) << "NOTACKPT........";
    CHECK_THROWS(read_checkpoint(dir.path() / "bad.ckpt"));
    CHECK_THROWS(read_checkpoint(dir.path() / "missing.ckpt"));
}

TEST_CASE("pretrained backbone copies theta and redraws both heads") {
    testutil::TempDir dir("ckptbb");
    auto src = init_parameters(tiny(), 1);
    save_checkpoint(dir.path() / "a.ckpt", src, nullptr, 0);
    auto dst = init_parameters(tiny(), 2);
    load_pretrained_backbone(dir.path() / "a.ckpt", dst, 9);
    const auto s = src->named_parameters(), d = dst->named_parameters();
    for (const auto& p : s) {
        const bool backbone = p.key().starts_with("backbone.");
        const bool equal = torch::equal(p.value(), d[p.key()]);
        if (backbone) CHECK_MESSAGE(equal, p.key());
        if (!backbone && p.value().dim() == 4) CHECK_MESSAGE(!equal, p.key());
    }
}

}  // TEST_SUITE
