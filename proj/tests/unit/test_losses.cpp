#include "test_doctest.hpp"

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "semiseg/losses.hpp"

using namespace semiseg;

namespace {

oracle::Anchors to_oracle(const PixelCoordSet& s) {
    oracle::Anchors a;
    for (const auto& cls : s.per_class) {
        a.emplace_back();
        for (const auto& p : cls) a.back().push_back({p.row, p.col});
    }
    return a;
}

torch::Tensor stack_z(const std::vector<oracle::ToyMap>& maps) {
    std::vector<torch::Tensor> z;
    for (const auto& m : maps) z.push_back(m.z_tensor());
    return torch::stack(z);
}

torch::Tensor stack_labels(const std::vector<oracle::ToyMap>& maps) {
    std::vector<torch::Tensor> l;
    for (const auto& m : maps) l.push_back(m.label_tensor());
    return torch::stack(l);
}

// Replays the documented draw order and sums the brute-force pair losses.
double batch_oracle(const std::vector<oracle::ToyMap>& maps, int C, const ContrastiveConfig& cfg, std::uint64_t seed,
                    int* contributing) {
    Rng rng(seed);
    const int B = static_cast<int>(maps.size());
    double sum = 0.0;
    int n = 0;
    for (int b = 0; b < B; ++b) {
        const int partner = cfg.mode == MatchMode::inter ? rng.uniform_int(0, B - 1) : b;
        const auto anchors = sample_anchor_coords(maps[static_cast<std::size_t>(b)].label_tensor(), C,
                                                  cfg.samples_per_class, rng);
        int shared = 0;
        const double v = oracle::pair_loss(maps[static_cast<std::size_t>(b)], to_oracle(anchors),
                                           maps[static_cast<std::size_t>(partner)], cfg.temperature, C, &shared);
        if (shared == 0) continue;
        sum += v;
        ++n;
    }
    *contributing = n;
    return n ? sum / n : 0.0;
}

torch::Tensor random_probs(std::mt19937_64& gen, int B, int K, int H, int W) {
    std::normal_distribution<double> d;
    auto t = torch::empty({B, K, H, W}, torch::kDouble);
    auto* p = t.data_ptr<double>();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = d(gen);
    return torch::softmax(t, 1);
}

std::vector<double> to_vec(const torch::Tensor& t) {
    auto c = t.contiguous().to(torch::kDouble);
    return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

std::vector<int> to_ivec(const torch::Tensor& t) {
    auto c = t.contiguous().to(torch::kInt64);
    return {c.data_ptr<int64_t>(), c.data_ptr<int64_t>() + c.numel()};
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("cosine similarity examples") {
    const std::vector<double> a{1, 0}, b{0, 1}, c{2, 0}, d{-1, 0}, zero{0, 0};
    CHECK(cosine_sim(a, b) == doctest::Approx(0.0));
    CHECK(cosine_sim(a, c) == doctest::Approx(1.0));
    CHECK(cosine_sim(a, d) == doctest::Approx(-1.0));
    CHECK_THROWS_AS(cosine_sim(a, zero), std::invalid_argument);
    CHECK(cosine_sim(torch::tensor({3.0, 4.0}), torch::tensor({4.0, 3.0})).item<double>() == doctest::Approx(24.0 / 25.0));
    CHECK_THROWS(cosine_sim(torch::zeros({2}), torch::ones({2})));
}

TEST_CASE("class means average all pixels of the class") {
    std::mt19937_64 gen(1);
    const auto m = oracle::random_map(gen, 8, 8, 5, 3, 2);
    const auto got = class_means(m.z_tensor(), m.label_tensor(), 3);
    for (int c = 1; c <= 3; ++c) {
        const auto ref = oracle::class_mean(m, c);
        REQUIRE(ref.has_value());
        CHECK(got.has(c));
        for (int d = 0; d < 5; ++d) CHECK(got.means[c - 1][d].item<double>() == doctest::Approx((*ref)[d]).epsilon(1e-12));
    }
    auto labels = m.label_tensor().clone();
    labels.masked_fill_(labels == 2, 0);
    CHECK_FALSE(class_means(m.z_tensor(), labels, 3).has(2));
    CHECK_THROWS(class_means(m.z_tensor(), labels.slice(0, 0, 4), 3));
}

TEST_CASE("sample_coords draws without replacement and clamps to the pool") {
    auto labels = torch::zeros({6, 6}, torch::kInt64);
    labels[1][2] = 1;
    labels[4][0] = 1;
    Rng rng(1);
    const auto all = sample_coords(labels, 1, 5, rng);
    REQUIRE(all.size() == 2);
    CHECK(all[0] == Coord{1, 2});
    CHECK(sample_coords(labels, 2, 3, rng).empty());
    labels.fill_(3);
    for (int k = 0; k < 20; ++k) {
        const auto s = sample_coords(labels, 3, 7, rng);
        REQUIRE(s.size() == 7);
        for (std::size_t i = 1; i < s.size(); ++i) CHECK(s[i - 1].row * 6 + s[i - 1].col < s[i].row * 6 + s[i].col);
    }
}

TEST_CASE("closed form: orthogonal class prototypes") {
    // Class 1 pixels are e1, class 2 pixels are e2: s_own = 1, s_other = 0.
    oracle::ToyMap m{2, 2, 2, {1, 0, 1, 0, 0, 1, 0, 1}, {1, 1, 2, 2}};
    const auto means = class_means(m.z_tensor(), m.label_tensor(), 2);
    const double tau = 0.1;
    const double expect = std::log1p(std::exp(-1.0 / tau));
    CHECK(contrastive_pixel_term(m.z_tensor().select(1, 0).select(1, 0), means, 1, tau).item<double>() ==
          doctest::Approx(expect).epsilon(1e-12));
    PixelCoordSet anchors{{{{0, 0}}, {{1, 1}}}};
    const auto pair = contrastive_pair_loss(m.z_tensor(), anchors, means, tau);
    CHECK(pair.shared_classes == 2);
    CHECK(pair.value.item<double>() == doctest::Approx(expect).epsilon(1e-12));
    // A single present class gives log(1) = 0.
    oracle::ToyMap one{1, 2, 2, {1, 0, 2, 1}, {1, 1}};
    const auto m1 = class_means(one.z_tensor(), one.label_tensor(), 2);
    CHECK(contrastive_pixel_term(one.z_tensor().select(1, 0).select(1, 0), m1, 1, tau).item<double>() ==
          doctest::Approx(0.0));
    CHECK_THROWS(contrastive_pixel_term(one.z_tensor().select(1, 0).select(1, 0), m1, 2, tau));
}

TEST_CASE("pair loss matches the brute-force oracle") {
    std::mt19937_64 gen(2);
    for (int trial = 0; trial < 40; ++trial) {
        const int C = 1 + trial % 4;
        const auto x = oracle::random_map(gen, 6, 7, 4, C, 1);
        const auto xp = oracle::random_map(gen, 6, 7, 4, C, trial % 3 == 0 ? 0 : 1);
        Rng rng(static_cast<std::uint64_t>(trial));
        const auto anchors = sample_anchor_coords(x.label_tensor(), C, 3, rng);
        const double tau = 0.05 + 0.1 * (trial % 3);
        int shared = 0;
        const double ref = oracle::pair_loss(x, to_oracle(anchors), xp, tau, C, &shared);
        const auto got = contrastive_pair_loss(x.z_tensor(), anchors, class_means(xp.z_tensor(), xp.label_tensor(), C), tau);
        CHECK(got.shared_classes == shared);
        CHECK(got.value.item<double>() == doctest::Approx(ref).epsilon(1e-10));
    }
}

TEST_CASE("no shared classes gives zero") {
    oracle::ToyMap a{1, 2, 2, {1, 0, 1, 0}, {1, 1}};
    oracle::ToyMap b{1, 2, 2, {0, 1, 0, 1}, {2, 2}};
    PixelCoordSet anchors{{{{0, 0}}, {}}};
    const auto pair = contrastive_pair_loss(a.z_tensor(), anchors, class_means(b.z_tensor(), b.label_tensor(), 2), 0.1);
    CHECK(pair.no_shared_classes());
    CHECK(pair.value.item<double>() == 0.0);
}

TEST_CASE("zero representation vectors are floored in the batched loss") {
    oracle::ToyMap m{1, 3, 2, {0, 0, 1, 0, 0, 1}, {1, 1, 2}};
    PixelCoordSet anchors{{{{0, 0}}, {{0, 2}}}};
    const auto means = class_means(m.z_tensor(), m.label_tensor(), 2);
    const auto pair = contrastive_pair_loss(m.z_tensor(), anchors, means, 0.1);
    // The class-1 anchor is the zero vector: both logits 0, term log 2.
    const double expect = 0.5 * std::log(2.0) + 0.5 * std::log1p(std::exp(-1.0 / 0.1));
    CHECK(std::isfinite(pair.value.item<double>()));
    CHECK(pair.value.item<double>() == doctest::Approx(expect).epsilon(1e-12));
    CHECK_THROWS(contrastive_pixel_term(m.z_tensor().select(1, 0).select(1, 0), means, 1, 0.1));
}

TEST_CASE("batch loss replays the documented draw order") {
    std::mt19937_64 gen(3);
    for (MatchMode mode : {MatchMode::intra, MatchMode::inter}) {
        for (int B : {1, 2, 5}) {
            std::vector<oracle::ToyMap> maps;
            for (int b = 0; b < B; ++b) maps.push_back(oracle::random_map(gen, 5, 6, 3, 3, b % 2));
            ContrastiveConfig cfg;
            cfg.mode = mode;
            cfg.samples_per_class = 2;
            int n = 0;
            const double ref = batch_oracle(maps, 3, cfg, 77, &n);
            Rng rng(77);
            const auto got = contrastive_batch_loss(stack_z(maps), stack_labels(maps), 3, cfg, rng);
            CHECK(got.contributing_images == n);
            CHECK(got.value.item<double>() == doctest::Approx(ref).epsilon(1e-10));
            CHECK(got.partners.size() == static_cast<std::size_t>(B));
        }
    }
}

TEST_CASE("pooled mode uses batch-wide class means") {
    std::mt19937_64 gen(4);
    std::vector<oracle::ToyMap> maps{oracle::random_map(gen, 4, 4, 3, 2, 1), oracle::random_map(gen, 4, 4, 3, 2, 1)};
    // Concatenating the two maps side by side gives the pooled means.
    oracle::ToyMap both{4, 8, 3, {}, {}};
    for (int r = 0; r < 4; ++r)
        for (int half = 0; half < 2; ++half)
            for (int c = 0; c < 4; ++c) {
                const auto v = maps[static_cast<std::size_t>(half)].at(r, c);
                both.z.insert(both.z.end(), v.begin(), v.end());
                both.labels.push_back(maps[static_cast<std::size_t>(half)].labels[static_cast<std::size_t>(r * 4 + c)]);
            }
    ContrastiveConfig cfg;
    cfg.mode = MatchMode::pooled;
    cfg.samples_per_class = 100;
    Rng rng(1);
    const auto got = contrastive_batch_loss(stack_z(maps), stack_labels(maps), 2, cfg, rng);
    Rng rng2(1);
    double ref = 0;
    for (const auto& m : maps) {
        const auto anchors = sample_anchor_coords(m.label_tensor(), 2, 100, rng2);
        ref += oracle::pair_loss(m, to_oracle(anchors), both, cfg.temperature, 2);
    }
    CHECK(got.value.item<double>() == doctest::Approx(ref / 2).epsilon(1e-10));
    CHECK(got.partners == std::vector<int>{-1, -1});
}

TEST_CASE("intra mode does not couple images") {
    std::mt19937_64 gen(5);
    std::vector<oracle::ToyMap> maps;
    for (int b = 0; b < 3; ++b) maps.push_back(oracle::random_map(gen, 5, 5, 4, 3, 1));
    ContrastiveConfig cfg;
    cfg.samples_per_class = 100;
    auto z = stack_z(maps).requires_grad_(true);
    Rng rng(1);
    const auto whole = contrastive_batch_loss(z, stack_labels(maps), 3, cfg, rng);
    // Image 0's own term only: its gradient must vanish on images 1 and 2.
    Rng rng2(1);
    auto first = contrastive_pair_loss(z[0], stack_labels(maps)[0], class_means(z[0], stack_labels(maps)[0], 3), cfg, rng2);
    first.value.backward();
    CHECK(z.grad()[1].abs().max().item<double>() == 0.0);
    CHECK(z.grad()[2].abs().max().item<double>() == 0.0);
    CHECK(z.grad()[0].abs().max().item<double>() > 0.0);
    double sum = 0;
    for (const auto& m : maps) {
        Rng r(1);
        sum += contrastive_pair_loss(m.z_tensor(), m.label_tensor(), class_means(m.z_tensor(), m.label_tensor(), 3), cfg, r)
                   .value.item<double>();
    }
    CHECK(whole.value.item<double>() == doctest::Approx(sum / 3).epsilon(1e-10));
}

TEST_CASE("invariance to positive scaling and to batch order (intra, all pixels)") {
    std::mt19937_64 gen(6);
    std::vector<oracle::ToyMap> maps;
    for (int b = 0; b < 4; ++b) maps.push_back(oracle::random_map(gen, 4, 5, 3, 2, 1));
    ContrastiveConfig cfg;
    cfg.samples_per_class = 1000;
    const auto z = stack_z(maps), l = stack_labels(maps);
    Rng r1(0), r2(0), r3(0);
    const double base = contrastive_batch_loss(z, l, 2, cfg, r1).value.item<double>();
    CHECK(contrastive_batch_loss(z * 3.7, l, 2, cfg, r2).value.item<double>() == doctest::Approx(base).epsilon(1e-10));
    const auto perm = torch::tensor({2, 0, 3, 1}, torch::kInt64);
    CHECK(contrastive_batch_loss(z.index_select(0, perm), l.index_select(0, perm), 2, cfg, r3).value.item<double>() ==
          doctest::Approx(base).epsilon(1e-10));
}

TEST_CASE("contrastive gradient matches finite differences") {
    std::mt19937_64 gen(7);
    std::vector<oracle::ToyMap> maps{oracle::random_map(gen, 4, 4, 3, 2, 1), oracle::random_map(gen, 4, 4, 3, 2, 1)};
    const auto l = stack_labels(maps);
    for (MatchMode mode : {MatchMode::intra, MatchMode::inter, MatchMode::pooled}) {
        ContrastiveConfig cfg;
        cfg.mode = mode;
        cfg.samples_per_class = 2;
        auto f = [&](const torch::Tensor& z) {
            Rng rng(9);
            return contrastive_batch_loss(z, l, 2, cfg, rng).value.item<double>();
        };
        auto z = stack_z(maps).requires_grad_(true);
        Rng rng(9);
        contrastive_batch_loss(z, l, 2, cfg, rng).value.backward();
        const auto num = oracle::numeric_grad(f, stack_z(maps), 1e-6);
        CHECK(oracle::relative_error(z.grad(), num) < 1e-6);
    }
}

TEST_CASE("dice loss examples") {
    auto labels = torch::zeros({1, 2, 2}, torch::kInt64);
    labels[0][0][0] = 1;
    // Perfect one-hot prediction gives zero loss.
    auto probs = torch::zeros({1, 2, 2, 2}, torch::kDouble);
    probs[0][1][0][0] = 1;
    probs[0][0] = 1 - probs[0][1];
    CHECK(dice_loss(probs, labels).item<double>() == doctest::Approx(0.0).epsilon(1e-9));
    // Uniform 0.5 on a single foreground pixel: (2*0.5 + e) / (4*0.25 + 1 + e).
    auto half = torch::full({1, 2, 2, 2}, 0.5, torch::kDouble);
    const double eps = kDiceEps;
    CHECK(dice_loss(half, labels).item<double>() == doctest::Approx(1.0 - (1.0 + eps) / (2.0 + eps)).epsilon(1e-12));
    auto bad = labels.clone();
    bad[0][1][1] = 2;
    CHECK_THROWS_WITH_AS(dice_loss(probs, bad), doctest::Contains("label out of range"), std::invalid_argument);
}

TEST_CASE("dice loss matches the direct-sum oracle and finite differences") {
    std::mt19937_64 gen(8);
    for (int trial = 0; trial < 20; ++trial) {
        const int B = 1 + trial % 3, K = 2 + trial % 3, H = 3, W = 4;
        const auto p = random_probs(gen, B, K, H, W);
        auto l = torch::randint(0, K, {B, H, W}, torch::kInt64);
        if (trial % 5 == 0) l.zero_();
        const double ref = oracle::dice_loss(to_vec(p), to_ivec(l), B, K, H, W, kDiceEps);
        CHECK(dice_loss(p, l).item<double>() == doctest::Approx(ref).epsilon(1e-12));
        auto pg = p.clone().requires_grad_(true);
        dice_loss(pg, l).backward();
        const auto num = oracle::numeric_grad([&](const torch::Tensor& x) { return dice_loss(x, l).item<double>(); }, p, 1e-6);
        // With no foreground the loss sits near 1 and the gradient near 1e-7, so
        // the difference quotient only carries absolute accuracy there.
        if (trial % 5 == 0) CHECK((pg.grad() - num).abs().max().item<double>() < 1e-8);
        else CHECK(oracle::relative_error(pg.grad(), num) < 1e-6);
    }
}

TEST_CASE("total loss recombines its terms") {
    std::mt19937_64 gen(9);
    std::vector<oracle::ToyMap> maps;
    for (int b = 0; b < 4; ++b) maps.push_back(oracle::random_map(gen, 4, 4, 3, 3, 1));
    LossInputs in;
    in.seg_probs = random_probs(gen, 4, 4, 4, 4);
    in.seg_labels = stack_labels(maps);
    in.seg_sources = {SliceSource::labeled, SliceSource::labeled, SliceSource::pseudo, SliceSource::pseudo};
    in.embeddings = stack_z(maps);
    in.cont_labels = stack_labels(maps);
    in.cont_sources = in.seg_sources;
    ContrastiveConfig cfg;
    cfg.mode = MatchMode::inter;
    cfg.lambda_cont = 0.3;

    Rng rng(4), replay(4);
    LossAudit audit;
    audit.iteration = 12;
    const auto t = total_loss(in, 3, cfg, rng, &audit);
    const double cont = contrastive_batch_loss(in.embeddings, in.cont_labels, 3, cfg, replay).value.item<double>();
    CHECK(t.has_contrastive);
    CHECK(t.cont == doctest::Approx(cont).epsilon(1e-12));
    CHECK(std::abs(t.total.item<double>() - (t.seg + cfg.lambda_cont * t.cont)) < 1e-7);
    REQUIRE(audit.calls.size() == 2);
    CHECK(audit.calls[0].kind == LossKind::dice);
    CHECK(audit.calls[0].labeled_slices == 2);
    CHECK(audit.calls[1].pseudo_slices == 2);
    CHECK(audit.calls[1].iteration == 12);

    SUBCASE("lambda zero reduces to the segmentation loss") {
        cfg.lambda_cont = 0.0;
        Rng r(4);
        const auto z = total_loss(in, 3, cfg, r);
        CHECK(z.total.item<double>() == doctest::Approx(z.seg).epsilon(1e-15));
    }
    SUBCASE("no contrastive input") {
        in.embeddings = torch::Tensor();
        Rng r(4);
        const auto z = total_loss(in, 3, cfg, r);
        CHECK_FALSE(z.has_contrastive);
        CHECK(z.total.item<double>() == z.seg);
    }
    SUBCASE("a batch without labeled slices is rejected") {
        in.seg_sources.assign(4, SliceSource::pseudo);
        Rng r(4);
        CHECK_THROWS_AS(total_loss(in, 3, cfg, r), std::invalid_argument);
    }
}

}  // TEST_SUITE
