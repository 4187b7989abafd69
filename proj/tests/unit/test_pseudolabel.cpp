#include "test_doctest.hpp"

#include <random>

#include "semiseg/evaluate.hpp"
#include "semiseg/pseudolabel.hpp"
#include "test_util.hpp"

using namespace semiseg;

namespace {

NetworkConfig tiny() {
    NetworkConfig c;
    c.num_enc_blocks = 2;
    c.num_dec_blocks = 1;
    c.base_channels = 4;
    c.num_classes_plus_bg = 4;
    c.contrastive_dim = 4;
    c.input_dims = {16, 16};
    return c;
}

// Zeroes the last seg-head conv and puts `bias` on class `winner` (none when < 0).
void force_output(SegNet& net, int winner, double bias) {
    torch::NoGradGuard ng;
    for (auto& p : net->seg_head()->named_parameters()) {
        if (p.key().starts_with("out.")) p.value().zero_();
        if (p.key() == "out.bias" && winner >= 0) p.value()[winner] = bias;
    }
}

Volume disk_volume(const std::string& id, int slices = 2) {
    Volume v(id, slices, 24, 24, {1.0, 1.0});
    for (int s = 0; s < slices; ++s)
        for (int r = 0; r < 24; ++r)
            for (int c = 0; c < 24; ++c) {
                const double d2 = (r - 11.5) * (r - 11.5) + (c - 12.5) * (c - 12.5);
                v.intensities[v.slice_size() * s + r * 24 + c] = d2 < 36 ? 1.0f : d2 < 64 ? 0.5f : 0.0f;
            }
    return v;
}

// Equivariant predictor: labels depend on intensity only.
std::vector<LabelMap> threshold_predict(std::span<const Image> imgs) {
    std::vector<LabelMap> out;
    for (const auto& im : imgs) {
        LabelMap m(im.rows(), im.cols(), 0);
        for (std::size_t i = 0; i < im.size(); ++i) {
            const float x = im.values()[i];
            m.values()[i] = x > 0.75f ? 2 : x > 0.25f ? 1 : 0;
        }
        out.push_back(m);
    }
    return out;
}

PseudoLabelStore store_of(std::initializer_list<std::string> ids) {
    PseudoLabelStore s;
    for (const auto& id : ids) s.labels.emplace(id, LabelVolume(1, 2, 2, 3));
    return s;
}

}  // namespace

TEST_SUITE("pseudolabel") {

TEST_CASE("uniform outputs give background, a dominant class gives that class") {
    auto net = init_parameters(tiny(), 1);
    std::vector<Volume> pool{Volume("a", 2, 16, 16, {1.0, 1.0}), Volume("b", 1, 16, 16, {1.0, 1.0})};
    force_output(net, -1, 0.0);
    auto store = estimate_pseudo_labels(net, pool, 40);
    CHECK(store.estimation_iteration == 40);
    CHECK(store.retained == std::set<std::string>{"a", "b"});
    for (auto l : store.labels.at("a").labels) CHECK(l == 0);
    force_output(net, 2, 5.0);
    store = estimate_pseudo_labels(net, pool);
    for (auto l : store.labels.at("b").labels) CHECK(l == 2);
    CHECK(store.labels.at("a").slices == 2);
    CHECK_THROWS(estimate_pseudo_labels(net, std::vector<Volume>{Volume("c", 1, 8, 16, {1.0, 1.0})}));
}

TEST_CASE("identity transforms give full agreement") {
    const auto v = disk_volume("d");
    CHECK(consistency_score(threshold_predict, v, GeomTransform{}, GeomTransform{}, 2) == doctest::Approx(1.0));
    GeomTransform flip;
    flip.flip_h = true;
    CHECK(consistency_score(threshold_predict, v, flip, flip, 2) == doctest::Approx(1.0));
}

TEST_CASE("the score is symmetric in the transform pair") {
    Rng rng(3);
    const AugmentConfig cfg;
    const auto v = disk_volume("d");
    auto constant = [](std::span<const Image> imgs) {
        std::vector<LabelMap> out;
        for (const auto& im : imgs) out.emplace_back(im.rows(), im.cols(), 1);
        return out;
    };
    for (int k = 0; k < 10; ++k) {
        const auto t1 = sample_affine(rng, cfg), t2 = sample_affine(rng, cfg);
        CHECK(consistency_score(constant, v, t1, t2, 2) == doctest::Approx(consistency_score(constant, v, t2, t1, 2)));
        CHECK(consistency_score(threshold_predict, v, t1, t2, 2) ==
              doctest::Approx(consistency_score(threshold_predict, v, t2, t1, 2)));
    }
}

TEST_CASE("an equivariant predictor scores higher than a noisy one") {
    Rng rng(4), rng2(4);
    ConsistencyConfig cfg;
    cfg.num_transform_pairs = 3;
    const auto v = disk_volume("d");
    std::mt19937_64 gen(1);
    auto noisy = [&gen](std::span<const Image> imgs) {
        std::vector<LabelMap> out;
        for (const auto& im : imgs) out.push_back(testutil::random_labels(gen, im.rows(), im.cols(), 2));
        return out;
    };
    const double good = consistency_score(threshold_predict, v, rng, cfg, 2);
    const double bad = consistency_score(noisy, v, rng2, cfg, 2);
    CHECK(good > 0.9);
    CHECK(bad < 0.6);
}

TEST_CASE("elastic consistency transforms are rejected") {
    ConsistencyConfig cfg;
    cfg.elastic = true;
    CHECK_THROWS_WITH(cfg.validate(), doctest::Contains("not invertible"));
}

TEST_CASE("filtering by consistency") {
    const auto store = store_of({"a", "b", "c"});
    const std::map<std::string, double> scores{{"a", 0.2}, {"b", 0.7}, {"c", 1.0}};
    CHECK(filter_by_consistency(store, scores, 0.0).retained.size() == 3);
    CHECK(filter_by_consistency(store, {}, 0.0).retained.size() == 3);
    CHECK(filter_by_consistency(store, scores, 1.0).retained == std::set<std::string>{"c"});
    CHECK(filter_by_consistency(store, {{"a", 0.99}}, 1.0).retained.empty());
    // Retained sets shrink as the threshold grows.
    std::size_t last = 4;
    for (double t : {0.0, 0.1, 0.3, 0.7, 0.9, 1.0, 1.1}) {
        const auto n = filter_by_consistency(store, scores, t).retained.size();
        CHECK(n <= last);
        last = n;
    }
    const auto f = filter_by_consistency(store, scores, 0.5);
    CHECK((f.labels == store.labels));
}

TEST_CASE("pseudo-label quality against hidden truth") {
    PseudoLabelStore store;
    LabelVolume a(1, 2, 2, 2);
    a.labels = {0, 1, 2, 2};
    store.labels.emplace("a", a);
    HiddenTruth truth;
    truth.add("a", a);
    CHECK(pseudo_label_quality(store, truth).value() == doctest::Approx(1.0));
    LabelVolume wrong = a;
    wrong.labels = {1, 2, 1, 1};
    HiddenTruth other;
    other.add("a", wrong);
    CHECK(pseudo_label_quality(store, other).value() == doctest::Approx(0.0));
    CHECK_FALSE(pseudo_label_quality(store, HiddenTruth{}).has_value());
}

TEST_CASE("store round trip") {
    testutil::TempDir dir("pseudo");
    PseudoLabelStore store;
    std::mt19937_64 gen(2);
    for (const char* id : {"x", "y"}) {
        LabelVolume v(2, 5, 6, 3);
        for (auto& l : v.labels) l = static_cast<std::uint8_t>(gen() % 4);
        store.labels.emplace(id, v);
    }
    store.retained = {"y"};
    store.estimation_iteration = 300;
    save_pseudo_labels(dir.path(), store);
    const auto back = load_pseudo_labels(dir.path());
    CHECK((back.labels == store.labels));
    CHECK(back.retained == store.retained);
    CHECK(back.estimation_iteration == 300);
    CHECK_THROWS(load_pseudo_labels(dir.path() / "missing"));
}

}  // TEST_SUITE
