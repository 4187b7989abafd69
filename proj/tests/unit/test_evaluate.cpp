#include "test_doctest.hpp"

#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "semiseg/evaluate.hpp"
#include "test_util.hpp"

using namespace semiseg;

namespace {

NetworkConfig tiny() {
    NetworkConfig c;
    c.num_enc_blocks = 2;
    c.num_dec_blocks = 1;
    c.base_channels = 4;
    c.num_classes_plus_bg = 3;
    c.contrastive_dim = 4;
    c.input_dims = {8, 8};
    return c;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
    return out;
}

}  // namespace

TEST_SUITE("evaluate") {

TEST_CASE("dsc examples") {
    const std::vector<std::uint8_t> a{1, 1, 0, 0}, b{1, 0, 1, 0}, empty{0, 0, 0, 0};
    CHECK(dsc(a, b, 1) == doctest::Approx(0.5));
    CHECK(dsc(a, a, 1) == doctest::Approx(1.0));
    CHECK(dsc(empty, empty, 1) == 1.0);
    CHECK(dsc(a, empty, 1) == 0.0);
    CHECK(foreground_mean_dsc(a, b, 2) == doctest::Approx(0.75));
    CHECK(foreground_mean_dsc(a, b, 2, true) == doctest::Approx(0.5));
    CHECK(foreground_mean_dsc(empty, empty, 2, true) == 1.0);
}

TEST_CASE("dsc is symmetric and bounded") {
    std::mt19937_64 gen(1);
    for (int k = 0; k < 100; ++k) {
        const auto a = testutil::random_labels(gen, 5, 7, 3), b = testutil::random_labels(gen, 5, 7, 3);
        for (int c = 1; c <= 3; ++c) {
            const double ab = dsc(a, b, c);
            CHECK(ab == dsc(b, a, c));
            CHECK(ab >= 0.0);
            CHECK(ab <= 1.0);
        }
    }
}

TEST_CASE("evaluate_predictions averages per-volume scores") {
    LabeledVolume v1{Volume("a", 1, 1, 4, {1, 1}), LabelVolume(1, 1, 4, 2)};
    LabeledVolume v2{Volume("b", 1, 1, 4, {1, 1}), LabelVolume(1, 1, 4, 2)};
    v1.labels.labels = {1, 1, 2, 0};
    v2.labels.labels = {2, 2, 0, 0};
    LabelVolume p1 = v1.labels, p2(1, 1, 4, 2);
    p2.labels = {2, 0, 1, 0};
    const std::vector<LabelVolume> preds{p1, p2};
    const std::vector<LabeledVolume> truth{v1, v2};
    const auto r = evaluate_predictions(preds, truth);
    REQUIRE(r.volumes.size() == 2);
    CHECK(r.volumes[0].foreground_mean == doctest::Approx(1.0));
    // Volume b: class 1 absent in truth, present in prediction -> 0; class 2 -> 2/3.
    CHECK(r.volumes[1].per_class[0] == doctest::Approx(0.0));
    CHECK(r.volumes[1].per_class[1] == doctest::Approx(2.0 / 3.0));
    CHECK(r.per_class[1] == doctest::Approx((1.0 + 2.0 / 3.0) / 2));
    CHECK(r.foreground_mean == doctest::Approx((1.0 + 1.0 / 3.0) / 2));
    const auto back = EvalReport::from_json(r.to_json());
    CHECK(back.foreground_mean == r.foreground_mean);
    CHECK(back.volumes.size() == 2);
    CHECK(r.to_json()["format"] == "semiseg-eval-report");
}

TEST_CASE("aggregation over runs") {
    EvalReport a, b;
    a.num_classes = b.num_classes = 1;
    a.foreground_mean = 0.6;
    b.foreground_mean = 0.8;
    a.per_class = {0.6};
    b.per_class = {0.8};
    const std::vector<EvalReport> runs{a, b};
    const auto s = aggregate_runs(runs);
    CHECK(s.mean == doctest::Approx(0.7));
    CHECK(s.std == doctest::Approx(std::sqrt(0.02)));
    CHECK(s.num_runs == 2);
    CHECK(aggregate_runs(std::span<const EvalReport>(runs.data(), 1)).std == 0.0);
}

TEST_CASE("representation export") {
    testutil::TempDir dir("export");
    auto net = init_parameters(tiny(), 3);
    std::mt19937_64 gen(4);
    std::vector<RepresentationSlice> slices;
    std::map<int, int> expected;
    for (int s = 0; s < 3; ++s) {
        RepresentationSlice r{"subj" + std::to_string(s), s, testutil::random_image(gen, 8, 8), LabelMap(8, 8, 0)};
        // Class 1: 5 pixels, class 2: 1 pixel on slice 0 only.
        for (int c = 0; c < 5; ++c) r.labels(2, c) = 1;
        if (s == 0) r.labels(7, 7) = 2;
        slices.push_back(r);
    }
    Rng rng(1);
    const auto path = dir.path() / "reps.csv";
    const auto n = export_pixel_representations(net, slices, 3, rng, path);
    CHECK(n == 3 * 3 + 1);
    std::ifstream f(path);
    std::string line;
    std::getline(f, line);
    const auto header = split_csv(line);
    CHECK(header.size() == 5 + 4);
    CHECK(header[0] == "class_id");
    CHECK(header[5] == "f0");
    std::size_t rows = 0;
    std::map<int, int> per_class;
    // Recompute the backbone features and compare a row against them.
    InferenceGuard g(*net);
    while (std::getline(f, line)) {
        const auto cells = split_csv(line);
        REQUIRE(cells.size() == header.size());
        ++rows;
        per_class[std::stoi(cells[0])]++;
        const int s = std::stoi(cells[2]), r = std::stoi(cells[3]), c = std::stoi(cells[4]);
        CHECK(slices[static_cast<std::size_t>(s)].labels(r, c) == std::stoi(cells[0]));
        const auto feats = net->features(images_to_tensor(std::span<const Image>(&slices[static_cast<std::size_t>(s)].image, 1)));
        CHECK(std::stod(cells[5]) == doctest::Approx(feats[0][0][r][c].item<double>()).epsilon(1e-5));
    }
    CHECK(rows == n);
    CHECK(per_class[1] == 9);
    CHECK(per_class[2] == 1);
}

}  // TEST_SUITE
