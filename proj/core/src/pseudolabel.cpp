#include "semiseg/pseudolabel.hpp"

#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "semiseg/evaluate.hpp"

namespace semiseg {

using nlohmann::json;
namespace fs = std::filesystem;

void ConsistencyConfig::validate() const {
    if (threshold < 0.0 || threshold > 1.0) throw std::invalid_argument("consistency threshold must lie in [0, 1]");
    if (num_transform_pairs < 1) throw std::invalid_argument("num_transform_pairs must be at least 1");
    if (elastic) throw std::invalid_argument("not invertible: elastic transforms cannot be used for consistency scoring");
    transforms.validate();
}

SlicePredictor network_predictor(SegNet& net) {
    return [&net](std::span<const Image> slices) { return segment_slices(net, slices); };
}

PseudoLabelStore estimate_pseudo_labels(SegNet& net, std::span<const Volume> unlabeled,
                                        std::int64_t estimation_iteration) {
    const auto& dims = net->config().input_dims;
    PseudoLabelStore store;
    store.estimation_iteration = estimation_iteration;
    for (const auto& v : unlabeled) {
        if (v.rows != dims[0] || v.cols != dims[1]) {
            throw std::invalid_argument("dim mismatch: volume " + v.subject_id + " does not match the network input");
        }
        store.labels.emplace(v.subject_id, segment_volume(net, v));
        store.retained.insert(v.subject_id);
    }
    return store;
}

namespace {

std::vector<std::uint8_t> predict_back_mapped(const SlicePredictor& predict, const Volume& volume,
                                              const GeomTransform& t) {
    const GeomTransform inverse = invert_geom(t);
    std::vector<Image> moved;
    for (int s = 0; s < volume.slices; ++s) moved.push_back(apply_geom(volume.slice(s), t));
    const auto preds = predict(moved);
    if (preds.size() != moved.size()) throw std::runtime_error("predictor returned the wrong number of slices");
    std::vector<std::uint8_t> out;
    out.reserve(static_cast<std::size_t>(volume.slices) * volume.slice_size());
    for (const auto& p : preds) {
        const auto back = apply_geom(p, inverse);
        out.insert(out.end(), back.values().begin(), back.values().end());
    }
    return out;
}

}  // namespace

double consistency_score(const SlicePredictor& predict, const Volume& volume, const GeomTransform& t1,
                         const GeomTransform& t2, int num_classes) {
    const auto a = predict_back_mapped(predict, volume, t1);
    const auto b = predict_back_mapped(predict, volume, t2);
    return foreground_mean_dsc(a, b, num_classes, /*skip_absent=*/true);
}

double consistency_score(const SlicePredictor& predict, const Volume& volume, Rng& rng, const ConsistencyConfig& cfg,
                         int num_classes) {
    cfg.validate();
    double sum = 0.0;
    for (int k = 0; k < cfg.num_transform_pairs; ++k) {
        const auto t1 = sample_affine(rng, cfg.transforms);
        const auto t2 = sample_affine(rng, cfg.transforms);
        sum += consistency_score(predict, volume, t1, t2, num_classes);
    }
    return sum / cfg.num_transform_pairs;
}

double consistency_score(SegNet& net, const Volume& volume, Rng& rng, const ConsistencyConfig& cfg) {
    return consistency_score(network_predictor(net), volume, rng, cfg, net->config().num_classes_plus_bg - 1);
}

PseudoLabelStore filter_by_consistency(PseudoLabelStore store, const std::map<std::string, double>& scores,
                                       double threshold) {
    store.retained.clear();
    for (const auto& [id, labels] : store.labels) {
        if (threshold <= 0.0) {
            store.retained.insert(id);
            continue;
        }
        auto it = scores.find(id);
        if (it != scores.end() && it->second >= threshold) store.retained.insert(id);
    }
    return store;
}

std::optional<double> pseudo_label_quality(const PseudoLabelStore& store, const HiddenTruth& truth) {
    double sum = 0.0;
    int n = 0;
    for (const auto& [id, labels] : store.labels) {
        const LabelVolume* gt = truth.find(id);
        if (gt == nullptr) continue;
        sum += foreground_mean_dsc(labels.labels, gt->labels, gt->num_classes);
        ++n;
    }
    if (n == 0) return std::nullopt;
    return sum / n;
}

void save_pseudo_labels(const fs::path& dir, const PseudoLabelStore& store) {
    fs::create_directories(dir);
    json subjects = json::array();
    for (const auto& [id, lv] : store.labels) {
        const std::string name = id + "_labels.u8";
        std::ofstream out(dir / name, std::ios::binary);
        out.write(reinterpret_cast<const char*>(lv.labels.data()), static_cast<std::streamsize>(lv.labels.size()));
        if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
        subjects.push_back({{"id", id},
                            {"dims", {lv.slices, lv.rows, lv.cols}},
                            {"num_classes", lv.num_classes},
                            {"labels", name},
                            {"labels_dtype", "uint8"},
                            {"retained", store.retained.contains(id)}});
    }
    const json meta{{"format", "semiseg-pseudo-labels"},
                    {"version", 1},
                    {"estimation_iteration", store.estimation_iteration},
                    {"subjects", subjects}};
    std::ofstream out(dir / "pseudo_labels.json");
    out << meta.dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write pseudo-label metadata in " + dir.string());
}

PseudoLabelStore load_pseudo_labels(const fs::path& dir) {
    std::ifstream in(dir / "pseudo_labels.json");
    if (!in) throw std::runtime_error("missing pseudo-label metadata in " + dir.string());
    PseudoLabelStore store;
    try {
        const json meta = json::parse(in);
        if (meta.at("format") != "semiseg-pseudo-labels") throw std::runtime_error("not a pseudo-label store");
        store.estimation_iteration = meta.at("estimation_iteration").get<std::int64_t>();
        for (const auto& s : meta.at("subjects")) {
            const auto dims = s.at("dims").get<std::array<int, 3>>();
            LabelVolume lv(dims[0], dims[1], dims[2], s.at("num_classes").get<int>());
            const fs::path file = dir / s.at("labels").get<std::string>();
            std::ifstream raw(file, std::ios::binary | std::ios::ate);
            if (!raw) throw std::runtime_error("missing file " + file.string());
            if (static_cast<std::size_t>(raw.tellg()) != lv.labels.size()) {
                throw std::runtime_error("dim mismatch: " + file.string());
            }
            raw.seekg(0);
            raw.read(reinterpret_cast<char*>(lv.labels.data()), static_cast<std::streamsize>(lv.labels.size()));
            lv.validate();
            const auto id = s.at("id").get<std::string>();
            if (s.at("retained").get<bool>()) store.retained.insert(id);
            store.labels.emplace(id, std::move(lv));
        }
    } catch (const json::exception& e) {
        throw std::runtime_error("corrupt pseudo-label metadata: " + std::string(e.what()));
    }
    return store;
}

}  // namespace semiseg
