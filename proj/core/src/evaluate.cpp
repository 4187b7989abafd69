#include "semiseg/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "semiseg/losses.hpp"

namespace semiseg {

using nlohmann::json;

double dsc(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b, int c) {
    if (a.size() != b.size()) throw std::invalid_argument("dsc: dims mismatch");
    std::size_t na = 0, nb = 0, both = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool ia = a[i] == c, ib = b[i] == c;
        na += ia;
        nb += ib;
        both += ia && ib;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double dsc(const LabelMap& a, const LabelMap& b, int c) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("dsc: dims mismatch");
    return dsc(a.values(), b.values(), c);
}

double dsc(const LabelVolume& a, const LabelVolume& b, int c) {
    if (a.slices != b.slices || a.rows != b.rows || a.cols != b.cols) throw std::invalid_argument("dsc: dims mismatch");
    return dsc(std::span<const std::uint8_t>(a.labels), std::span<const std::uint8_t>(b.labels), c);
}

std::vector<double> per_class_dsc(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b, int num_classes) {
    if (a.size() != b.size()) throw std::invalid_argument("dsc: dims mismatch");
    // One pass with counts per class.
    std::vector<std::size_t> na(static_cast<std::size_t>(num_classes) + 1), nb(na.size()), both(na.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] <= num_classes) ++na[a[i]];
        if (b[i] <= num_classes) ++nb[b[i]];
        if (a[i] == b[i] && a[i] <= num_classes) ++both[a[i]];
    }
    std::vector<double> out;
    for (int c = 1; c <= num_classes; ++c) {
        const auto sum = na[static_cast<std::size_t>(c)] + nb[static_cast<std::size_t>(c)];
        out.push_back(sum == 0 ? 1.0 : 2.0 * static_cast<double>(both[static_cast<std::size_t>(c)]) / static_cast<double>(sum));
    }
    return out;
}

double foreground_mean_dsc(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b, int num_classes,
                           bool skip_absent) {
    if (num_classes < 1) throw std::invalid_argument("num_classes must be positive");
    const auto scores = per_class_dsc(a, b, num_classes);
    double sum = 0.0;
    int n = 0;
    for (int c = 1; c <= num_classes; ++c) {
        if (skip_absent) {
            const bool present = std::find(a.begin(), a.end(), c) != a.end() || std::find(b.begin(), b.end(), c) != b.end();
            if (!present) continue;
        }
        sum += scores[static_cast<std::size_t>(c - 1)];
        ++n;
    }
    return n == 0 ? 1.0 : sum / n;
}

json EvalReport::to_json() const {
    json vols = json::array();
    for (const auto& v : volumes) {
        vols.push_back({{"subject_id", v.subject_id}, {"per_class", v.per_class}, {"foreground_mean", v.foreground_mean}});
    }
    return json{{"format", "semiseg-eval-report"},
                {"version", 1},
                {"num_classes", num_classes},
                {"per_class", per_class},
                {"foreground_mean", foreground_mean},
                {"volumes", vols},
                {"seed", seed},
                {"config", config}};
}

EvalReport EvalReport::from_json(const json& j) {
    EvalReport r;
    r.num_classes = j.at("num_classes").get<int>();
    r.per_class = j.at("per_class").get<std::vector<double>>();
    r.foreground_mean = j.at("foreground_mean").get<double>();
    for (const auto& v : j.at("volumes")) {
        r.volumes.push_back({v.at("subject_id").get<std::string>(), v.at("per_class").get<std::vector<double>>(),
                             v.at("foreground_mean").get<double>()});
    }
    r.seed = j.value("seed", std::uint64_t{0});
    r.config = j.value("config", json::object());
    return r;
}

EvalReport evaluate_predictions(std::span<const LabelVolume> predictions, std::span<const LabeledVolume> truth) {
    if (predictions.size() != truth.size()) throw std::invalid_argument("evaluate: prediction count mismatch");
    if (truth.empty()) throw std::invalid_argument("evaluate: no volumes");
    EvalReport report;
    report.num_classes = truth.front().labels.num_classes;
    report.per_class.assign(static_cast<std::size_t>(report.num_classes), 0.0);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const auto& gt = truth[i].labels;
        const auto& pred = predictions[i];
        if (pred.slices != gt.slices || pred.rows != gt.rows || pred.cols != gt.cols) {
            throw std::invalid_argument("evaluate: dims mismatch for " + truth[i].image.subject_id);
        }
        VolumeScore v;
        v.subject_id = truth[i].image.subject_id;
        v.per_class = per_class_dsc(pred.labels, gt.labels, report.num_classes);
        v.foreground_mean = std::accumulate(v.per_class.begin(), v.per_class.end(), 0.0) / report.num_classes;
        for (int c = 0; c < report.num_classes; ++c) report.per_class[static_cast<std::size_t>(c)] += v.per_class[static_cast<std::size_t>(c)];
        report.volumes.push_back(std::move(v));
    }
    for (auto& x : report.per_class) x /= static_cast<double>(truth.size());
    report.foreground_mean = std::accumulate(report.per_class.begin(), report.per_class.end(), 0.0) / report.num_classes;
    return report;
}

EvalReport evaluate_model(SegNet& net, std::span<const LabeledVolume> volumes) {
    std::vector<LabelVolume> preds;
    preds.reserve(volumes.size());
    for (const auto& v : volumes) preds.push_back(segment_volume(net, v.image));
    return evaluate_predictions(preds, volumes);
}

json RunSummary::to_json() const {
    return json{{"num_runs", num_runs}, {"mean", mean}, {"std", std}, {"per_class_mean", per_class_mean},
                {"run_values", run_values}};
}

RunSummary aggregate_runs(std::span<const EvalReport> reports) {
    if (reports.empty()) throw std::invalid_argument("aggregate_runs: no reports");
    RunSummary s;
    s.num_runs = static_cast<int>(reports.size());
    s.per_class_mean.assign(reports.front().per_class.size(), 0.0);
    for (const auto& r : reports) {
        if (r.per_class.size() != s.per_class_mean.size()) throw std::invalid_argument("aggregate_runs: class count differs");
        s.run_values.push_back(r.foreground_mean);
        for (std::size_t c = 0; c < r.per_class.size(); ++c) s.per_class_mean[c] += r.per_class[c];
    }
    for (auto& x : s.per_class_mean) x /= s.num_runs;
    s.mean = std::accumulate(s.run_values.begin(), s.run_values.end(), 0.0) / s.num_runs;
    if (s.num_runs > 1) {
        double ss = 0.0;
        for (double v : s.run_values) ss += (v - s.mean) * (v - s.mean);
        s.std = std::sqrt(ss / (s.num_runs - 1));
    }
    return s;
}

std::size_t export_pixel_representations(SegNet& net, std::span<const RepresentationSlice> slices, int n_per_class,
                                         Rng& rng, const std::filesystem::path& out_path) {
    if (n_per_class < 1) throw std::invalid_argument("n_per_class must be at least 1");
    const int num_classes = net->config().num_classes_plus_bg - 1;
    const int width = net->config().feature_width();
    if (out_path.has_parent_path()) std::filesystem::create_directories(out_path.parent_path());
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write " + out_path.string());
    out << "class_id,subject_id,slice,row,col";
    for (int f = 0; f < width; ++f) out << ",f" << f;
    out << '\n';
    out.precision(9);

    std::size_t rows_written = 0;
    InferenceGuard guard(*net);
    for (const auto& s : slices) {
        if (s.labels.rows() != s.image.rows() || s.labels.cols() != s.image.cols()) {
            throw std::invalid_argument("export: label dims do not match image dims");
        }
        auto feats = net->features(images_to_tensor(std::span<const Image>(&s.image, 1)))[0].contiguous();  // [F, H, W]
        auto labels = labels_to_tensor(std::span<const LabelMap>(&s.labels, 1))[0];
        for (int c = 1; c <= num_classes; ++c) {
            for (const auto& p : sample_coords(labels, c, n_per_class, rng)) {
                auto v = feats.index({torch::indexing::Slice(), p.row, p.col}).contiguous();
                const float* f = v.data_ptr<float>();
                out << c << ',' << s.subject_id << ',' << s.slice_index << ',' << p.row << ',' << p.col;
                for (int k = 0; k < width; ++k) out << ',' << f[k];
                out << '\n';
                ++rows_written;
            }
        }
    }
    if (!out) throw std::runtime_error("write failed: " + out_path.string());
    return rows_written;
}

}  // namespace semiseg
