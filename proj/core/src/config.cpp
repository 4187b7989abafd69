#include "semiseg/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <stdexcept>

namespace semiseg {

using nlohmann::json;

namespace {

std::string match_mode_name(MatchMode m) {
    switch (m) {
        case MatchMode::intra: return "intra";
        case MatchMode::inter: return "inter";
        case MatchMode::pooled: return "pooled";
    }
    return "intra";
}

MatchMode parse_match_mode(const std::string& s) {
    if (s == "intra") return MatchMode::intra;
    if (s == "inter") return MatchMode::inter;
    if (s == "pooled") return MatchMode::pooled;
    throw std::invalid_argument("unknown contrastive mode: " + s);
}

// Reads known keys of one JSON object and rejects the rest.
class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw std::invalid_argument("config section " + path_ + " must be an object");
    }

    template <typename T>
    Fields& opt(const char* key, T& out) {
        seen_.insert(key);
        if (j_.contains(key)) {
            try {
                out = j_.at(key).get<T>();
            } catch (const json::exception& e) {
                throw std::invalid_argument("config key " + where(key) + ": " + e.what());
            }
        }
        return *this;
    }

    template <typename Fn>
    Fields& sub(const char* key, Fn&& fn) {
        seen_.insert(key);
        if (j_.contains(key)) {
            Fields f(j_.at(key), where(key));
            fn(f);
            f.done();
        }
        return *this;
    }

    Fields& opt_enum(const char* key, auto& out, auto parse) {
        std::string s;
        seen_.insert(key);
        if (j_.contains(key)) {
            opt(key, s);
            try {
                out = parse(s);
            } catch (const std::invalid_argument& e) {
                throw std::invalid_argument("config key " + where(key) + ": " + e.what());
            }
        }
        return *this;
    }

    void done() const {
        for (const auto& item : j_.items()) {
            if (!seen_.contains(item.key())) throw std::invalid_argument("unknown config key: " + where(item.key()));
        }
    }

    const json& raw() const { return j_; }

private:
    std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

json range_json(const IntensityRange& r) { return json::array({r.lo, r.hi}); }

IntensityRange range_from(const json& j) {
    const auto v = j.get<std::array<double, 2>>();
    return {v[0], v[1]};
}

void read_augment(Fields& f, AugmentConfig& a) {
    f.opt("rotation_deg", a.rotation_deg)
        .opt("scale_min", a.scale_min)
        .opt("scale_max", a.scale_max)
        .opt("translate_px", a.translate_px)
        .opt("flip_prob", a.flip_prob)
        .opt("elastic_prob", a.elastic_prob)
        .opt("elastic_alpha", a.elastic_alpha)
        .opt("elastic_sigma", a.elastic_sigma)
        .opt("contrast_min", a.contrast_min)
        .opt("contrast_max", a.contrast_max)
        .opt("brightness", a.brightness);
}

json augment_json(const AugmentConfig& a) {
    return {{"rotation_deg", a.rotation_deg},   {"scale_min", a.scale_min},         {"scale_max", a.scale_max},
            {"translate_px", a.translate_px},   {"flip_prob", a.flip_prob},         {"elastic_prob", a.elastic_prob},
            {"elastic_alpha", a.elastic_alpha}, {"elastic_sigma", a.elastic_sigma}, {"contrast_min", a.contrast_min},
            {"contrast_max", a.contrast_max},   {"brightness", a.brightness}};
}

void read_all(Fields& root, ExperimentConfig& c) {
    std::string preset_name;
    root.opt("preset", preset_name).opt("seed", c.seed).opt("n_runs", c.n_runs);
    root.sub("synthetic", [&](Fields& f) {
        auto& s = c.synthetic;
        f.opt("num_subjects", s.num_subjects)
            .opt("num_classes", s.num_classes)
            .opt("slices_per_volume", s.slices_per_volume)
            .opt("dims", s.dims)
            .opt("spacing_range", s.spacing_range)
            .opt("noise_std", s.noise_std)
            .opt("num_distractors", s.num_distractors)
            .opt("texture_amplitude", s.texture_amplitude)
            .opt("gain_range", s.gain_range);
        f.sub("shape_jitter", [&](Fields& g) {
            auto& j = s.shape_jitter;
            g.opt("center_jitter_mm", j.center_jitter_mm)
                .opt("lv_radius_mm_min", j.lv_radius_mm_min)
                .opt("lv_radius_mm_max", j.lv_radius_mm_max)
                .opt("myo_thickness_mm_min", j.myo_thickness_mm_min)
                .opt("myo_thickness_mm_max", j.myo_thickness_mm_max)
                .opt("ellipticity", j.ellipticity)
                .opt("apex_shrink", j.apex_shrink)
                .opt("blob_angle_jitter_deg", j.blob_angle_jitter_deg);
        });
        json ranges, distractor;
        f.opt("intensity_ranges", ranges).opt("distractor_range", distractor);
        if (ranges.is_array()) {
            s.intensity_ranges.clear();
            for (const auto& r : ranges) s.intensity_ranges.push_back(range_from(r));
        }
        if (distractor.is_array()) s.distractor_range = range_from(distractor);
    });
    root.sub("preprocess", [&](Fields& f) {
        auto& p = c.preprocess;
        f.opt("target_resolution", p.target_resolution)
            .opt("target_dims", p.target_dims)
            .opt("low_percentile", p.low_percentile)
            .opt("high_percentile", p.high_percentile);
    });
    root.sub("network", [&](Fields& f) {
        auto& n = c.network;
        f.opt("num_enc_blocks", n.num_enc_blocks)
            .opt("num_dec_blocks", n.num_dec_blocks)
            .opt("base_channels", n.base_channels)
            .opt("num_classes_plus_bg", n.num_classes_plus_bg)
            .opt("contrastive_dim", n.contrastive_dim)
            .opt("input_dims", n.input_dims);
    });
    root.sub("split", [&](Fields& f) {
        auto& s = c.split;
        f.opt("n_labeled", s.n_labeled).opt("n_val", s.n_val).opt("n_test", s.n_test);
        json test_seed;
        f.opt("test_seed", test_seed);
        if (test_seed.is_number_unsigned() || test_seed.is_number_integer()) s.test_seed = test_seed.get<std::uint64_t>();
        else if (!test_seed.is_null()) throw std::invalid_argument("config key split.test_seed must be an integer or null");
    });
    root.sub("train", [&](Fields& f) {
        auto& t = c.train;
        f.opt_enum("mode", t.mode, parse_train_mode)
            .opt("phase1_iters", t.phase1_iters)
            .opt("phase2_iters", t.phase2_iters)
            .opt("refresh_period", t.refresh_period)
            .opt("num_pseudo_steps", t.num_pseudo_steps)
            .opt("batch_size", t.batch_size)
            .opt("labeled_per_batch", t.labeled_per_batch)
            .opt("learning_rate", t.adam.learning_rate)
            .opt("adam_beta1", t.adam.beta1)
            .opt("adam_beta2", t.adam.beta2)
            .opt("adam_eps", t.adam.eps)
            .opt("validation_period", t.validation_period)
            .opt("reset_optimizer_on_refresh", t.reset_optimizer_on_refresh)
            .opt("share_contrastive_view", t.share_contrastive_view);
        f.sub("contrastive", [&](Fields& g) {
            auto& k = t.contrastive;
            g.opt("temperature", k.temperature)
                .opt("samples_per_class", k.samples_per_class)
                .opt_enum("mode", k.mode, parse_match_mode)
                .opt("lambda_cont", k.lambda_cont);
        });
        f.sub("consistency", [&](Fields& g) {
            auto& k = t.consistency;
            g.opt("threshold", k.threshold).opt("num_transform_pairs", k.num_transform_pairs).opt("elastic", k.elastic);
            g.sub("transforms", [&](Fields& h) { read_augment(h, k.transforms); });
        });
        f.sub("augment", [&](Fields& g) { read_augment(g, t.augment); });
    });
}

}  // namespace

ExperimentConfig ExperimentConfig::from_preset(const std::string& name) {
    ExperimentConfig c;
    c.preset = name;
    if (name == "desk") {
        c.n_runs = 3;
        c.synthetic = SyntheticSpec{};
        // Harder than the defaults so one labeled volume leaves the baseline well short of the ceiling.
        c.synthetic.noise_std = 0.10;
        c.synthetic.num_distractors = 5;
        c.preprocess.target_dims = {64, 64};
        c.network = NetworkConfig{};
        c.split = SplitOptions{1, 2, 15, 0, std::nullopt};
        c.train = TrainConfig::desk();
    } else if (name == "paper") {
        c.n_runs = 6;
        c.synthetic.dims = {176, 176};
        c.synthetic.num_subjects = 100;
        c.preprocess.target_dims = {192, 192};
        c.network.num_enc_blocks = 6;
        c.network.num_dec_blocks = 5;
        c.network.base_channels = 16;
        c.network.input_dims = {192, 192};
        c.split = SplitOptions{1, 2, 20, 0, std::nullopt};
        c.train = TrainConfig::paper();
    } else {
        throw std::invalid_argument("unknown preset: " + name);
    }
    c.network.num_classes_plus_bg = c.synthetic.num_classes + 1;
    return c;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
    ExperimentConfig c = from_preset(j.value("preset", std::string("desk")));
    Fields root(j, "");
    read_all(root, c);
    root.done();
    return c;
}

json ExperimentConfig::to_json() const {
    json ranges = json::array();
    for (const auto& r : synthetic.intensity_ranges) ranges.push_back(range_json(r));
    const auto& sj = synthetic.shape_jitter;
    return {
        {"preset", preset},
        {"seed", seed},
        {"n_runs", n_runs},
        {"synthetic",
         {{"num_subjects", synthetic.num_subjects},
          {"num_classes", synthetic.num_classes},
          {"slices_per_volume", synthetic.slices_per_volume},
          {"dims", synthetic.dims},
          {"spacing_range", synthetic.spacing_range},
          {"noise_std", synthetic.noise_std},
          {"shape_jitter",
           {{"center_jitter_mm", sj.center_jitter_mm},
            {"lv_radius_mm_min", sj.lv_radius_mm_min},
            {"lv_radius_mm_max", sj.lv_radius_mm_max},
            {"myo_thickness_mm_min", sj.myo_thickness_mm_min},
            {"myo_thickness_mm_max", sj.myo_thickness_mm_max},
            {"ellipticity", sj.ellipticity},
            {"apex_shrink", sj.apex_shrink},
            {"blob_angle_jitter_deg", sj.blob_angle_jitter_deg}}},
          {"intensity_ranges", ranges},
          {"num_distractors", synthetic.num_distractors},
          {"distractor_range", range_json(synthetic.distractor_range)},
          {"texture_amplitude", synthetic.texture_amplitude},
          {"gain_range", synthetic.gain_range}}},
        {"preprocess",
         {{"target_resolution", preprocess.target_resolution},
          {"target_dims", preprocess.target_dims},
          {"low_percentile", preprocess.low_percentile},
          {"high_percentile", preprocess.high_percentile}}},
        {"network",
         {{"num_enc_blocks", network.num_enc_blocks},
          {"num_dec_blocks", network.num_dec_blocks},
          {"base_channels", network.base_channels},
          {"num_classes_plus_bg", network.num_classes_plus_bg},
          {"contrastive_dim", network.contrastive_dim},
          {"input_dims", network.input_dims}}},
        {"split",
         {{"n_labeled", split.n_labeled},
          {"n_val", split.n_val},
          {"n_test", split.n_test},
          {"test_seed", split.test_seed ? json(*split.test_seed) : json(nullptr)}}},
        {"train",
         {{"mode", to_string(train.mode)},
          {"phase1_iters", train.phase1_iters},
          {"phase2_iters", train.phase2_iters},
          {"refresh_period", train.refresh_period},
          {"num_pseudo_steps", train.num_pseudo_steps},
          {"batch_size", train.batch_size},
          {"labeled_per_batch", train.labeled_per_batch},
          {"learning_rate", train.adam.learning_rate},
          {"adam_beta1", train.adam.beta1},
          {"adam_beta2", train.adam.beta2},
          {"adam_eps", train.adam.eps},
          {"validation_period", train.validation_period},
          {"reset_optimizer_on_refresh", train.reset_optimizer_on_refresh},
          {"share_contrastive_view", train.share_contrastive_view},
          {"contrastive",
           {{"temperature", train.contrastive.temperature},
            {"samples_per_class", train.contrastive.samples_per_class},
            {"mode", match_mode_name(train.contrastive.mode)},
            {"lambda_cont", train.contrastive.lambda_cont}}},
          {"consistency",
           {{"threshold", train.consistency.threshold},
            {"num_transform_pairs", train.consistency.num_transform_pairs},
            {"elastic", train.consistency.elastic},
            {"transforms", augment_json(train.consistency.transforms)}}},
          {"augment", augment_json(train.augment)}}},
    };
}

void ExperimentConfig::validate() const {
    synthetic.validate();
    preprocess.validate();
    network.validate();
    (void)train.validate();
    if (n_runs < 1) throw std::invalid_argument("n_runs must be at least 1");
    if (network.num_classes_plus_bg != synthetic.num_classes + 1) {
        throw std::invalid_argument("network.num_classes_plus_bg must equal synthetic.num_classes + 1");
    }
    if (network.input_dims != preprocess.target_dims) {
        throw std::invalid_argument("network.input_dims must equal preprocess.target_dims");
    }
    if (split.n_labeled < 1 || split.n_val < 0 || split.n_test < 0) throw std::invalid_argument("invalid split sizes");
}

TrainConfig ExperimentConfig::resolved_train() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
}

ExperimentConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot read config file " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw std::invalid_argument("malformed config file " + path.string() + ": " + e.what());
    }
    return ExperimentConfig::from_json(j);
}

void apply_env_overrides(ExperimentConfig& cfg) {
    const char* v = std::getenv(kSeedEnvVar);
    if (v == nullptr || *v == '\0') return;
    try {
        std::size_t pos = 0;
        const auto seed = std::stoull(v, &pos);
        if (pos != std::string(v).size()) throw std::invalid_argument("trailing characters");
        cfg.seed = seed;
    } catch (const std::exception&) {
        throw std::invalid_argument(std::string(kSeedEnvVar) + " must be a nonnegative integer");
    }
}

}  // namespace semiseg
