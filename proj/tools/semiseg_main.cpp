// semiseg: command-line entry points for data generation, preprocessing,
// training, pseudo-labeling, evaluation, representation export and reporting.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "semiseg/checkpoint.hpp"
#include "semiseg/config.hpp"
#include "semiseg/dataset.hpp"
#include "semiseg/evaluate.hpp"
#include "semiseg/preprocess.hpp"
#include "semiseg/pseudolabel.hpp"
#include "semiseg/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace semiseg;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CommonOptions {
    std::string config_path;
    std::string preset;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("--config", o.config_path, "JSON config file")->check(CLI::ExistingFile);
    cmd->add_option("--preset", o.preset, "Config preset when no file is given: desk or paper");
    cmd->add_option("--seed", o.seed, "Seed (overrides SEMISEG_SEED and the config file)");
}

// Precedence: flag > environment > file > preset default.
template <typename Fn>
ExperimentConfig resolve(const CommonOptions& o, Fn&& apply_flags) {
    try {
        if (!o.config_path.empty() && !o.preset.empty()) throw std::invalid_argument("--config and --preset are exclusive");
        ExperimentConfig cfg = o.config_path.empty() ? ExperimentConfig::from_preset(o.preset.empty() ? "desk" : o.preset)
                                                     : load_config_file(o.config_path);
        apply_env_overrides(cfg);
        if (o.seed) cfg.seed = *o.seed;
        apply_flags(cfg);
        cfg.validate();
        return cfg;
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
}

void write_json(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("missing file " + path.string());
    return json::parse(in);
}

void echo_config(const fs::path& dir, const std::string& command, const ExperimentConfig& cfg) {
    write_json(dir / ("config." + command + ".json"), cfg.to_json());
}

std::vector<Subject> load_subjects(const std::string& data) {
    if (data.empty()) throw UsageError("--data is required");
    return load_dataset(data);
}

json split_to_json(const DatasetSplit& split) {
    auto ids = [](const auto& vols) {
        json a = json::array();
        for (const auto& v : vols) {
            if constexpr (std::is_same_v<std::decay_t<decltype(v)>, Volume>) a.push_back(v.subject_id);
            else a.push_back(v.image.subject_id);
        }
        return a;
    };
    return {{"seed", split.seed},
            {"labeled", ids(split.labeled)},
            {"validation", ids(split.validation)},
            {"test", ids(split.test)},
            {"unlabeled", ids(split.unlabeled)}};
}

// Subjects named in split[subset] (all subjects when subset is "all").
std::vector<Subject> select_subjects(std::vector<Subject> all, const json* split, const std::string& subset) {
    if (subset == "all" || split == nullptr) return all;
    if (!split->contains(subset)) throw UsageError("unknown split subset: " + subset);
    std::vector<Subject> out;
    for (const auto& id : split->at(subset)) {
        auto it = std::find_if(all.begin(), all.end(), [&](const Subject& s) { return s.image.subject_id == id; });
        if (it == all.end()) throw std::runtime_error("subject " + id.get<std::string>() + " not in dataset");
        out.push_back(std::move(*it));
    }
    return out;
}

std::optional<json> load_split_for(const std::string& split_path, const std::string& checkpoint) {
    fs::path p = split_path;
    if (p.empty() && !checkpoint.empty()) {
        const fs::path guess = fs::path(checkpoint).parent_path() / "split.json";
        if (fs::exists(guess)) p = guess;
    }
    if (p.empty()) return std::nullopt;
    return read_json(p);
}

void save_state_checkpoint(const fs::path& path, TrainState& state, const ExperimentConfig& cfg,
                           const std::string& kind) {
    json extra{{"kind", kind},
               {"mode", to_string(cfg.train.mode)},
               {"seed", cfg.seed},
               {"best_val_dsc", state.best_val_dsc},
               {"best_iteration", state.best_iteration}};
    save_checkpoint(path, state.net, &*state.adam, state.iteration, extra);
}

void save_best_checkpoint(const fs::path& path, TrainState& state, const ExperimentConfig& cfg) {
    if (state.best.empty()) return;
    SegNet best(state.net->config());
    restore(best, select_best_model(state));
    json extra{{"kind", "best"},
               {"mode", to_string(cfg.train.mode)},
               {"seed", cfg.seed},
               {"best_val_dsc", state.best_val_dsc},
               {"best_iteration", state.best_iteration}};
    save_checkpoint(path, best, nullptr, state.best_iteration, extra);
}

// ---- generate ---------------------------------------------------------------

int cmd_generate(const CommonOptions& common, const std::string& out, std::optional<int> num_subjects) {
    const auto cfg = resolve(common, [&](ExperimentConfig& c) {
        if (num_subjects) c.synthetic.num_subjects = *num_subjects;
    });
    const auto subjects = generate_synthetic_dataset(cfg.synthetic, cfg.seed);
    save_dataset(out, subjects, cfg.synthetic.num_classes);
    echo_config(out, "generate", cfg);
    std::cout << "generated " << subjects.size() << " subjects in " << out << '\n';
    return 0;
}

// ---- preprocess -------------------------------------------------------------

int cmd_preprocess(const CommonOptions& common, const std::string& in, const std::string& out) {
    const auto cfg = resolve(common, [](ExperimentConfig&) {});
    const auto subjects = load_subjects(in);
    std::vector<Subject> processed;
    int num_classes = 0;
    for (const auto& s : subjects) {
        processed.push_back(preprocess_subject(s, cfg.preprocess));
        if (s.labels) num_classes = std::max(num_classes, s.labels->num_classes);
    }
    if (num_classes == 0) num_classes = cfg.synthetic.num_classes;
    save_dataset(out, processed, num_classes);
    echo_config(out, "preprocess", cfg);
    std::cout << "preprocessed " << processed.size() << " subjects into " << out << '\n';
    return 0;
}

// ---- train ------------------------------------------------------------------

struct TrainFlags {
    std::string data, out, mode, contrastive_mode, init;
    std::optional<int> labeled_volumes, num_pseudo_steps;
    std::optional<std::int64_t> phase1_iters, phase2_iters, refresh_period, validation_period;
    std::optional<double> lambda_cont, consistency_threshold;
    bool phase1_only = false;
};

int cmd_train(const CommonOptions& common, const TrainFlags& f) {
    const auto cfg = resolve(common, [&](ExperimentConfig& c) {
        if (!f.mode.empty()) c.train.mode = parse_train_mode(f.mode);
        if (f.labeled_volumes) c.split.n_labeled = *f.labeled_volumes;
        if (f.phase1_iters) c.train.phase1_iters = *f.phase1_iters;
        if (f.phase2_iters) c.train.phase2_iters = *f.phase2_iters;
        if (f.refresh_period) c.train.refresh_period = *f.refresh_period;
        if (f.num_pseudo_steps) c.train.num_pseudo_steps = *f.num_pseudo_steps;
        if (f.validation_period) c.train.validation_period = *f.validation_period;
        if (f.lambda_cont) c.train.contrastive.lambda_cont = *f.lambda_cont;
        if (f.consistency_threshold) c.train.consistency.threshold = *f.consistency_threshold;
        if (!f.contrastive_mode.empty()) {
            json j = c.to_json();
            j["train"]["contrastive"]["mode"] = f.contrastive_mode;
            c = ExperimentConfig::from_json(j);
        }
    });
    if (f.out.empty()) throw UsageError("--out is required");
    const TrainConfig tcfg = cfg.resolved_train();
    for (const auto& w : tcfg.validate()) std::cerr << "semiseg: warning: " << w << '\n';

    const fs::path out = f.out;
    fs::create_directories(out);
    echo_config(out, "train", cfg);

    SplitOptions split_opts = cfg.split;
    split_opts.seed = cfg.seed;
    auto [split, hidden] = make_split(load_subjects(f.data), split_opts);
    write_json(out / "split.json", split_to_json(split));

    TrainState state = init_state(cfg.network, tcfg);
    state.log.open_file(out / "metrics.jsonl");
    if (!f.init.empty()) {
        // Continue from a saved phase-1 state: skip phase 1.
        state.iteration = load_checkpoint(f.init, state.net, &*state.adam);
        state.rng = Rng(mix_seed(tcfg.seed, 5));
    } else {
        train_phase1(split, state, tcfg);
        save_state_checkpoint(out / "model_phase1.ckpt", state, cfg, "phase1");
    }
    if (!f.phase1_only) {
        PseudoLabelQualityObserver observer(hidden);
        train_phase2(split, state, tcfg, {&observer, nullptr});
        if (!observer.quality().empty()) write_json(out / "pseudo_label_quality.json", observer.quality());
        save_pseudo_labels(out / "pseudo_labels", state.store);
    }
    save_state_checkpoint(out / "model_final.ckpt", state, cfg, "final");
    save_best_checkpoint(out / "model_best.ckpt", state, cfg);
    std::cout << "trained " << to_string(tcfg.mode) << " for " << state.iteration
              << " iterations; best validation DSC " << state.best_val_dsc << " at iteration "
              << state.best_iteration << '\n';
    return 0;
}

// ---- pseudo-label -----------------------------------------------------------

int cmd_pseudo_label(const CommonOptions& common, const std::string& checkpoint, const std::string& data,
                     const std::string& split_path, const std::string& out, std::optional<double> threshold) {
    const auto cfg = resolve(common, [&](ExperimentConfig& c) {
        if (threshold) c.train.consistency.threshold = *threshold;
    });
    SegNet net = load_network(checkpoint);
    auto all = load_subjects(data);
    const auto split = load_split_for(split_path, checkpoint);
    std::vector<Volume> volumes;
    if (split) {
        for (auto& s : select_subjects(all, &*split, "unlabeled")) volumes.push_back(std::move(s.image));
    } else {
        for (auto& s : all) {
            if (!s.labels) volumes.push_back(std::move(s.image));
        }
    }
    if (volumes.empty()) throw UsageError("no unlabeled volumes to pseudo-label");
    auto store = estimate_pseudo_labels(net, volumes, read_checkpoint(checkpoint).iteration);
    json scores = json::object();
    if (cfg.train.consistency.threshold > 0.0) {
        Rng rng(mix_seed(cfg.seed, 6));
        std::map<std::string, double> s;
        for (const auto& v : volumes) s[v.subject_id] = consistency_score(net, v, rng, cfg.train.consistency);
        store = filter_by_consistency(std::move(store), s, cfg.train.consistency.threshold);
        for (const auto& [id, v] : s) scores[id] = v;
    }
    save_pseudo_labels(out, store);
    if (!scores.empty()) write_json(fs::path(out) / "consistency_scores.json", scores);
    echo_config(out, "pseudo-label", cfg);
    std::cout << "pseudo-labeled " << store.labels.size() << " volumes, " << store.retained.size() << " retained\n";
    return 0;
}

// ---- evaluate ---------------------------------------------------------------

int cmd_evaluate(const CommonOptions& common, const std::string& checkpoint, const std::string& data,
                 const std::string& split_path, const std::string& subset, const std::string& out_dir) {
    const auto cfg = resolve(common, [](ExperimentConfig&) {});
    if (checkpoint.empty()) throw UsageError("--checkpoint is required");
    SegNet net = load_network(checkpoint);
    const auto split = load_split_for(split_path, checkpoint);
    std::vector<LabeledVolume> volumes;
    for (auto& s : select_subjects(load_subjects(data), split ? &*split : nullptr, subset)) {
        if (s.labels) volumes.push_back({std::move(s.image), std::move(*s.labels)});
    }
    if (volumes.empty()) throw UsageError("no labeled volumes to evaluate");
    EvalReport report = evaluate_model(net, volumes);
    const auto ck = read_checkpoint(checkpoint);
    report.seed = ck.extra.value("seed", std::uint64_t{0});
    report.config = {{"checkpoint", fs::absolute(checkpoint).string()},
                     {"subset", split ? subset : std::string("all")},
                     {"network", to_json(ck.config)},
                     {"checkpoint_extra", ck.extra}};
    const fs::path out = out_dir.empty() ? fs::path(checkpoint).parent_path() : fs::path(out_dir);
    write_json(out / "eval_report.json", report.to_json());
    echo_config(out, "evaluate", cfg);
    std::cout << report.to_json().dump(2) << '\n';
    return 0;
}

// ---- export-reps ------------------------------------------------------------

int cmd_export_reps(const CommonOptions& common, const std::string& checkpoint, const std::string& data,
                    const std::string& split_path, const std::string& subset, const std::string& pseudo_dir,
                    const std::string& out, int n_per_class) {
    const auto cfg = resolve(common, [](ExperimentConfig&) {});
    SegNet net = load_network(checkpoint);
    const auto split = load_split_for(split_path, checkpoint);
    std::optional<PseudoLabelStore> pseudo;
    if (!pseudo_dir.empty()) pseudo = load_pseudo_labels(pseudo_dir);
    std::vector<RepresentationSlice> slices;
    for (const auto& s : select_subjects(load_subjects(data), split ? &*split : nullptr, subset)) {
        const LabelVolume* labels = s.labels ? &*s.labels : nullptr;
        if (labels == nullptr && pseudo && pseudo->labels.contains(s.image.subject_id)) {
            labels = &pseudo->labels.at(s.image.subject_id);
        }
        if (labels == nullptr) continue;
        for (int k = 0; k < s.image.slices; ++k) {
            slices.push_back({s.image.subject_id, k, s.image.slice(k), labels->slice(k)});
        }
    }
    if (slices.empty()) throw UsageError("no labeled or pseudo-labeled slices to export");
    Rng rng(mix_seed(cfg.seed, 7));
    const auto rows = export_pixel_representations(net, slices, n_per_class, rng, out);
    echo_config(fs::path(out).parent_path().empty() ? fs::path(".") : fs::path(out).parent_path(), "export-reps", cfg);
    std::cout << "wrote " << rows << " rows to " << out << '\n';
    return 0;
}

// ---- report -----------------------------------------------------------------

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
    if (run_dirs.empty()) throw UsageError("report needs at least one run directory");
    // (mode, n_labeled) -> reports
    std::map<std::pair<std::string, int>, std::vector<EvalReport>> cells;
    std::set<int> columns;
    for (const auto& dir : run_dirs) {
        const auto cfg = read_json(fs::path(dir) / "config.train.json");
        const auto mode = cfg.at("train").at("mode").get<std::string>();
        const int n_labeled = cfg.at("split").at("n_labeled").get<int>();
        cells[{mode, n_labeled}].push_back(EvalReport::from_json(read_json(fs::path(dir) / "eval_report.json")));
        columns.insert(n_labeled);
    }
    std::vector<std::string> rows;
    for (auto m : {TrainMode::baseline, TrainMode::self_training, TrainMode::joint_pl_seg, TrainMode::proposed}) {
        const auto name = to_string(m);
        if (std::any_of(cells.begin(), cells.end(), [&](const auto& c) { return c.first.first == name; })) {
            rows.push_back(name);
        }
    }

    json table = json::array();
    std::ostringstream md;
    md << "| mode |";
    for (int c : columns) md << " |X_L|=" << c << " |";
    md << "\n|---|";
    for (std::size_t i = 0; i < columns.size(); ++i) md << "---|";
    md << '\n';
    md << std::fixed << std::setprecision(3);
    for (const auto& mode : rows) {
        md << "| " << mode << " |";
        json row{{"mode", mode}, {"cells", json::object()}};
        for (int c : columns) {
            auto it = cells.find({mode, c});
            if (it == cells.end()) {
                md << " - |";
                continue;
            }
            const auto s = aggregate_runs(it->second);
            row["cells"][std::to_string(c)] = s.to_json();
            md << ' ' << s.mean << " ± " << s.std << " (n=" << s.num_runs << ") |";
        }
        md << '\n';
        table.push_back(row);
    }
    std::cout << md.str();
    if (!out_dir.empty()) {
        write_json(fs::path(out_dir) / "report.json", {{"format", "semiseg-report"}, {"version", 1}, {"rows", table}});
        std::ofstream(fs::path(out_dir) / "report.md") << md.str();
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"semiseg: semi-supervised segmentation with pseudo-labels and a pixel-wise contrastive loss"};
    app.require_subcommand(1);

    CommonOptions common;
    std::string data, out, in, checkpoint, split_path, subset = "test", pseudo_dir;
    std::optional<int> num_subjects;
    std::optional<double> threshold;
    int n_per_class = 5;
    TrainFlags tf;
    std::vector<std::string> run_dirs;

    auto* gen = app.add_subcommand("generate", "Write a synthetic dataset");
    add_common(gen, common);
    gen->add_option("--out", out, "Output dataset directory")->required();
    gen->add_option("--num-subjects", num_subjects, "Number of subjects");

    auto* pre = app.add_subcommand("preprocess", "Normalize, resample and crop a dataset");
    add_common(pre, common);
    pre->add_option("--in", in, "Input dataset directory")->required();
    pre->add_option("--out", out, "Output dataset directory")->required();

    auto* train = app.add_subcommand("train", "Train one mode (phase 1 then phase 2)");
    add_common(train, common);
    train->add_option("--data", tf.data, "Preprocessed dataset directory")->required();
    train->add_option("--out", tf.out, "Run output directory")->required();
    train->add_option("--mode", tf.mode, "proposed | self_training | joint_pl_seg | baseline");
    train->add_option("--labeled-volumes", tf.labeled_volumes, "Number of labeled volumes");
    train->add_option("--phase1-iters", tf.phase1_iters, "Phase-1 iterations");
    train->add_option("--phase2-iters", tf.phase2_iters, "Phase-2 iterations");
    train->add_option("--refresh-period", tf.refresh_period, "Iterations between pseudo-label refreshes");
    train->add_option("--num-pseudo-steps", tf.num_pseudo_steps, "Number of pseudo-labeling steps");
    train->add_option("--validation-period", tf.validation_period, "Iterations between validations");
    train->add_option("--lambda-cont", tf.lambda_cont, "Contrastive loss weight");
    train->add_option("--contrastive-mode", tf.contrastive_mode, "intra | inter | pooled");
    train->add_option("--consistency-threshold", tf.consistency_threshold, "Pseudo-label consistency filter (0 = off)");
    train->add_option("--init", tf.init, "Phase-1 checkpoint to continue from (skips phase 1)")->check(CLI::ExistingFile);
    train->add_flag("--phase1-only", tf.phase1_only, "Stop after phase 1");

    auto* pl = app.add_subcommand("pseudo-label", "Estimate pseudo-labels for unlabeled volumes");
    add_common(pl, common);
    pl->add_option("--checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    pl->add_option("--data", data, "Dataset directory")->required();
    pl->add_option("--split", split_path, "split.json (default: next to the checkpoint)");
    pl->add_option("--out", out, "Output store directory")->required();
    pl->add_option("--consistency-threshold", threshold, "Consistency filter threshold (0 = off)");

    auto* ev = app.add_subcommand("evaluate", "Test-set DSC of a checkpoint");
    add_common(ev, common);
    ev->add_option("--checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--data", data, "Dataset directory")->required();
    ev->add_option("--split", split_path, "split.json (default: next to the checkpoint)");
    ev->add_option("--subset", subset, "test | validation | labeled | all");
    ev->add_option("--out", out, "Output directory (default: the checkpoint's directory)");

    auto* ex = app.add_subcommand("export-reps", "Export backbone pixel representations as CSV");
    add_common(ex, common);
    ex->add_option("--checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    ex->add_option("--data", data, "Dataset directory")->required();
    ex->add_option("--split", split_path, "split.json (default: next to the checkpoint)");
    ex->add_option("--subset", subset, "Split subset to export (default test)");
    ex->add_option("--pseudo-labels", pseudo_dir, "Pseudo-label store for subjects without ground truth");
    ex->add_option("--n-per-class", n_per_class, "Pixels per class per slice");
    ex->add_option("--out", out, "Output CSV path")->required();

    auto* rep = app.add_subcommand("report", "Aggregate evaluated runs into a mode x |X_L| table");
    rep->add_option("runs", run_dirs, "Run directories")->required();
    rep->add_option("--out", out, "Directory for report.json and report.md");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_generate(common, out, num_subjects);
        if (pre->parsed()) return cmd_preprocess(common, in, out);
        if (train->parsed()) return cmd_train(common, tf);
        if (pl->parsed()) return cmd_pseudo_label(common, checkpoint, data, split_path, out, threshold);
        if (ev->parsed()) return cmd_evaluate(common, checkpoint, data, split_path, subset, out);
        if (ex->parsed()) return cmd_export_reps(common, checkpoint, data, split_path, subset, pseudo_dir, out, n_per_class);
        if (rep->parsed()) return cmd_report(run_dirs, out);
    } catch (const UsageError& e) {
        std::cerr << "semiseg: error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::string msg = e.what();
        msg = msg.substr(0, msg.find('\n'));
        std::cerr << "semiseg: error: " << msg << '\n';
        return 2;
    }
    return 1;
}
