#include "semiseg/trainer.hpp"

#include <algorithm>
#include <stdexcept>

namespace semiseg {

using nlohmann::json;

std::string to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::proposed: return "proposed";
        case TrainMode::self_training: return "self_training";
        case TrainMode::joint_pl_seg: return "joint_pl_seg";
        case TrainMode::baseline: return "baseline";
    }
    return "unknown";
}

TrainMode parse_train_mode(const std::string& name) {
    for (auto m : {TrainMode::proposed, TrainMode::self_training, TrainMode::joint_pl_seg, TrainMode::baseline}) {
        if (to_string(m) == name) return m;
    }
    throw std::invalid_argument("unknown training mode: " + name);
}

std::vector<std::string> TrainConfig::validate() const {
    if (phase1_iters < 0 || phase2_iters < 0) throw std::invalid_argument("iteration counts must be nonnegative");
    if (refresh_period < 1) throw std::invalid_argument("refresh_period must be positive");
    if (num_pseudo_steps < 1) throw std::invalid_argument("num_pseudo_steps must be positive");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
    if (labeled_per_batch < 1 || labeled_per_batch > batch_size) {
        throw std::invalid_argument("labeled_per_batch must lie in [1, batch_size]");
    }
    if (!(adam.learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (validation_period < 1) throw std::invalid_argument("validation_period must be positive");
    if (mode != TrainMode::baseline && unlabeled_per_batch() == 0) {
        throw std::invalid_argument("mode " + to_string(mode) + " needs unlabeled slots (labeled_per_batch < batch_size)");
    }
    contrastive.validate();
    consistency.validate();
    augment.validate();
    std::vector<std::string> warnings;
    if (phase2_iters != num_pseudo_steps * refresh_period) {
        warnings.push_back("phase2_iters (" + std::to_string(phase2_iters) + ") != num_pseudo_steps * refresh_period (" +
                           std::to_string(num_pseudo_steps * refresh_period) + ")");
    }
    return warnings;
}

TrainConfig TrainConfig::paper() { return TrainConfig{}; }

TrainConfig TrainConfig::desk() {
    TrainConfig cfg;
    // Sized so 3 seeds of 3 modes fit a 45 minute single-core budget.
    cfg.phase1_iters = 300;
    cfg.refresh_period = 150;
    cfg.num_pseudo_steps = 3;
    cfg.phase2_iters = 450;
    cfg.validation_period = 100;
    return cfg;
}

void MetricsLog::append(const json& record) {
    lines_.push_back(record.dump());
    if (file_) {
        *file_ << lines_.back() << '\n';
        file_->flush();
    }
}

void MetricsLog::open_file(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    file_ = std::make_shared<std::ofstream>(path, std::ios::trunc);
    if (!*file_) throw std::runtime_error("cannot open metrics log " + path.string());
    for (const auto& l : lines_) *file_ << l << '\n';
    file_->flush();
}

void MetricsLog::close_file() { file_.reset(); }

std::vector<json> MetricsLog::records(const std::string& event) const {
    std::vector<json> out;
    for (const auto& l : lines_) {
        auto j = json::parse(l);
        if (event.empty() || j.value("event", "") == event) out.push_back(std::move(j));
    }
    return out;
}

void PseudoLabelQualityObserver::on_refresh(int, std::int64_t, const PseudoLabelStore& store) {
    if (auto q = pseudo_label_quality(store, truth_)) quality_.push_back(*q);
}

TrainState TrainState::clone() const {
    TrainState out;
    out.net = SegNet(net->config());
    auto src = net;  // holder copy shares the module
    restore(out.net, snapshot(src));
    out.net->train(net->is_training());
    if (adam) {
        out.adam.emplace(make_adam(out.net, adam->options()));
        for (const auto& [name, slot] : adam->state()) {
            out.adam->state()[name] = Adam::Slot{slot.exp_avg.clone(), slot.exp_avg_sq.clone(), slot.step};
        }
    }
    out.rng = rng;
    out.iteration = iteration;
    out.store = store;
    out.best_val_dsc = best_val_dsc;
    out.best_iteration = best_iteration;
    for (const auto& [name, t] : best) out.best.emplace_back(name, t.clone());
    out.validations = validations;
    for (const auto& l : log.lines()) out.log.append(json::parse(l));
    return out;
}

TrainState init_state(const NetworkConfig& net_cfg, const TrainConfig& cfg) {
    net_cfg.validate();
    TrainState state;
    state.net = init_parameters(net_cfg, mix_seed(cfg.seed, 1));
    state.net->train();
    state.adam.emplace(make_adam(state.net, cfg.adam));
    state.rng = Rng(mix_seed(cfg.seed, 2));
    return state;
}

namespace {

struct SegInputs {
    std::vector<Image> images;
    std::vector<LabelMap> labels;
    std::vector<SliceSource> sources;
};

// Geometric + intensity augmentation of the segmentation inputs.
SegInputs seg_inputs(const SliceBatch& batch, std::size_t count, Rng& rng, const AugmentConfig& aug) {
    SegInputs in;
    for (std::size_t i = 0; i < count; ++i) {
        const auto& s = batch.slices[i];
        const auto geom = sample_geom(rng, aug, s.image.rows(), s.image.cols());
        const auto inten = sample_intensity(rng, aug);
        in.images.push_back(apply_intensity(apply_geom(s.image, geom), inten));
        in.labels.push_back(apply_geom(s.labels, geom));
        in.sources.push_back(s.source);
    }
    return in;
}

// Intensity-only views of every slice for the contrastive term; with `shared`,
// slices that already have a segmentation view reuse it.
SegInputs contrastive_inputs(const SliceBatch& batch, const SegInputs* shared, Rng& rng, const AugmentConfig& aug) {
    SegInputs in;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& s = batch.slices[i];
        if (shared != nullptr && i < shared->images.size()) {
            in.images.push_back(shared->images[i]);
            in.labels.push_back(shared->labels[i]);
        } else {
            in.images.push_back(apply_intensity(s.image, sample_intensity(rng, aug)));
            in.labels.push_back(s.labels);
        }
        in.sources.push_back(s.source);
    }
    return in;
}

int num_classes_of(const TrainState& state) { return state.net->config().num_classes_plus_bg - 1; }

void check_split(const DatasetSplit& split, const TrainState& state) {
    if (split.labeled.empty()) throw std::invalid_argument("empty labeled set");
    const auto& dims = state.net->config().input_dims;
    auto check = [&](const Volume& v) {
        if (v.rows != dims[0] || v.cols != dims[1]) {
            throw std::invalid_argument("dim mismatch: volume " + v.subject_id + " does not match the network input");
        }
    };
    for (const auto& v : split.labeled) check(v.image);
    for (const auto& v : split.validation) check(v.image);
    for (const auto& v : split.unlabeled) check(v);
}

void validate_now(const DatasetSplit& split, TrainState& state, int phase) {
    if (split.validation.empty()) return;
    const auto report = evaluate_model(state.net, split.validation);
    state.validations.push_back({state.iteration, report.foreground_mean});
    if (report.foreground_mean > state.best_val_dsc) {
        state.best_val_dsc = report.foreground_mean;
        state.best_iteration = state.iteration;
        state.best = snapshot(state.net);
    }
    state.log.append({{"event", "val"},
                      {"phase", phase},
                      {"iter", state.iteration},
                      {"val_dsc", report.foreground_mean},
                      {"per_class", report.per_class},
                      {"best_val_dsc", state.best_val_dsc}});
}

// One optimisation step; `step` is the pseudo-label window (-1 in phase 1).
void optimise(TrainState& state, const TrainConfig& cfg, const SegInputs& seg, const SegInputs* cont, int phase,
              int step, TrainHooks hooks) {
    LossInputs in;
    in.seg_probs = state.net->segment(state.net->features(images_to_tensor(seg.images)));
    in.seg_labels = labels_to_tensor(seg.labels);
    in.seg_sources = seg.sources;
    if (cont != nullptr) {
        in.embeddings = state.net->embed(state.net->features(images_to_tensor(cont->images)));
        in.cont_labels = labels_to_tensor(cont->labels);
        in.cont_sources = cont->sources;
    }
    if (hooks.audit) hooks.audit->iteration = state.iteration;
    const auto terms = total_loss(in, num_classes_of(state), cfg.contrastive, state.rng, hooks.audit);
    state.adam->zero_grad();
    terms.total.backward();
    state.adam->step();
    ++state.iteration;

    int n_labeled = 0, n_pseudo = 0;
    for (auto s : seg.sources) (s == SliceSource::labeled ? n_labeled : n_pseudo)++;
    state.log.append({{"event", "iter"},
                      {"phase", phase},
                      {"iter", state.iteration},
                      {"step", step},
                      {"seg_loss", terms.seg},
                      {"cont_loss", terms.cont},
                      {"total_loss", terms.total.item<double>()},
                      {"n_labeled", n_labeled},
                      {"n_pseudo", n_pseudo}});
}

void supervised_step(const DatasetSplit& split, TrainState& state, const TrainConfig& cfg, int phase, int step,
                     TrainHooks hooks) {
    const auto batch = sample_slice_batch(split, nullptr, cfg.batch_size, 0, state.rng);
    const auto seg = seg_inputs(batch, batch.size(), state.rng, cfg.augment);
    optimise(state, cfg, seg, nullptr, phase, step, hooks);
}

void refresh(const DatasetSplit& split, TrainState& state, const TrainConfig& cfg, int step, std::int64_t t,
             TrainHooks hooks) {
    if (cfg.reset_optimizer_on_refresh && step > 0) state.adam->reset();
    auto store = estimate_pseudo_labels(state.net, split.unlabeled, t);
    if (cfg.consistency.threshold > 0.0) {
        std::map<std::string, double> scores;
        for (const auto& v : split.unlabeled) {
            scores[v.subject_id] = consistency_score(state.net, v, state.rng, cfg.consistency);
        }
        store = filter_by_consistency(std::move(store), scores, cfg.consistency.threshold);
    }
    state.store = std::move(store);
    state.log.append({{"event", "refresh"},
                      {"iter", state.iteration},
                      {"step", step},
                      {"estimation_iteration", t},
                      {"stored", state.store.labels.size()},
                      {"retained", state.store.retained.size()}});
    if (hooks.observer) hooks.observer->on_refresh(step, t, state.store);
}

}  // namespace

void train_phase1(const DatasetSplit& split, TrainState& state, const TrainConfig& cfg, TrainHooks hooks) {
    cfg.validate();
    check_split(split, state);
    state.net->train();
    for (std::int64_t t = 0; t < cfg.phase1_iters; ++t) {
        supervised_step(split, state, cfg, 1, -1, hooks);
        if ((t + 1) % cfg.validation_period == 0 || t + 1 == cfg.phase1_iters) validate_now(split, state, 1);
    }
}

TrainState train_phase1(const DatasetSplit& split, const NetworkConfig& net_cfg, const TrainConfig& cfg,
                        TrainHooks hooks) {
    TrainState state = init_state(net_cfg, cfg);
    train_phase1(split, state, cfg, hooks);
    return state;
}

void train_phase2(const DatasetSplit& split, TrainState& state, const TrainConfig& cfg, TrainHooks hooks) {
    cfg.validate();
    check_split(split, state);
    const bool uses_unlabeled = cfg.mode != TrainMode::baseline;
    if (uses_unlabeled && split.unlabeled.empty()) {
        throw std::invalid_argument("mode " + to_string(cfg.mode) + " needs unlabeled volumes");
    }
    const bool contrastive = (cfg.mode == TrainMode::proposed || cfg.mode == TrainMode::joint_pl_seg) &&
                             cfg.contrastive.lambda_cont > 0.0;
    state.net->train();
    if (cfg.mode == TrainMode::proposed || cfg.mode == TrainMode::joint_pl_seg) {
        reinit_module(*state.net->contrastive_head(), mix_seed(cfg.seed, 3));
        state.adam->reset("contrastive_head.");
    }

    const std::int64_t last = cfg.phase2_iters;
    for (std::int64_t t = 0; t < last; ++t) {
        const int step = static_cast<int>(std::min<std::int64_t>(t / cfg.refresh_period, cfg.num_pseudo_steps - 1));
        if (!uses_unlabeled) {
            supervised_step(split, state, cfg, 2, step, hooks);
        } else {
            if (t % cfg.refresh_period == 0 && t / cfg.refresh_period < cfg.num_pseudo_steps) {
                refresh(split, state, cfg, step, t, hooks);
            }
            const auto batch =
                sample_slice_batch(split, &state.store, cfg.labeled_per_batch, cfg.unlabeled_per_batch(), state.rng);
            const std::size_t n_seg =
                cfg.mode == TrainMode::proposed ? static_cast<std::size_t>(cfg.labeled_per_batch) : batch.size();
            const auto seg = seg_inputs(batch, n_seg, state.rng, cfg.augment);
            if (contrastive) {
                const auto cont =
                    contrastive_inputs(batch, cfg.share_contrastive_view ? &seg : nullptr, state.rng, cfg.augment);
                optimise(state, cfg, seg, &cont, 2, step, hooks);
            } else {
                optimise(state, cfg, seg, nullptr, 2, step, hooks);
            }
        }
        if ((t + 1) % cfg.validation_period == 0 || t + 1 == last) validate_now(split, state, 2);
    }
}

std::size_t best_index(std::span<const double> curve) {
    if (curve.empty()) throw std::invalid_argument("no validation recorded");
    std::size_t best = 0;
    for (std::size_t i = 1; i < curve.size(); ++i) {
        if (curve[i] > curve[best]) best = i;
    }
    return best;
}

StateSnapshot select_best_model(const TrainState& state) {
    if (state.validations.empty() || state.best.empty()) throw std::invalid_argument("no validation recorded");
    return state.best;
}

std::vector<std::pair<TrainMode, RunSummary>> ExperimentResult::summaries() const {
    std::vector<std::pair<TrainMode, std::vector<EvalReport>>> grouped;
    for (const auto& r : runs) {
        auto it = std::find_if(grouped.begin(), grouped.end(), [&](const auto& g) { return g.first == r.mode; });
        if (it == grouped.end()) {
            grouped.push_back({r.mode, {}});
            it = std::prev(grouped.end());
        }
        it->second.push_back(r.report);
    }
    std::vector<std::pair<TrainMode, RunSummary>> out;
    for (const auto& [mode, reports] : grouped) out.emplace_back(mode, aggregate_runs(reports));
    return out;
}

std::uint64_t run_seed(std::uint64_t base_seed, int run) {
    return run == 0 ? base_seed : mix_seed(base_seed, static_cast<std::uint64_t>(run));
}

ExperimentResult run_experiment(const std::vector<Subject>& dataset, const ExperimentOptions& opts) {
    if (opts.n_runs < 1) throw std::invalid_argument("n_runs must be at least 1");
    if (opts.modes.empty()) throw std::invalid_argument("no training modes requested");
    ExperimentResult result;
    for (int run = 0; run < opts.n_runs; ++run) {
        const std::uint64_t seed = run_seed(opts.train.seed, run);
        SplitOptions split_opts = opts.split;
        split_opts.seed = seed;
        auto [split, hidden] = make_split(dataset, split_opts);

        TrainConfig base = opts.train;
        base.seed = seed;
        LossAudit phase1_audit;
        TrainState phase1 = init_state(opts.network, base);
        train_phase1(split, phase1, base, {nullptr, opts.audit_losses ? &phase1_audit : nullptr});

        for (TrainMode mode : opts.modes) {
            TrainConfig cfg = base;
            cfg.mode = mode;
            TrainState state = phase1.clone();
            PseudoLabelQualityObserver observer(hidden);
            LossAudit audit = phase1_audit;
            train_phase2(split, state, cfg, {&observer, opts.audit_losses ? &audit : nullptr});

            if (!state.best.empty()) restore(state.net, select_best_model(state));
            RunResult r;
            r.mode = mode;
            r.seed = seed;
            r.report = evaluate_model(state.net, split.test);
            r.report.seed = seed;
            r.pseudo_label_quality = observer.quality();
            r.metrics = state.log.lines();
            r.loss_calls = std::move(audit.calls);
            if (opts.on_run_end) opts.on_run_end(r, state);
            result.runs.push_back(std::move(r));
        }
    }
    return result;
}

}  // namespace semiseg
