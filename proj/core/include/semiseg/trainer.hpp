#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semiseg/augment.hpp"
#include "semiseg/dataset.hpp"
#include "semiseg/evaluate.hpp"
#include "semiseg/losses.hpp"
#include "semiseg/network.hpp"
#include "semiseg/pseudolabel.hpp"

namespace semiseg {

enum class TrainMode {
    proposed,       ///< Dice on labeled slices; contrastive term on every slice
    self_training,  ///< Dice on labeled and pseudo-labeled slices; no contrastive term
    joint_pl_seg,   ///< Dice on labeled and pseudo-labeled slices plus the contrastive term
    baseline,       ///< labeled slices only, phase-1 regime throughout
};

std::string to_string(TrainMode mode);
/// Throws std::invalid_argument for an unknown name.
TrainMode parse_train_mode(const std::string& name);

struct TrainConfig {
    TrainMode mode = TrainMode::proposed;
    std::int64_t phase1_iters = 5000;
    std::int64_t phase2_iters = 15000;
    std::int64_t refresh_period = 5000;
    int num_pseudo_steps = 3;
    int batch_size = 20;
    int labeled_per_batch = 10;
    AdamOptions adam{};
    ContrastiveConfig contrastive{};
    ConsistencyConfig consistency{};
    AugmentConfig augment{};
    std::int64_t validation_period = 500;
    /// Drop optimizer moments at every pseudo-label refresh.
    bool reset_optimizer_on_refresh = false;
    /// Feed the segmentation-branch views (geometric + intensity augmented) of
    /// the slices that have one to the contrastive branch, instead of fresh
    /// intensity-only views of the raw slices.
    bool share_contrastive_view = false;
    std::uint64_t seed = 0;

    /// Throws on invalid settings; returns warnings for suspicious ones.
    std::vector<std::string> validate() const;
    int unlabeled_per_batch() const noexcept { return batch_size - labeled_per_batch; }

    static TrainConfig paper();
    static TrainConfig desk();
};

/// Line-delimited JSON metrics, kept in memory and optionally mirrored to a file.
///
/// Records:
///   {"event":"iter","phase":p,"iter":t,"step":k,"seg_loss":..,"cont_loss":..,"total_loss":..,
///    "n_labeled":..,"n_pseudo":..}
///   {"event":"val","phase":p,"iter":t,"val_dsc":..,"per_class":[..],"best_val_dsc":..}
///   {"event":"refresh","iter":t,"step":k,"estimation_iteration":t,"stored":n,"retained":m}
/// `iter` counts iterations from the start of phase 1.
class MetricsLog {
public:
    void append(const nlohmann::json& record);
    /// Mirrors every existing and future record to `path` (truncating it).
    void open_file(const std::filesystem::path& path);
    void close_file();

    const std::vector<std::string>& lines() const noexcept { return lines_; }
    std::vector<nlohmann::json> records(const std::string& event = {}) const;

private:
    std::vector<std::string> lines_;
    std::shared_ptr<std::ofstream> file_;
};

struct ValidationPoint {
    std::int64_t iteration = 0;
    double dsc = 0.0;
};

/// Receives training events. Only diagnostics code implements this; hidden
/// ground truth never reaches the trainer itself.
class TrainObserver {
public:
    virtual ~TrainObserver() = default;
    virtual void on_refresh(int /*step*/, std::int64_t /*iteration*/, const PseudoLabelStore& /*store*/) {}
};

/// Records pseudo-label DSC against hidden truth at every refresh.
class PseudoLabelQualityObserver : public TrainObserver {
public:
    explicit PseudoLabelQualityObserver(const HiddenTruth& truth) : truth_(truth) {}
    void on_refresh(int step, std::int64_t iteration, const PseudoLabelStore& store) override;
    const std::vector<double>& quality() const noexcept { return quality_; }

private:
    const HiddenTruth& truth_;
    std::vector<double> quality_;
};

struct TrainHooks {
    TrainObserver* observer = nullptr;
    LossAudit* audit = nullptr;
};

struct TrainState {
    SegNet net{nullptr};
    std::optional<Adam> adam;
    Rng rng{0};
    std::int64_t iteration = 0;  ///< iterations completed since the start of phase 1
    PseudoLabelStore store;
    double best_val_dsc = -1.0;
    std::int64_t best_iteration = -1;
    StateSnapshot best;
    std::vector<ValidationPoint> validations;
    MetricsLog log;

    /// Deep copy: fresh network, optimizer over it, cloned moments, copied rng.
    TrainState clone() const;
};

/// Fresh network and optimizer; weights drawn from cfg.seed.
TrainState init_state(const NetworkConfig& net_cfg, const TrainConfig& cfg);

/// Dice-only training on all-labeled, fully augmented batches.
void train_phase1(const DatasetSplit& split, TrainState& state, const TrainConfig& cfg, TrainHooks hooks = {});
TrainState train_phase1(const DatasetSplit& split, const NetworkConfig& net_cfg, const TrainConfig& cfg,
                        TrainHooks hooks = {});

/// num_pseudo_steps windows of refresh_period iterations; pseudo-labels are
/// re-estimated at the start of each window. The contrastive head is re-drawn
/// at phase-2 start.
void train_phase2(const DatasetSplit& split, TrainState& state, const TrainConfig& cfg, TrainHooks hooks = {});

/// Index of the first maximum; throws on an empty curve.
std::size_t best_index(std::span<const double> curve);

/// Parameters of the best validation point (ties go to the earliest).
StateSnapshot select_best_model(const TrainState& state);

struct RunResult {
    TrainMode mode = TrainMode::proposed;
    std::uint64_t seed = 0;
    EvalReport report;
    std::vector<double> pseudo_label_quality;
    std::vector<std::string> metrics;
    std::vector<LossCall> loss_calls;
};

struct ExperimentOptions {
    SplitOptions split{};
    NetworkConfig network{};
    TrainConfig train{};
    std::vector<TrainMode> modes{TrainMode::proposed};
    int n_runs = 6;
    bool audit_losses = false;
    /// Called with the finished state of every (run, mode) pair, e.g. to save a checkpoint.
    std::function<void(const RunResult&, TrainState&)> on_run_end{};
};

struct ExperimentResult {
    std::vector<RunResult> runs;

    /// Aggregates per mode, in first-seen order.
    std::vector<std::pair<TrainMode, RunSummary>> summaries() const;
};

/// Per-run seed used by run_experiment.
std::uint64_t run_seed(std::uint64_t base_seed, int run);

/// For each run: resample the split, train phase 1 once, then run phase 2 of
/// every requested mode from a copy of the phase-1 state and evaluate the best
/// validation model on the test set.
ExperimentResult run_experiment(const std::vector<Subject>& dataset, const ExperimentOptions& opts);

}  // namespace semiseg
