#pragma once

#include "boxseg/common.hpp"
#include "boxseg/dataset.hpp"
#include "boxseg/fcn.hpp"
#include "boxseg/fillrate.hpp"
#include "boxseg/losses.hpp"
#include "boxseg/proposals.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace boxseg {

class TrainingError : public Error {
public:
    using Error::Error;
};

enum class Supervision { BoxLike, Crf, CrfFr, CrfBcm, CrfBcmFr, CrfBcmFrRefined };

std::string to_string(Supervision s);
Supervision supervision_from_string(const std::string& name);

struct TrainConfig {
    std::string name = "run";
    Supervision supervision = Supervision::Crf;
    /// Selection settings for supervisions with FR; `fr.mode` off falls back to class_fr, and
    /// crf+bcm+fr_refined always uses subclass_fr.
    FrSelectionConfig fr;
    AttentionMode attention = AttentionMode::ClassWise;
    double lambda = 0.01;
    int iterations = 2000;
    double base_lr = 0.05;
    double lr_decay = 0.1;
    int lr_step = 600;
    double momentum = 0.9;
    int batch_size = 8;
    std::uint64_t seed = 1;
    bool hflip = true;
    int crop_pad = 4;  // random crop from a zero-padded canvas; 0 disables
    double semi_fraction = 0.0;
    int branch_width = 8;
    /// Iterations trained with plain cross-entropy on the proposals before fill-rate selection starts.
    int fr_warmup = 1000;

    void validate() const;
    bool uses_masking() const;
    FrMode effective_fr_mode() const;
    ProposalMode proposal_mode() const;
    /// Step decay: base_lr * lr_decay^(iteration / lr_step).
    double lr_at(int iteration) const;
};

struct LogRow {
    int iteration = 0;
    double lr = 0.0;
    LossBreakdown loss;  // batch means
};

struct TrainLog {
    std::vector<LogRow> rows;

    std::string to_csv() const;
};

/// Trains from scratch. `proposals[i]` supervises `samples[i]`; `table` is required when the
/// supervision uses fill rates.
ModelState<float> train(const std::vector<ImageSample>& samples, const std::vector<LabelMap>& proposals,
                        const FillRateTable* table, const TrainConfig& cfg, TrainLog* log = nullptr);

/// Indices of samples supervised with ground truth for a semi fraction.
std::vector<bool> semi_subset(std::size_t count, double fraction, std::uint64_t seed);

struct EvalReport {
    std::vector<long> tp, fp, fn;
    std::vector<double> iou;       // NaN for classes absent from the ground truth
    double mean_iou = 0.0;         // over classes present in the ground truth
    std::uint64_t fingerprint = 0; // of the echoed config
    std::uint64_t seed = 0;
    std::string config_echo;

    std::string to_text() const;
    bool operator==(const EvalReport& o) const;
};

/// Accumulates a confusion over every pixel of every pair.
EvalReport evaluate_labels(const std::vector<LabelMap>& predictions, const std::vector<LabelMap>& truth, int num_classes);

EvalReport evaluate_miou(const ModelState<float>& state, const std::vector<ImageSample>& dataset);

struct AblationInputs {
    std::vector<ImageSample> train;
    std::vector<ImageSample> validation;
    std::vector<LabelMap> box_proposals;
    std::vector<LabelMap> crf_proposals;
    FillRateTable fill_rates;
};

/// Box and CRF proposals for the training split plus the fill-rate table from the CRF proposals.
AblationInputs prepare_ablation(std::vector<ImageSample> train, std::vector<ImageSample> validation,
                                const CrfParams& crf, int k, std::uint64_t cluster_seed);

struct AblationRow {
    TrainConfig config;
    std::vector<std::uint64_t> seeds;
    std::vector<double> miou;
    double median = 0.0;
};

using AblationProgress = std::function<void(const TrainConfig&, std::uint64_t seed, double miou)>;

std::vector<AblationRow> run_ablation(const AblationInputs& inputs, const std::vector<TrainConfig>& grid,
                                      const std::vector<std::uint64_t>& seeds, const AblationProgress& progress = {});

/// The supervision variants in table order, derived from `base`.
std::vector<TrainConfig> standard_ablation_grid(const TrainConfig& base);
/// One named row of the standard grid.
TrainConfig ablation_row(const std::string& name, const TrainConfig& base);

std::string ablation_to_csv(const std::vector<AblationRow>& rows);

double median(std::vector<double> values);

}  // namespace boxseg
