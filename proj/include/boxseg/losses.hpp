#pragma once

#include "boxseg/common.hpp"
#include "boxseg/fcn.hpp"
#include "boxseg/fillrate.hpp"

#include <span>
#include <string>
#include <vector>

namespace boxseg {

enum class FrMode { Off, ClassFr, SubclassFr, GlobalFr };
enum class RankingBase { AllBoxPixels, ProposalForeground };

std::string to_string(FrMode mode);
FrMode fr_mode_from_string(const std::string& name);
std::string to_string(RankingBase base);
RankingBase ranking_base_from_string(const std::string& name);

struct FrSelectionConfig {
    FrMode mode = FrMode::ClassFr;
    double global_rate = 0.6;
    RankingBase ranking_base = RankingBase::AllBoxPixels;

    void validate() const;
    bool operator==(const FrSelectionConfig&) const = default;
};

struct LossBreakdown {
    double fr_loss = 0.0;
    std::vector<double> bcm;  // one entry per attention map
    double lambda = 0.0;
    double total = 0.0;
    std::vector<long> selected;  // pixels kept per class by the selection

    double bcm_sum() const;
};

/// Fill rate used for each box under `cfg` (0 for every box when the mode is off). `proposal` is
/// at input resolution; refined lookups use each box's proposal fill ratio as its feature.
std::vector<double> resolve_box_rates(const std::vector<Box>& boxes, const LabelMap& proposal,
                                      const FillRateTable* table, const FrSelectionConfig& cfg);

/// Nearest-neighbour label downsampling, sampling the centre pixel of each stride x stride cell.
LabelMap downsample_labels(const LabelMap& labels, int stride);

/// Keeps the ceil(rate * area) highest class-c scores of each box as class c and ignores the rest
/// of the box. Boxes run smallest first and never relabel a pixel an earlier box kept. Equal
/// scores rank by raster order. All inputs are at feature resolution.
template <typename Scalar>
LabelMap fr_select(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& scores,
                   const std::vector<Box>& boxes, const LabelMap& proposal, std::span<const double> rates,
                   const FrSelectionConfig& cfg, std::vector<long>* selected_per_class = nullptr);

template <typename Scalar>
struct CrossEntropy {
    Scalar loss = 0;
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> grad;
    long counted = 0;
};

/// Mean over non-ignored pixels of -log softmax(S)[label].
template <typename Scalar>
CrossEntropy<Scalar> softmax_ce(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& scores,
                                const LabelMap& labels);

template <typename Scalar>
struct MaskLoss {
    Scalar loss = 0;
    Eigen::Matrix<Scalar, 1, Eigen::Dynamic> grad;
};

/// Sum over cells of (M - alpha)^2.
template <typename Scalar>
MaskLoss<Scalar> bcm_loss(const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>& alpha,
                          const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>& mask);

template <typename Scalar>
struct TotalLoss {
    LossBreakdown breakdown;
    LabelMap labels;  // labels the cross-entropy was computed against
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> d_scores;
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> d_alpha;
};

/// L_fr + lambda * sum of mask losses against fixed labels. `masks` may be null when the forward
/// pass ran without masking.
template <typename Scalar>
TotalLoss<Scalar> total_loss_for_labels(const Activations<Scalar>& act, const LabelMap& labels,
                                        const BoxMaskSet* masks, AttentionMode attention, double lambda);

/// Selection from the current scores followed by total_loss_for_labels. The selection is treated as
/// constant, so no gradient flows through the ranking.
template <typename Scalar>
TotalLoss<Scalar> total_loss(const Activations<Scalar>& act, const std::vector<Box>& feature_boxes,
                             const LabelMap& proposal, std::span<const double> rates, const BoxMaskSet* masks,
                             AttentionMode attention, double lambda, const FrSelectionConfig& cfg);

}  // namespace boxseg
