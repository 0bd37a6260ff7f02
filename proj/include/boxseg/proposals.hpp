#pragma once

#include "boxseg/common.hpp"
#include "boxseg/dataset.hpp"

#include <vector>

namespace boxseg {

/// Per-pixel class distribution: one row per class, one column per pixel.
template <typename Scalar>
struct ProbMap {
    int height = 0;
    int width = 0;
    Planes<Scalar> values;

    int classes() const { return static_cast<int>(values.rows()); }
    /// Largest |sum_l Q(l) - 1| over pixels.
    Scalar max_normalization_error() const {
        return values.cols() == 0 ? Scalar(0) : (values.colwise().sum().array() - Scalar(1)).abs().maxCoeff();
    }
};

/// Fully connected CRF with an appearance and a smoothness Gaussian kernel.
struct CrfParams {
    int iterations = 5;
    double w_appearance = 5.0;
    double theta_alpha = 20.0;  // pixels
    double theta_beta = 0.1;    // intensity units
    double w_smooth = 3.0;
    double theta_gamma = 3.0;   // pixels
    double p_fg = 0.7;

    void validate() const;
};

/// How pixels covered by several boxes are resolved.
enum class OverlapPolicy {
    SmallestArea,  // smallest box wins; ties to lower class id, then lower box index
    LastBox,       // later boxes overwrite earlier ones
};

LabelMap rasterize_box_labels(const std::vector<Box>& boxes, int height, int width,
                              OverlapPolicy policy = OverlapPolicy::SmallestArea);

/// Box pixels get p_fg on their class and the rest on background; background pixels get p_fg on
/// background and the rest spread over the foreground classes present.
template <typename Scalar>
ProbMap<Scalar> unary_from_boxes(const LabelMap& box_labels, double p_fg, int num_classes);

/// Parallel mean-field sweeps with Potts compatibility and exact O(n^2) pairwise sums.
template <typename Scalar>
ProbMap<Scalar> crf_refine(const Planes<Scalar>& image, const ProbMap<Scalar>& unary, const CrfParams& params);

/// Clamped argmax: background outside every box; inside, argmax over background and the classes of
/// the covering boxes, ties to the lowest id.
template <typename Scalar>
LabelMap probmap_to_labels(const ProbMap<Scalar>& q, const std::vector<Box>& boxes);

enum class ProposalMode { Box, Crf };

std::string to_string(ProposalMode mode);
ProposalMode proposal_mode_from_string(const std::string& name);

LabelMap make_proposal(const ImageSample& sample, ProposalMode mode, const CrfParams& params, int num_classes);

/// Copies of `samples` whose label maps are replaced by proposals.
std::vector<ImageSample> generate_proposals(const std::vector<ImageSample>& samples, ProposalMode mode,
                                            const CrfParams& params, int num_classes);

/// One more than the largest class id found in labels or boxes (at least 2).
int infer_num_classes(const std::vector<ImageSample>& samples);

/// Mislabeled pixels among those within Chebyshev distance `radius` of a ground-truth label change.
long boundary_label_error(const LabelMap& predicted, const LabelMap& truth, int radius = 1);

/// Symmetric mean distance between predicted and ground-truth boundary pixels.
double mean_boundary_displacement(const LabelMap& predicted, const LabelMap& truth);

}  // namespace boxseg
