#pragma once

#include "boxseg/common.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace boxseg {

/// Class-wise: one attention map per class branch. Global: one shared map gating every branch.
enum class AttentionMode { ClassWise, Global };

std::string to_string(AttentionMode mode);
AttentionMode attention_mode_from_string(const std::string& name);

struct ConvSpec {
    int out_channels = 0;
    int stride = 1;

    bool operator==(const ConvSpec&) const = default;
};

/// 3x3 convolution trunk with ReLU after every layer, sliced into `num_classes` branches of
/// `branch_width` channels, each with a 1x1 attention head and a 1x1 score head.
struct Architecture {
    int in_channels = 1;
    int num_classes = 4;  // including background
    int branch_width = 8;
    std::vector<ConvSpec> trunk;
    AttentionMode attention = AttentionMode::ClassWise;
    bool masking = true;

    /// 16 -> 32 -> 32 -> N*D channels, stride 2 on the first two layers.
    static Architecture standard(int in_channels, int num_classes, int branch_width = 8);

    int feature_channels() const { return num_classes * branch_width; }
    int feature_stride() const;
    int attention_maps() const { return attention == AttentionMode::ClassWise ? num_classes : 1; }
    void validate() const;

    bool operator==(const Architecture&) const = default;
};

template <typename Scalar>
struct Param {
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    std::string name;
    Matrix value;
    Matrix grad;
    Matrix velocity;
};

/// Parameter order: conv{i}.weight, conv{i}.bias for each trunk layer, then attention.weight,
/// attention.bias, score.weight, score.bias.
template <typename Scalar>
struct ModelState {
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

    Architecture arch;
    std::vector<Param<Scalar>> params;

    Param<Scalar>& conv_weight(std::size_t layer) { return params[2 * layer]; }
    Param<Scalar>& conv_bias(std::size_t layer) { return params[2 * layer + 1]; }
    const Param<Scalar>& conv_weight(std::size_t layer) const { return params[2 * layer]; }
    const Param<Scalar>& conv_bias(std::size_t layer) const { return params[2 * layer + 1]; }
    Param<Scalar>& attention_weight() { return params[2 * arch.trunk.size()]; }
    Param<Scalar>& attention_bias() { return params[2 * arch.trunk.size() + 1]; }
    Param<Scalar>& score_weight() { return params[2 * arch.trunk.size() + 2]; }
    Param<Scalar>& score_bias() { return params[2 * arch.trunk.size() + 3]; }
    const Param<Scalar>& attention_weight() const { return params[2 * arch.trunk.size()]; }
    const Param<Scalar>& attention_bias() const { return params[2 * arch.trunk.size() + 1]; }
    const Param<Scalar>& score_weight() const { return params[2 * arch.trunk.size() + 2]; }
    const Param<Scalar>& score_bias() const { return params[2 * arch.trunk.size() + 3]; }

    void zero_grad();
    long parameter_count() const;

    template <typename Other>
    ModelState<Other> cast() const {
        ModelState<Other> out;
        out.arch = arch;
        for (const auto& p : params)
            out.params.push_back({p.name, p.value.template cast<Other>(), p.grad.template cast<Other>(),
                                  p.velocity.template cast<Other>()});
        return out;
    }
};

template <typename Scalar>
struct ConvCache {
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    int in_channels = 0;
    int in_height = 0;
    int in_width = 0;
    int out_height = 0;
    int out_width = 0;
    int stride = 1;
    Matrix columns;  // (in_channels * 9) x (out_height * out_width)
    Matrix pre;      // out_channels x (out_height * out_width), before ReLU
};

/// Everything forward computes, kept for backward.
template <typename Scalar>
struct Activations {
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    int height = 0;
    int width = 0;
    int feature_height = 0;
    int feature_width = 0;
    bool masking = false;
    std::vector<ConvCache<Scalar>> layers;
    Matrix features;  // F: N*D x P, branch c occupies rows [c*D, (c+1)*D)
    Matrix alpha;     // attention maps, one row each; empty without masking
    Matrix masked;    // branch features after spatial masking; empty without masking
    Matrix scores;    // S: N x P

    bool empty() const { return layers.empty(); }
};

/// Box masks at feature resolution: row c is M_c, row 0 the complement of the foreground union.
struct BoxMaskSet {
    int height = 0;
    int width = 0;
    Planes<float> masks;

    Eigen::RowVectorXf foreground_union() const { return Eigen::RowVectorXf::Ones(masks.cols()) - masks.row(0); }
};

/// Cells whose stride x stride footprint intersects the box.
Box scale_box(const Box& box, int stride);
/// Box edges rounded to the nearest cell boundary, keeping at least one cell.
Box nearest_box(const Box& box, int stride);

BoxMaskSet downsample_box_masks(const std::vector<Box>& boxes, int num_classes, int height, int width, int stride);

/// He-normal weights, zero biases.
template <typename Scalar>
ModelState<Scalar> init_model(const Architecture& arch, std::uint64_t seed);

template <typename Scalar>
Activations<Scalar> forward(const ModelState<Scalar>& state, const Planes<Scalar>& image, int height, int width,
                            bool masking_enabled);

/// Accumulates parameter gradients given dL/dS and, with masking, dL/d(alpha) from the loss.
template <typename Scalar>
void backward(ModelState<Scalar>& state, const Activations<Scalar>& act,
              const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& d_scores,
              const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& d_alpha);

/// v <- momentum * v + g / batch_size; w <- w - lr * v; gradients cleared.
/// Throws before touching any weight if a gradient is not finite.
template <typename Scalar>
void sgd_step(ModelState<Scalar>& state, double lr, double momentum, int batch_size);

/// Argmax of the scores bilinearly upsampled to the input size, ties to the lowest class.
template <typename Scalar>
LabelMap predict_labels(const Activations<Scalar>& act);

template <typename Scalar>
struct LossGradient {
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    Scalar loss = 0;
    Matrix d_scores;
    Matrix d_alpha;
};

template <typename Scalar>
using LossFunction = std::function<LossGradient<Scalar>(const Activations<Scalar>&)>;

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::string worst_param;
    long worst_index = -1;
    long checked = 0;
};

/// Central differences over every parameter entry against the analytic gradient.
/// `corrupt`, when set, is applied to the analytic gradients before comparison.
GradCheckResult grad_check(ModelState<double>& state, const Planes<double>& image, int height, int width,
                           bool masking_enabled, const LossFunction<double>& loss_fn, double epsilon = 1e-3,
                           const std::function<void(ModelState<double>&)>& corrupt = {});

void save_checkpoint(const ModelState<float>& state, const std::filesystem::path& path);
ModelState<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace boxseg
