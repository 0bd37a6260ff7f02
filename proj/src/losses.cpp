#include "boxseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace boxseg {

std::string to_string(FrMode mode) {
    switch (mode) {
        case FrMode::Off: return "off";
        case FrMode::ClassFr: return "class_fr";
        case FrMode::SubclassFr: return "subclass_fr";
        case FrMode::GlobalFr: return "global_fr";
    }
    return "unknown";
}

FrMode fr_mode_from_string(const std::string& name) {
    if (name == "off") return FrMode::Off;
    if (name == "class_fr") return FrMode::ClassFr;
    if (name == "subclass_fr") return FrMode::SubclassFr;
    if (name == "global_fr") return FrMode::GlobalFr;
    throw Error("unknown fr mode: " + name);
}

std::string to_string(RankingBase base) {
    return base == RankingBase::AllBoxPixels ? "all_box_pixels" : "proposal_foreground_pixels";
}

RankingBase ranking_base_from_string(const std::string& name) {
    if (name == "all_box_pixels") return RankingBase::AllBoxPixels;
    if (name == "proposal_foreground_pixels") return RankingBase::ProposalForeground;
    throw Error("unknown ranking base: " + name);
}

void FrSelectionConfig::validate() const {
    if (!(global_rate > 0.0 && global_rate <= 1.0)) throw Error("fr selection: global rate must lie in (0, 1]");
}

double LossBreakdown::bcm_sum() const { return std::accumulate(bcm.begin(), bcm.end(), 0.0); }

std::vector<double> resolve_box_rates(const std::vector<Box>& boxes, const LabelMap& proposal,
                                      const FillRateTable* table, const FrSelectionConfig& cfg) {
    cfg.validate();
    std::vector<double> rates(boxes.size(), 0.0);
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        switch (cfg.mode) {
            case FrMode::Off: break;
            case FrMode::GlobalFr: rates[i] = cfg.global_rate; break;
            case FrMode::ClassFr:
            case FrMode::SubclassFr:
                if (!table) throw Error("fill-rate selection needs a fill-rate table");
                rates[i] = fill_rate_for(make_fill_sample(boxes[i], proposal), *table, cfg.mode == FrMode::SubclassFr);
                break;
        }
    }
    return rates;
}

LabelMap downsample_labels(const LabelMap& labels, int stride) {
    if (stride < 1) throw Error("downsample_labels: stride must be positive");
    const Eigen::Index H = labels.rows(), W = labels.cols();
    const Eigen::Index h = (H + stride - 1) / stride, w = (W + stride - 1) / stride;
    LabelMap out(h, w);
    for (Eigen::Index y = 0; y < h; ++y)
        for (Eigen::Index x = 0; x < w; ++x)
            out(y, x) = labels(std::min(H - 1, y * stride + stride / 2), std::min(W - 1, x * stride + stride / 2));
    return out;
}

template <typename Scalar>
LabelMap fr_select(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& scores, const std::vector<Box>& boxes,
                   const LabelMap& proposal, std::span<const double> rates, const FrSelectionConfig& cfg,
                   std::vector<long>* selected_per_class) {
    cfg.validate();
    const int H = static_cast<int>(proposal.rows()), W = static_cast<int>(proposal.cols());
    if (scores.cols() != static_cast<Eigen::Index>(H) * W)
        throw Error("fr_select: score map and proposal resolutions differ");
    if (rates.size() != boxes.size()) throw Error("fr_select: one fill rate per box required");
    if (selected_per_class) selected_per_class->assign(static_cast<std::size_t>(scores.rows()), 0);
    if (cfg.mode == FrMode::Off) return proposal;

    for (const Box& b : boxes) {
        if (!b.inside_canvas(H, W)) throw Error("fr_select: box outside the score map: " + describe(b));
        if (b.class_id <= 0 || b.class_id >= scores.rows()) throw Error("fr_select: box class out of range: " + describe(b));
    }

    std::vector<std::size_t> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (boxes[a].area() != boxes[b].area()) return boxes[a].area() < boxes[b].area();
        return boxes[a].class_id < boxes[b].class_id;
    });

    LabelMap out = proposal;
    std::vector<bool> kept(static_cast<std::size_t>(H) * W, false);
    std::vector<int> candidates;
    for (std::size_t bi : order) {
        const Box& b = boxes[bi];
        const auto cls = static_cast<std::uint8_t>(b.class_id);
        candidates.clear();
        for (int y = b.y0; y < b.y1; ++y)
            for (int x = b.x0; x < b.x1; ++x) {
                const int p = y * W + x;
                if (kept[static_cast<std::size_t>(p)]) continue;
                out(y, x) = kIgnore;
                if (cfg.ranking_base == RankingBase::ProposalForeground && proposal(y, x) != cls) continue;
                candidates.push_back(p);
            }
        const double f = std::clamp(rates[bi], 0.0, 1.0);
        const long want = static_cast<long>(std::ceil(f * static_cast<double>(b.area()) - 1e-9));
        const auto take = static_cast<std::size_t>(std::clamp<long>(want, 0, static_cast<long>(candidates.size())));
        // candidates are in raster order, so a stable partial ordering keeps earlier pixels first on ties
        std::stable_sort(candidates.begin(), candidates.end(),
                         [&](int a, int c) { return scores(b.class_id, a) > scores(b.class_id, c); });
        for (std::size_t i = 0; i < take; ++i) {
            const int p = candidates[i];
            out(p / W, p % W) = cls;
            kept[static_cast<std::size_t>(p)] = true;
        }
        if (selected_per_class) (*selected_per_class)[cls] += static_cast<long>(take);
    }
    return out;
}

template <typename Scalar>
CrossEntropy<Scalar> softmax_ce(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& scores,
                                const LabelMap& labels) {
    if (scores.cols() != labels.size()) throw Error("softmax_ce: labels and scores differ in size");
    const Eigen::Index N = scores.rows();
    CrossEntropy<Scalar> r;
    r.grad = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Zero(N, scores.cols());
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> prob(N);
    Scalar sum = 0;
    for (Eigen::Index p = 0; p < scores.cols(); ++p) {
        const int l = labels.data()[p];
        if (l == kIgnore) continue;
        if (l >= N) throw Error("softmax_ce: label " + std::to_string(l) + " exceeds class count");
        const Scalar top = scores.col(p).maxCoeff();
        prob = (scores.col(p).array() - top).exp().matrix();
        const Scalar z = prob.sum();
        sum += std::log(z) - (scores(l, p) - top);
        r.grad.col(p) = prob / z;
        r.grad(l, p) -= Scalar(1);
        ++r.counted;
    }
    if (r.counted > 0) {
        r.loss = sum / static_cast<Scalar>(r.counted);
        r.grad /= static_cast<Scalar>(r.counted);
    }
    return r;
}

template <typename Scalar>
MaskLoss<Scalar> bcm_loss(const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>& alpha,
                          const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>& mask) {
    if (alpha.size() != mask.size()) throw Error("bcm_loss: attention map and mask differ in size");
    MaskLoss<Scalar> r;
    const auto diff = (alpha - mask).eval();
    r.loss = diff.squaredNorm();
    r.grad = Scalar(2) * diff;
    return r;
}

template <typename Scalar>
TotalLoss<Scalar> total_loss_for_labels(const Activations<Scalar>& act, const LabelMap& labels, const BoxMaskSet* masks,
                                        AttentionMode attention, double lambda) {
    TotalLoss<Scalar> out;
    out.labels = labels;
    const CrossEntropy<Scalar> ce = softmax_ce<Scalar>(act.scores, labels);
    out.d_scores = ce.grad;
    out.breakdown.fr_loss = static_cast<double>(ce.loss);
    out.breakdown.lambda = lambda;
    out.breakdown.selected.assign(static_cast<std::size_t>(act.scores.rows()), 0);
    for (Eigen::Index i = 0; i < labels.size(); ++i)
        if (labels.data()[i] != kIgnore) ++out.breakdown.selected[labels.data()[i]];

    if (act.masking) {
        if (!masks) throw Error("total_loss: masking enabled but no box masks supplied");
        if (masks->masks.cols() != act.alpha.cols()) throw Error("total_loss: mask and attention resolutions differ");
        out.d_alpha.resize(act.alpha.rows(), act.alpha.cols());
        for (Eigen::Index m = 0; m < act.alpha.rows(); ++m) {
            const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> target =
                attention == AttentionMode::ClassWise ? masks->masks.row(m).template cast<Scalar>().eval()
                                                      : masks->foreground_union().template cast<Scalar>().eval();
            const MaskLoss<Scalar> ml = bcm_loss<Scalar>(act.alpha.row(m), target);
            out.breakdown.bcm.push_back(static_cast<double>(ml.loss));
            out.d_alpha.row(m) = static_cast<Scalar>(lambda) * ml.grad;
        }
    }
    out.breakdown.total = out.breakdown.fr_loss + lambda * out.breakdown.bcm_sum();
    return out;
}

template <typename Scalar>
TotalLoss<Scalar> total_loss(const Activations<Scalar>& act, const std::vector<Box>& feature_boxes,
                             const LabelMap& proposal, std::span<const double> rates, const BoxMaskSet* masks,
                             AttentionMode attention, double lambda, const FrSelectionConfig& cfg) {
    if (proposal.rows() != act.feature_height || proposal.cols() != act.feature_width)
        throw Error("total_loss: proposal is not at feature resolution");
    const LabelMap labels = fr_select<Scalar>(act.scores, feature_boxes, proposal, rates, cfg);
    return total_loss_for_labels<Scalar>(act, labels, masks, attention, lambda);
}

#define BOXSEG_INSTANTIATE_LOSSES(S)                                                                              \
    template LabelMap fr_select<S>(const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>&, const std::vector<Box>&, \
                                   const LabelMap&, std::span<const double>, const FrSelectionConfig&,              \
                                   std::vector<long>*);                                                           \
    template CrossEntropy<S> softmax_ce<S>(const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>&, const LabelMap&); \
    template MaskLoss<S> bcm_loss<S>(const Eigen::Matrix<S, 1, Eigen::Dynamic>&,                                  \
                                     const Eigen::Matrix<S, 1, Eigen::Dynamic>&);                                 \
    template TotalLoss<S> total_loss_for_labels<S>(const Activations<S>&, const LabelMap&, const BoxMaskSet*,       \
                                                   AttentionMode, double);                                        \
    template TotalLoss<S> total_loss<S>(const Activations<S>&, const std::vector<Box>&, const LabelMap&,            \
                                        std::span<const double>, const BoxMaskSet*, AttentionMode, double,        \
                                        const FrSelectionConfig&);

BOXSEG_INSTANTIATE_LOSSES(float)
BOXSEG_INSTANTIATE_LOSSES(double)

}  // namespace boxseg
