#pragma once

#include "boxseg/fcn.hpp"
#include "boxseg/losses.hpp"

#include <random>
#include <vector>

namespace boxseg::testing {

/// 8x8 two-channel instance with two foreground boxes, small enough for exhaustive differencing.
struct GradCheckFixture {
    static constexpr int kSize = 8;

    Architecture arch;
    ModelState<double> state;
    Planes<double> image;
    std::vector<Box> boxes;
    std::vector<Box> feature_boxes;
    BoxMaskSet masks;
    LabelMap proposal;
    std::vector<double> rates;
    FrSelectionConfig selection;
    double lambda = 0.5;

    explicit GradCheckFixture(std::uint64_t seed = 3, AttentionMode attention = AttentionMode::ClassWise) {
        arch.in_channels = 2;
        arch.num_classes = 3;
        arch.branch_width = 2;
        arch.trunk = {{4, 2}, {6, 1}};
        arch.attention = attention;
        state = init_model<double>(arch, seed);
        // nonzero biases so the bias gradients are not trivially aligned with the weights
        std::mt19937_64 rng(seed + 100);
        std::normal_distribution<double> normal(0.0, 0.1);
        for (auto& p : state.params)
            if (p.value.cols() == 1)
                for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = normal(rng);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        image = Planes<double>::NullaryExpr(2, kSize * kSize, [&] { return u(rng); });

        boxes = {Box{1, 0, 0, 4, 6, std::nullopt}, Box{2, 3, 4, 8, 8, std::nullopt}};
        const int stride = arch.feature_stride();
        for (const Box& b : boxes) feature_boxes.push_back(nearest_box(b, stride));
        masks = downsample_box_masks(boxes, arch.num_classes, kSize, kSize, stride);
        LabelMap full = LabelMap::Zero(kSize, kSize);
        for (const Box& b : boxes) full.block(b.y0, b.x0, b.height(), b.width()) = static_cast<std::uint8_t>(b.class_id);
        proposal = downsample_labels(full, stride);
        rates = {0.6, 0.5};
        selection.mode = FrMode::ClassFr;
    }

    /// Cross-entropy on the selected labels plus the weighted mask losses.
    LossFunction<double> full_loss() const {
        return [this](const Activations<double>& act) {
            const TotalLoss<double> t =
                total_loss<double>(act, feature_boxes, proposal, rates, &masks, arch.attention, lambda, selection);
            return LossGradient<double>{t.breakdown.total, t.d_scores, t.d_alpha};
        };
    }

    /// Sum of every score entry.
    static LossFunction<double> linear_loss() {
        return [](const Activations<double>& act) {
            LossGradient<double> g;
            g.loss = act.scores.sum();
            g.d_scores = Eigen::MatrixXd::Ones(act.scores.rows(), act.scores.cols());
            return g;
        };
    }
};

/// Flips the sign of one seeded, non-negligible gradient entry.
inline std::function<void(ModelState<double>&)> sign_flip_mutation(std::uint64_t seed) {
    return [seed](ModelState<double>& s) {
        std::vector<std::pair<std::size_t, Eigen::Index>> live;
        for (std::size_t p = 0; p < s.params.size(); ++p)
            for (Eigen::Index i = 0; i < s.params[p].grad.size(); ++i)
                if (std::abs(s.params[p].grad.data()[i]) > 1e-4) live.emplace_back(p, i);
        if (live.empty()) return;
        std::mt19937_64 rng(seed);
        const auto [p, i] = live[std::uniform_int_distribution<std::size_t>(0, live.size() - 1)(rng)];
        s.params[p].grad.data()[i] = -s.params[p].grad.data()[i];
    };
}

}  // namespace boxseg::testing
