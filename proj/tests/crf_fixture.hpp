#pragma once

#include "boxseg/dataset.hpp"
#include "boxseg/proposals.hpp"

#include <random>

namespace boxseg::testing {

inline ProbMap<double> random_unary(int h, int w, int classes, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.05, 1.0);
    ProbMap<double> p{h, w, Eigen::MatrixXd(classes, h * w)};
    for (Eigen::Index i = 0; i < p.values.size(); ++i) p.values.data()[i] = u(rng);
    p.values.array().rowwise() /= p.values.colwise().sum().array();
    return p;
}

/// Dark disc inscribed in a bright 32x32 canvas with a single tight class-1 box.
inline ImageSample two_region_image() {
    ImageSample s;
    s.id = "two-region";
    s.height = s.width = 32;
    s.pixels = Planes<float>::Constant(1, 32 * 32, 0.8f);
    s.gt_labels = LabelMap::Zero(32, 32);
    const BinaryMask disc = rasterize_shape(ShapeKind::Disc, 20, 20);
    for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 20; ++x)
            if (disc(y, x)) {
                s.gt_labels(y + 6, x + 6) = 1;
                s.pixels(0, (y + 6) * 32 + x + 6) = 0.2f;
            }
    s.boxes = {Box{1, 6, 6, 26, 26, std::nullopt}};
    return s;
}

}  // namespace boxseg::testing
