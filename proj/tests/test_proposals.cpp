#include "boxseg/proposals.hpp"
#include "crf_fixture.hpp"
#include "helpers.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace boxseg;
using testing::random_unary;
using testing::two_region_image;

namespace {

using MatrixXd = Eigen::MatrixXd;

/// Straight-line mean field: every pair visited explicitly, Potts messages summed label by label.
MatrixXd crf_oracle(const MatrixXd& image, const MatrixXd& unary, int W, const CrfParams& p) {
    const Eigen::Index n = unary.cols(), L = unary.rows();
    MatrixXd q = unary;
    for (int t = 0; t < p.iterations; ++t) {
        MatrixXd next(L, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            std::vector<double> energy(static_cast<std::size_t>(L), 0.0);
            for (Eigen::Index j = 0; j < n; ++j) {
                if (j == i) continue;
                const double dx = double(i % W) - double(j % W), dy = double(i / W) - double(j / W);
                const double d2 = dx * dx + dy * dy;
                const double c2 = (image.col(i) - image.col(j)).squaredNorm();
                const double k = p.w_appearance * std::exp(-d2 / (2 * p.theta_alpha * p.theta_alpha) -
                                                           c2 / (2 * p.theta_beta * p.theta_beta)) +
                                 p.w_smooth * std::exp(-d2 / (2 * p.theta_gamma * p.theta_gamma));
                for (Eigen::Index l = 0; l < L; ++l)
                    for (Eigen::Index m = 0; m < L; ++m)
                        if (m != l) energy[l] -= k * q(m, j);
            }
            double z = 0;
            for (Eigen::Index l = 0; l < L; ++l) {
                next(l, i) = unary(l, i) * std::exp(energy[l]);
                z += next(l, i);
            }
            next.col(i) /= z;
        }
        q = next;
    }
    return q;
}

}  // namespace

TEST_SUITE("proposals") {

TEST_CASE("box rasterization") {
    CHECK((rasterize_box_labels({}, 8, 8) == 0).all());

    const LabelMap one = rasterize_box_labels({Box{2, 1, 1, 11, 11, std::nullopt}}, 16, 16);
    CHECK((one == 2).cast<int>().sum() == 100);
    CHECK((one == 0).cast<int>().sum() == 256 - 100);

    // small class-1 box nested inside a large class-2 box
    const std::vector<Box> nested{Box{2, 0, 0, 10, 10, std::nullopt}, Box{1, 3, 3, 6, 6, std::nullopt}};
    LabelMap expected = LabelMap::Zero(12, 12);
    expected.block(0, 0, 10, 10).setConstant(2);
    expected.block(3, 3, 3, 3).setConstant(1);
    CHECK((rasterize_box_labels(nested, 12, 12) == expected).all());
    CHECK((rasterize_box_labels(nested, 12, 12, OverlapPolicy::LastBox) == expected).all());
    const std::vector<Box> reversed{nested[1], nested[0]};
    CHECK((rasterize_box_labels(reversed, 12, 12) == expected).all());
    CHECK((rasterize_box_labels(reversed, 12, 12, OverlapPolicy::LastBox).block(0, 0, 10, 10) == 2).all());

    // equal areas fall back to the lower class id
    const std::vector<Box> tie{Box{3, 0, 0, 4, 4, std::nullopt}, Box{1, 2, 2, 6, 6, std::nullopt}};
    CHECK(rasterize_box_labels(tie, 8, 8)(3, 3) == 1);

    try {
        rasterize_box_labels({Box{1, 4, 4, 20, 6, std::nullopt}}, 8, 8);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("x1=20") != std::string::npos);
    }
}

TEST_CASE("unary construction") {
    LabelMap labels = LabelMap::Zero(2, 2);
    labels(0, 0) = 1;
    labels(0, 1) = 2;
    const auto u = unary_from_boxes<double>(labels, 0.9, 4);
    CHECK(u.values(0, 0) == doctest::Approx(0.1));
    CHECK(u.values(1, 0) == doctest::Approx(0.9));
    CHECK(u.values(2, 0) == 0.0);
    CHECK(u.values(3, 0) == 0.0);
    // background pixel with two foreground classes present
    CHECK(u.values(0, 2) == doctest::Approx(0.9));
    CHECK(u.values(1, 2) == doctest::Approx(0.05));
    CHECK(u.values(2, 2) == doctest::Approx(0.05));
    CHECK(u.values(3, 2) == 0.0);
    CHECK(u.max_normalization_error() <= 1e-12);

    const auto empty = unary_from_boxes<double>(LabelMap::Zero(2, 2), 0.9, 3);
    CHECK((empty.values.row(0).array() == 1.0).all());
    CHECK_THROWS_AS(unary_from_boxes<double>(labels, 0.4, 4), Error);
}

TEST_CASE("crf matches the straight-line oracle") {
    std::mt19937_64 rng(11);
    const int H = 8, W = 8;
    MatrixXd image = MatrixXd::NullaryExpr(1, H * W, [&] { return std::uniform_real_distribution<double>(0, 1)(rng); });
    const auto unary = random_unary(H, W, 3, rng);
    CrfParams p;
    p.theta_alpha = 4.0;
    p.theta_beta = 0.3;
    p.w_appearance = 1.5;
    p.w_smooth = 0.7;
    p.theta_gamma = 1.5;
    for (int t : {1, 3}) {
        p.iterations = t;
        const auto q = crf_refine<double>(image, unary, p);
        CHECK((q.values - crf_oracle(image, unary.values, W, p)).cwiseAbs().maxCoeff() <= 1e-6);
    }
}

TEST_CASE("crf identities and normalization") {
    std::mt19937_64 rng(5);
    const int H = 10, W = 12;
    MatrixXd image = MatrixXd::NullaryExpr(3, H * W, [&] { return std::uniform_real_distribution<double>(0, 1)(rng); });
    const auto unary = random_unary(H, W, 4, rng);

    CrfParams zero;
    zero.w_appearance = 0;
    zero.w_smooth = 0;
    CHECK(crf_refine<double>(image, unary, zero).values == unary.values);
    CrfParams none;
    none.iterations = 0;
    CHECK(crf_refine<double>(image, unary, none).values == unary.values);

    for (int t = 1; t <= 5; ++t) {
        CrfParams p;
        p.iterations = t;
        CHECK(crf_refine<double>(image, unary, p).max_normalization_error() <= 1e-6);
    }

    CHECK_THROWS_AS(crf_refine<double>(MatrixXd::Zero(1, 5), unary, CrfParams{}), Error);
}

TEST_CASE("crf is equivariant under foreground relabeling") {
    std::mt19937_64 rng(9);
    const int H = 8, W = 9;
    MatrixXd image = MatrixXd::NullaryExpr(1, H * W, [&] { return std::uniform_real_distribution<double>(0, 1)(rng); });
    const auto unary = random_unary(H, W, 4, rng);
    const std::vector<int> perm{0, 3, 1, 2};
    ProbMap<double> permuted = unary;
    for (int l = 0; l < 4; ++l) permuted.values.row(perm[l]) = unary.values.row(l);
    const auto a = crf_refine<double>(image, unary, CrfParams{});
    const auto b = crf_refine<double>(image, permuted, CrfParams{});
    for (int l = 0; l < 4; ++l) CHECK((b.values.row(perm[l]) - a.values.row(l)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("smoothing erodes an isolated speckle") {
    const int H = 9, W = 9;
    ProbMap<double> unary{H, W, MatrixXd(2, H * W)};
    unary.values.row(0).setConstant(0.9);
    unary.values.row(1).setConstant(0.1);
    const int centre = 4 * W + 4;
    unary.values(0, centre) = 0.4;
    unary.values(1, centre) = 0.6;
    CrfParams p;
    p.w_appearance = 0;
    const auto q = crf_refine<double>(MatrixXd::Constant(1, H * W, 0.5), unary, p);
    const std::vector<Box> boxes{Box{1, 4, 4, 5, 5, std::nullopt}};
    CHECK(probmap_to_labels(unary, boxes)(4, 4) == 1);
    CHECK(probmap_to_labels(q, boxes)(4, 4) == 0);
}

TEST_CASE("clamped argmax") {
    ProbMap<double> uniform{4, 4, MatrixXd::Constant(3, 16, 1.0 / 3)};
    const std::vector<Box> box{Box{1, 1, 1, 3, 3, std::nullopt}};
    CHECK((probmap_to_labels(uniform, box) == 0).all());

    std::mt19937_64 rng(3);
    const LabelMap truth = testing::random_labels(4, 4, 3, rng);
    ProbMap<double> onehot{4, 4, MatrixXd::Zero(3, 16)};
    for (int i = 0; i < 16; ++i) onehot.values(truth.data()[i], i) = 1.0;
    std::vector<Box> everywhere{Box{1, 0, 0, 4, 4, std::nullopt}, Box{2, 0, 0, 4, 4, std::nullopt}};
    CHECK((probmap_to_labels(onehot, everywhere) == truth).all());

    ProbMap<double> peaked{4, 4, MatrixXd::Zero(3, 16)};
    peaked.values.row(2).setOnes();
    const LabelMap clamped = probmap_to_labels(peaked, box);
    CHECK(clamped(0, 0) == 0);
    CHECK(clamped(1, 1) == 0);  // class 2 is not a covering box class
    for (int i = 0; i < 16; ++i) CHECK(clamped.data()[i] != 2);
}

TEST_CASE("crf proposals beat box proposals on the two-region image") {
    const ImageSample s = two_region_image();
    const LabelMap box = make_proposal(s, ProposalMode::Box, CrfParams{}, 2);
    const LabelMap crf = make_proposal(s, ProposalMode::Crf, CrfParams{}, 2);
    CHECK(boundary_label_error(crf, s.gt_labels) < boundary_label_error(box, s.gt_labels));
    CHECK(mean_boundary_displacement(crf, s.gt_labels) < mean_boundary_displacement(box, s.gt_labels));
}

TEST_CASE("crf proposals never leave their boxes") {
    SynthConfig cfg;
    cfg.samples = 6;
    for (const ImageSample& s : generate_synthetic(cfg)) {
        const LabelMap crf = make_proposal(s, ProposalMode::Crf, CrfParams{}, 4);
        const LabelMap box = make_proposal(s, ProposalMode::Box, CrfParams{}, 4);
        for (Eigen::Index i = 0; i < crf.size(); ++i) {
            const int y = static_cast<int>(i / 64), x = static_cast<int>(i % 64);
            if (crf.data()[i] == 0) continue;
            bool covered = false;
            for (const Box& b : s.boxes) covered |= b.class_id == crf.data()[i] && b.contains(x, y);
            CHECK(covered);
        }
        CHECK((box == rasterize_box_labels(s.boxes, 64, 64)).all());
    }
}

TEST_CASE("boundary metrics") {
    LabelMap truth = LabelMap::Zero(6, 6);
    truth.block(0, 3, 6, 3).setConstant(1);
    CHECK(boundary_label_error(truth, truth) == 0);
    CHECK(mean_boundary_displacement(truth, truth) == 0.0);
    LabelMap shifted = LabelMap::Zero(6, 6);
    shifted.block(0, 4, 6, 2).setConstant(1);
    CHECK(boundary_label_error(shifted, truth) == 6);
    // boundaries are marked on both sides of a label change
    CHECK(mean_boundary_displacement(shifted, truth) == doctest::Approx(0.5));
    CHECK(mean_boundary_displacement(LabelMap::Zero(6, 6), LabelMap::Zero(6, 6)) == 0.0);
}

TEST_CASE("mode names") {
    CHECK(proposal_mode_from_string(to_string(ProposalMode::Box)) == ProposalMode::Box);
    CHECK(proposal_mode_from_string(to_string(ProposalMode::Crf)) == ProposalMode::Crf);
    CHECK_THROWS_AS(proposal_mode_from_string("grabcut"), Error);
}

}
