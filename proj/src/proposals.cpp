#include "boxseg/proposals.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace boxseg {

void CrfParams::validate() const {
    if (iterations < 0) throw Error("crf params: iterations must be >= 0");
    if (w_appearance < 0 || w_smooth < 0) throw Error("crf params: kernel weights must be non-negative");
    if (theta_alpha <= 0 || theta_beta <= 0 || theta_gamma <= 0) throw Error("crf params: scales must be positive");
    if (!(p_fg > 0.5 && p_fg < 1.0)) throw Error("crf params: p_fg must lie in (0.5, 1)");
}

LabelMap rasterize_box_labels(const std::vector<Box>& boxes, int height, int width, OverlapPolicy policy) {
    for (const Box& b : boxes)
        if (!b.inside_canvas(height, width)) throw Error("box outside canvas: " + describe(b));

    std::vector<std::size_t> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    if (policy == OverlapPolicy::SmallestArea) {
        // Paint the winner last: largest area first, then higher class id, then higher index.
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            const Box& ba = boxes[a];
            const Box& bb = boxes[b];
            if (ba.area() != bb.area()) return ba.area() > bb.area();
            if (ba.class_id != bb.class_id) return ba.class_id > bb.class_id;
            return a > b;
        });
    }
    LabelMap out = LabelMap::Zero(height, width);
    for (std::size_t i : order) {
        const Box& b = boxes[i];
        out.block(b.y0, b.x0, b.height(), b.width()).setConstant(static_cast<std::uint8_t>(b.class_id));
    }
    return out;
}

template <typename Scalar>
ProbMap<Scalar> unary_from_boxes(const LabelMap& box_labels, double p_fg, int num_classes) {
    if (!(p_fg > 0.5 && p_fg < 1.0)) throw Error("unary_from_boxes: p_fg must lie in (0.5, 1)");
    const int H = static_cast<int>(box_labels.rows()), W = static_cast<int>(box_labels.cols());
    std::vector<bool> present(static_cast<std::size_t>(num_classes), false);
    for (Eigen::Index i = 0; i < box_labels.size(); ++i) {
        const int l = box_labels.data()[i];
        if (l >= num_classes) throw Error("unary_from_boxes: label exceeds class count");
        present[static_cast<std::size_t>(l)] = true;
    }
    const int fg_present = static_cast<int>(std::count(present.begin() + 1, present.end(), true));

    ProbMap<Scalar> q{H, W, Planes<Scalar>::Zero(num_classes, static_cast<Eigen::Index>(H) * W)};
    const Scalar hi = static_cast<Scalar>(p_fg), lo = static_cast<Scalar>(1.0 - p_fg);
    for (Eigen::Index i = 0; i < box_labels.size(); ++i) {
        const int l = box_labels.data()[i];
        if (l > 0) {
            q.values(l, i) = hi;
            q.values(0, i) = lo;
        } else if (fg_present == 0) {
            q.values(0, i) = Scalar(1);
        } else {
            q.values(0, i) = hi;
            const Scalar share = lo / static_cast<Scalar>(fg_present);
            for (int c = 1; c < num_classes; ++c)
                if (present[static_cast<std::size_t>(c)]) q.values(c, i) = share;
        }
    }
    return q;
}

template <typename Scalar>
ProbMap<Scalar> crf_refine(const Planes<Scalar>& image, const ProbMap<Scalar>& unary, const CrfParams& params) {
    params.validate();
    const Eigen::Index n = static_cast<Eigen::Index>(unary.height) * unary.width;
    if (image.cols() != n || unary.values.cols() != n)
        throw Error("crf_refine: image and unary dimensions differ");
    if (params.iterations == 0 || (params.w_appearance == 0 && params.w_smooth == 0)) return unary;

    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
    const int W = unary.width;
    const Scalar inv_a = Scalar(1) / Scalar(2 * params.theta_alpha * params.theta_alpha);
    const Scalar inv_b = Scalar(1) / Scalar(2 * params.theta_beta * params.theta_beta);
    const Scalar inv_g = Scalar(1) / Scalar(2 * params.theta_gamma * params.theta_gamma);
    const Scalar w1 = Scalar(params.w_appearance), w2 = Scalar(params.w_smooth);

    // Strictly lower triangle of the symmetric kernel; column i holds k(i, j) for j > i.
    thread_local Matrix kernel;
    kernel.resize(n, n);
    kernel.diagonal().setZero();
    Array pos2(n), color2(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index m = n - i - 1;
        if (m == 0) break;
        const Scalar xi = Scalar(i % W), yi = Scalar(i / W);
        for (Eigen::Index t = 0; t < m; ++t) {
            const Eigen::Index j = i + 1 + t;
            const Scalar dx = Scalar(j % W) - xi, dy = Scalar(j / W) - yi;
            pos2(t) = dx * dx + dy * dy;
        }
        color2.head(m) = (image.rightCols(m).colwise() - image.col(i)).colwise().squaredNorm().transpose().array();
        const Array k = w1 * (-pos2.head(m) * inv_a - color2.head(m) * inv_b).exp() + w2 * (-pos2.head(m) * inv_g).exp();
        kernel.col(i).tail(m) = k.matrix();
    }
    const auto sym = kernel.template selfadjointView<Eigen::Lower>();

    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> total = (sym * Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Ones(n)).transpose();
    ProbMap<Scalar> q = unary;
    Matrix message(unary.values.rows(), n);
    for (int it = 0; it < params.iterations; ++it) {
        // Potts: sum_j k_ij sum_{l' != l} Q_j(l') = total_i - sum_j k_ij Q_j(l).
        message.noalias() = (sym * q.values.transpose()).transpose();
        message.rowwise() -= total;
        for (Eigen::Index i = 0; i < n; ++i) {
            Scalar best = -std::numeric_limits<Scalar>::infinity();
            for (Eigen::Index l = 0; l < message.rows(); ++l)
                if (unary.values(l, i) > 0) best = std::max(best, message(l, i));
            Scalar sum = 0;
            for (Eigen::Index l = 0; l < message.rows(); ++l) {
                const Scalar v = unary.values(l, i) > 0 ? unary.values(l, i) * std::exp(message(l, i) - best) : Scalar(0);
                q.values(l, i) = v;
                sum += v;
            }
            q.values.col(i) /= sum;
        }
    }
    return q;
}

template <typename Scalar>
LabelMap probmap_to_labels(const ProbMap<Scalar>& q, const std::vector<Box>& boxes) {
    const int H = q.height, W = q.width, N = q.classes();
    for (const Box& b : boxes) {
        if (!b.inside_canvas(H, W)) throw Error("box outside canvas: " + describe(b));
        if (b.class_id <= 0 || b.class_id >= N) throw Error("box class outside probability map: " + describe(b));
    }
    LabelMap out = LabelMap::Zero(H, W);
    std::vector<bool> allowed(static_cast<std::size_t>(N));
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            std::fill(allowed.begin(), allowed.end(), false);
            bool covered = false;
            for (const Box& b : boxes)
                if (b.contains(x, y)) {
                    allowed[static_cast<std::size_t>(b.class_id)] = true;
                    covered = true;
                }
            if (!covered) continue;
            const Eigen::Index i = static_cast<Eigen::Index>(y) * W + x;
            int best = 0;
            for (int c = 1; c < N; ++c)
                if (allowed[static_cast<std::size_t>(c)] && q.values(c, i) > q.values(best, i)) best = c;
            out(y, x) = static_cast<std::uint8_t>(best);
        }
    return out;
}

std::string to_string(ProposalMode mode) { return mode == ProposalMode::Box ? "box" : "crf"; }

ProposalMode proposal_mode_from_string(const std::string& name) {
    if (name == "box") return ProposalMode::Box;
    if (name == "crf") return ProposalMode::Crf;
    throw Error("unknown proposal mode: " + name);
}

LabelMap make_proposal(const ImageSample& sample, ProposalMode mode, const CrfParams& params, int num_classes) {
    const LabelMap box_labels = rasterize_box_labels(sample.boxes, sample.height, sample.width);
    if (mode == ProposalMode::Box) return box_labels;
    const auto unary = unary_from_boxes<float>(box_labels, params.p_fg, num_classes);
    const auto refined = crf_refine<float>(sample.pixels, unary, params);
    return probmap_to_labels(refined, sample.boxes);
}

std::vector<ImageSample> generate_proposals(const std::vector<ImageSample>& samples, ProposalMode mode,
                                            const CrfParams& params, int num_classes) {
    std::vector<ImageSample> out = samples;
    for (ImageSample& s : out) s.gt_labels = make_proposal(s, mode, params, num_classes);
    return out;
}

int infer_num_classes(const std::vector<ImageSample>& samples) {
    int top = 1;
    for (const ImageSample& s : samples) {
        for (Eigen::Index i = 0; i < s.gt_labels.size(); ++i)
            if (s.gt_labels.data()[i] != kIgnore) top = std::max<int>(top, s.gt_labels.data()[i]);
        for (const Box& b : s.boxes) top = std::max(top, b.class_id);
    }
    return top + 1;
}

namespace {

BinaryMask boundary_pixels(const LabelMap& labels) {
    const Eigen::Index H = labels.rows(), W = labels.cols();
    BinaryMask b = BinaryMask::Constant(H, W, false);
    for (Eigen::Index y = 0; y < H; ++y)
        for (Eigen::Index x = 0; x < W; ++x) {
            const auto l = labels(y, x);
            b(y, x) = (x > 0 && labels(y, x - 1) != l) || (x + 1 < W && labels(y, x + 1) != l) ||
                      (y > 0 && labels(y - 1, x) != l) || (y + 1 < H && labels(y + 1, x) != l);
        }
    return b;
}

double directed_mean_distance(const BinaryMask& from, const BinaryMask& to) {
    std::vector<std::pair<int, int>> targets;
    for (Eigen::Index y = 0; y < to.rows(); ++y)
        for (Eigen::Index x = 0; x < to.cols(); ++x)
            if (to(y, x)) targets.emplace_back(static_cast<int>(x), static_cast<int>(y));
    const double diagonal = std::hypot(static_cast<double>(to.rows()), static_cast<double>(to.cols()));
    double total = 0;
    long count = 0;
    for (Eigen::Index y = 0; y < from.rows(); ++y)
        for (Eigen::Index x = 0; x < from.cols(); ++x) {
            if (!from(y, x)) continue;
            double best = diagonal;
            for (const auto& [tx, ty] : targets) best = std::min(best, std::hypot(double(tx - x), double(ty - y)));
            total += best;
            ++count;
        }
    return count == 0 ? 0.0 : total / static_cast<double>(count);
}

}  // namespace

long boundary_label_error(const LabelMap& predicted, const LabelMap& truth, int radius) {
    if (predicted.rows() != truth.rows() || predicted.cols() != truth.cols())
        throw Error("boundary_label_error: dimension mismatch");
    const BinaryMask edge = boundary_pixels(truth);
    const Eigen::Index H = truth.rows(), W = truth.cols();
    long errors = 0;
    for (Eigen::Index y = 0; y < H; ++y)
        for (Eigen::Index x = 0; x < W; ++x) {
            if (predicted(y, x) == truth(y, x)) continue;
            bool near = false;
            for (Eigen::Index dy = -radius; dy <= radius && !near; ++dy)
                for (Eigen::Index dx = -radius; dx <= radius; ++dx) {
                    const Eigen::Index yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < H && xx >= 0 && xx < W && edge(yy, xx)) {
                        near = true;
                        break;
                    }
                }
            if (near) ++errors;
        }
    return errors;
}

double mean_boundary_displacement(const LabelMap& predicted, const LabelMap& truth) {
    if (predicted.rows() != truth.rows() || predicted.cols() != truth.cols())
        throw Error("mean_boundary_displacement: dimension mismatch");
    const BinaryMask p = boundary_pixels(predicted), t = boundary_pixels(truth);
    if (!p.any() && !t.any()) return 0.0;
    return 0.5 * (directed_mean_distance(p, t) + directed_mean_distance(t, p));
}

template ProbMap<float> unary_from_boxes<float>(const LabelMap&, double, int);
template ProbMap<double> unary_from_boxes<double>(const LabelMap&, double, int);
template ProbMap<float> crf_refine<float>(const Planes<float>&, const ProbMap<float>&, const CrfParams&);
template ProbMap<double> crf_refine<double>(const Planes<double>&, const ProbMap<double>&, const CrfParams&);
template LabelMap probmap_to_labels<float>(const ProbMap<float>&, const std::vector<Box>&);
template LabelMap probmap_to_labels<double>(const ProbMap<double>&, const std::vector<Box>&);

}  // namespace boxseg
