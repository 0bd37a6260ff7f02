#include "boxseg/fcn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <random>
#include <sstream>

namespace boxseg {

namespace {
constexpr const char* kCheckpointMagic = "boxseg-checkpoint";
constexpr int kCheckpointVersion = 1;
}  // namespace

std::string to_string(AttentionMode mode) { return mode == AttentionMode::ClassWise ? "classwise" : "global"; }

AttentionMode attention_mode_from_string(const std::string& name) {
    if (name == "classwise") return AttentionMode::ClassWise;
    if (name == "global") return AttentionMode::Global;
    throw Error("unknown attention mode: " + name);
}

Architecture Architecture::standard(int in_channels, int num_classes, int branch_width) {
    Architecture a;
    a.in_channels = in_channels;
    a.num_classes = num_classes;
    a.branch_width = branch_width;
    a.trunk = {{16, 2}, {32, 2}, {32, 1}, {num_classes * branch_width, 1}};
    return a;
}

int Architecture::feature_stride() const {
    int s = 1;
    for (const ConvSpec& c : trunk) s *= c.stride;
    return s;
}

void Architecture::validate() const {
    if (in_channels < 1) throw Error("architecture: in_channels must be positive");
    if (num_classes < 2) throw Error("architecture: need at least two classes");
    if (branch_width < 1) throw Error("architecture: branch_width must be positive");
    if (trunk.empty()) throw Error("architecture: empty trunk");
    for (const ConvSpec& c : trunk) {
        if (c.out_channels < 1) throw Error("architecture: conv layer without channels");
        if (c.stride < 1 || (c.stride & (c.stride - 1)) != 0) throw Error("architecture: strides must be powers of 2");
    }
    if (trunk.back().out_channels != feature_channels())
        throw Error("architecture: last trunk layer must produce num_classes * branch_width channels");
}

template <typename Scalar>
void ModelState<Scalar>::zero_grad() {
    for (auto& p : params) p.grad.setZero();
}

template <typename Scalar>
long ModelState<Scalar>::parameter_count() const {
    long n = 0;
    for (const auto& p : params) n += static_cast<long>(p.value.size());
    return n;
}

Box scale_box(const Box& box, int stride) {
    Box b = box;
    b.x0 = box.x0 / stride;
    b.y0 = box.y0 / stride;
    b.x1 = (box.x1 + stride - 1) / stride;
    b.y1 = (box.y1 + stride - 1) / stride;
    return b;
}

Box nearest_box(const Box& box, int stride) {
    const auto round = [stride](int v) { return (v + stride / 2) / stride; };
    Box b = box;
    b.x0 = std::min(round(box.x0), (box.x1 - 1) / stride);
    b.y0 = std::min(round(box.y0), (box.y1 - 1) / stride);
    b.x1 = std::max(b.x0 + 1, round(box.x1));
    b.y1 = std::max(b.y0 + 1, round(box.y1));
    return b;
}

BoxMaskSet downsample_box_masks(const std::vector<Box>& boxes, int num_classes, int height, int width, int stride) {
    if (stride < 1 || height % stride != 0 || width % stride != 0)
        throw Error("downsample_box_masks: stride " + std::to_string(stride) + " does not divide " +
                    std::to_string(height) + "x" + std::to_string(width));
    BoxMaskSet m;
    m.height = height / stride;
    m.width = width / stride;
    m.masks = Planes<float>::Zero(num_classes, static_cast<Eigen::Index>(m.height) * m.width);
    for (const Box& box : boxes) {
        if (!box.inside_canvas(height, width)) throw Error("box outside canvas: " + describe(box));
        if (box.class_id <= 0 || box.class_id >= num_classes) throw Error("box class out of range: " + describe(box));
        const Box f = scale_box(box, stride);
        for (int y = f.y0; y < f.y1; ++y)
            for (int x = f.x0; x < f.x1; ++x) m.masks(box.class_id, static_cast<Eigen::Index>(y) * m.width + x) = 1.0f;
    }
    if (num_classes > 1) m.masks.row(0) = Eigen::RowVectorXf::Ones(m.masks.cols()) - m.masks.bottomRows(num_classes - 1).colwise().maxCoeff();
    return m;
}

template <typename Scalar>
ModelState<Scalar> init_model(const Architecture& arch, std::uint64_t seed) {
    arch.validate();
    std::mt19937_64 rng(seed);
    using Matrix = typename ModelState<Scalar>::Matrix;
    ModelState<Scalar> s;
    s.arch = arch;
    auto add = [&](std::string name, Eigen::Index rows, Eigen::Index cols, int fan_in) {
        Matrix w(rows, cols);
        if (fan_in > 0) {
            std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
            for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(normal(rng));
        } else {
            w.setZero();
        }
        s.params.push_back({std::move(name), w, Matrix::Zero(rows, cols), Matrix::Zero(rows, cols)});
    };
    int in = arch.in_channels;
    for (std::size_t i = 0; i < arch.trunk.size(); ++i) {
        const int out = arch.trunk[i].out_channels;
        add("conv" + std::to_string(i) + ".weight", out, in * 9, in * 9);
        add("conv" + std::to_string(i) + ".bias", out, 1, 0);
        in = out;
    }
    const int N = arch.num_classes, D = arch.branch_width;
    if (arch.attention == AttentionMode::ClassWise) {
        add("attention.weight", N, D, D);
        add("attention.bias", N, 1, 0);
    } else {
        add("attention.weight", 1, N * D, N * D);
        add("attention.bias", 1, 1, 0);
    }
    add("score.weight", N, D, D);
    add("score.bias", N, 1, 0);
    return s;
}

namespace {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
void im2col(const Mat<Scalar>& in, ConvCache<Scalar>& cache) {
    const int C = cache.in_channels, H = cache.in_height, W = cache.in_width;
    const int Ho = cache.out_height, Wo = cache.out_width, s = cache.stride;
    cache.columns.setZero(static_cast<Eigen::Index>(C) * 9, static_cast<Eigen::Index>(Ho) * Wo);
    for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
            Scalar* col = cache.columns.col(static_cast<Eigen::Index>(oy) * Wo + ox).data();
            for (int ky = 0; ky < 3; ++ky) {
                const int iy = oy * s + ky - 1;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int ix = ox * s + kx - 1;
                    if (ix < 0 || ix >= W) continue;
                    const Scalar* px = in.col(static_cast<Eigen::Index>(iy) * W + ix).data();
                    for (int c = 0; c < C; ++c) col[c * 9 + ky * 3 + kx] = px[c];
                }
            }
        }
}

template <typename Scalar>
Mat<Scalar> col2im(const Mat<Scalar>& columns, const ConvCache<Scalar>& cache) {
    const int C = cache.in_channels, H = cache.in_height, W = cache.in_width;
    const int Ho = cache.out_height, Wo = cache.out_width, s = cache.stride;
    Mat<Scalar> out = Mat<Scalar>::Zero(C, static_cast<Eigen::Index>(H) * W);
    for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
            const Scalar* col = columns.col(static_cast<Eigen::Index>(oy) * Wo + ox).data();
            for (int ky = 0; ky < 3; ++ky) {
                const int iy = oy * s + ky - 1;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int ix = ox * s + kx - 1;
                    if (ix < 0 || ix >= W) continue;
                    Scalar* px = out.col(static_cast<Eigen::Index>(iy) * W + ix).data();
                    for (int c = 0; c < C; ++c) px[c] += col[c * 9 + ky * 3 + kx];
                }
            }
        }
    return out;
}

template <typename Scalar>
Mat<Scalar> sigmoid(const Mat<Scalar>& z) {
    return (Scalar(1) / (Scalar(1) + (-z.array()).exp())).matrix();
}

}  // namespace

template <typename Scalar>
Activations<Scalar> forward(const ModelState<Scalar>& state, const Planes<Scalar>& image, int height, int width,
                            bool masking_enabled) {
    const Architecture& arch = state.arch;
    if (image.rows() != arch.in_channels) throw Error("forward: image channels do not match the architecture");
    if (image.cols() != static_cast<Eigen::Index>(height) * width) throw Error("forward: image size mismatch");

    Activations<Scalar> act;
    act.height = height;
    act.width = width;
    act.masking = masking_enabled;
    Mat<Scalar> x = image;
    int h = height, w = width, c = arch.in_channels;
    for (std::size_t i = 0; i < arch.trunk.size(); ++i) {
        ConvCache<Scalar> cache;
        cache.in_channels = c;
        cache.in_height = h;
        cache.in_width = w;
        cache.stride = arch.trunk[i].stride;
        cache.out_height = (h - 1) / cache.stride + 1;
        cache.out_width = (w - 1) / cache.stride + 1;
        im2col(x, cache);
        cache.pre.noalias() = state.conv_weight(i).value * cache.columns;
        cache.pre.colwise() += state.conv_bias(i).value.col(0);
        x = cache.pre.cwiseMax(Scalar(0));
        h = cache.out_height;
        w = cache.out_width;
        c = arch.trunk[i].out_channels;
        act.layers.push_back(std::move(cache));
    }
    act.feature_height = h;
    act.feature_width = w;
    act.features = std::move(x);

    const int N = arch.num_classes, D = arch.branch_width;
    const Eigen::Index P = act.features.cols();
    const auto& aw = state.attention_weight().value;
    const auto& ab = state.attention_bias().value;
    const auto& sw = state.score_weight().value;
    const auto& sb = state.score_bias().value;

    if (masking_enabled) {
        Mat<Scalar> logits(arch.attention_maps(), P);
        if (arch.attention == AttentionMode::ClassWise) {
            for (int k = 0; k < N; ++k)
                logits.row(k).noalias() = aw.row(k) * act.features.middleRows(k * D, D);
        } else {
            logits.row(0).noalias() = aw.row(0) * act.features;
        }
        logits.colwise() += ab.col(0);
        act.alpha = sigmoid<Scalar>(logits);
        act.masked = act.features;
        for (int k = 0; k < N; ++k) {
            const int map = arch.attention == AttentionMode::ClassWise ? k : 0;
            act.masked.middleRows(k * D, D).array().rowwise() *= act.alpha.row(map).array();
        }
    }
    const Mat<Scalar>& source = masking_enabled ? act.masked : act.features;
    act.scores.resize(N, P);
    for (int k = 0; k < N; ++k) act.scores.row(k).noalias() = sw.row(k) * source.middleRows(k * D, D);
    act.scores.colwise() += sb.col(0);
    return act;
}

template <typename Scalar>
void backward(ModelState<Scalar>& state, const Activations<Scalar>& act, const Mat<Scalar>& d_scores,
              const Mat<Scalar>& d_alpha) {
    if (act.empty()) throw Error("backward: no cached forward pass");
    const Architecture& arch = state.arch;
    const int N = arch.num_classes, D = arch.branch_width;
    const Eigen::Index P = act.features.cols();
    if (d_scores.rows() != N || d_scores.cols() != P) throw Error("backward: score gradient has the wrong shape");

    const Mat<Scalar>& source = act.masking ? act.masked : act.features;
    const auto& sw = state.score_weight().value;
    Mat<Scalar> d_source(static_cast<Eigen::Index>(N) * D, P);
    for (int k = 0; k < N; ++k) {
        state.score_weight().grad.row(k).noalias() += d_scores.row(k) * source.middleRows(k * D, D).transpose();
        state.score_bias().grad(k, 0) += d_scores.row(k).sum();
        d_source.middleRows(k * D, D).noalias() = sw.row(k).transpose() * d_scores.row(k);
    }

    Mat<Scalar> d_features;
    if (act.masking) {
        const int maps = arch.attention_maps();
        Mat<Scalar> d_att = Mat<Scalar>::Zero(maps, P);
        if (d_alpha.size() != 0) {
            if (d_alpha.rows() != maps || d_alpha.cols() != P) throw Error("backward: attention gradient has the wrong shape");
            d_att = d_alpha;
        }
        d_features = d_source;
        for (int k = 0; k < N; ++k) {
            const int map = arch.attention == AttentionMode::ClassWise ? k : 0;
            // Phi = F * alpha: the product rule sends dPhi * alpha to F and sum_d F * dPhi to alpha.
            d_att.row(map) += act.features.middleRows(k * D, D).cwiseProduct(d_source.middleRows(k * D, D)).colwise().sum();
            d_features.middleRows(k * D, D).array().rowwise() *= act.alpha.row(map).array();
        }
        const Mat<Scalar> d_logit =
            (d_att.array() * act.alpha.array() * (Scalar(1) - act.alpha.array())).matrix();
        const auto& aw = state.attention_weight().value;
        if (arch.attention == AttentionMode::ClassWise) {
            for (int k = 0; k < N; ++k) {
                state.attention_weight().grad.row(k).noalias() +=
                    d_logit.row(k) * act.features.middleRows(k * D, D).transpose();
                d_features.middleRows(k * D, D).noalias() += aw.row(k).transpose() * d_logit.row(k);
            }
        } else {
            state.attention_weight().grad.row(0).noalias() += d_logit.row(0) * act.features.transpose();
            d_features.noalias() += aw.row(0).transpose() * d_logit.row(0);
        }
        state.attention_bias().grad.col(0) += d_logit.rowwise().sum();
    } else {
        d_features = std::move(d_source);
    }

    Mat<Scalar> d_out = std::move(d_features);
    for (std::size_t li = arch.trunk.size(); li-- > 0;) {
        const ConvCache<Scalar>& cache = act.layers[li];
        const Mat<Scalar> d_pre = (cache.pre.array() > Scalar(0)).select(d_out, Scalar(0));
        state.conv_weight(li).grad.noalias() += d_pre * cache.columns.transpose();
        state.conv_bias(li).grad.col(0) += d_pre.rowwise().sum();
        if (li == 0) break;
        const Mat<Scalar> d_columns = state.conv_weight(li).value.transpose() * d_pre;
        d_out = col2im<Scalar>(d_columns, cache);
    }
}

template <typename Scalar>
void sgd_step(ModelState<Scalar>& state, double lr, double momentum, int batch_size) {
    if (batch_size < 1) throw Error("sgd_step: batch size must be positive");
    for (const auto& p : state.params)
        if (!p.grad.allFinite()) throw Error("sgd_step: non-finite gradient in " + p.name);
    const Scalar m = static_cast<Scalar>(momentum), inv_b = Scalar(1) / static_cast<Scalar>(batch_size),
                 rate = static_cast<Scalar>(lr);
    for (auto& p : state.params) {
        p.velocity = m * p.velocity + inv_b * p.grad;
        p.value -= rate * p.velocity;
        p.grad.setZero();
    }
}

template <typename Scalar>
LabelMap predict_labels(const Activations<Scalar>& act) {
    const int fh = act.feature_height, fw = act.feature_width;
    const double sy = static_cast<double>(act.height) / fh, sx = static_cast<double>(act.width) / fw;
    const Eigen::Index N = act.scores.rows();
    LabelMap out(act.height, act.width);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> v(N);
    // bilinear upsampling of the scores with cell centres aligned, then argmax (ties to the lowest class)
    for (int y = 0; y < act.height; ++y) {
        const double fy = std::clamp((y + 0.5) / sy - 0.5, 0.0, fh - 1.0);
        const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, fh - 1);
        const auto ty = static_cast<Scalar>(fy - y0);
        for (int x = 0; x < act.width; ++x) {
            const double fx = std::clamp((x + 0.5) / sx - 0.5, 0.0, fw - 1.0);
            const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, fw - 1);
            const auto tx = static_cast<Scalar>(fx - x0);
            v = (1 - ty) * ((1 - tx) * act.scores.col(y0 * fw + x0) + tx * act.scores.col(y0 * fw + x1)) +
                ty * ((1 - tx) * act.scores.col(y1 * fw + x0) + tx * act.scores.col(y1 * fw + x1));
            Eigen::Index best = 0;
            v.maxCoeff(&best);
            out(y, x) = static_cast<std::uint8_t>(best);
        }
    }
    return out;
}

GradCheckResult grad_check(ModelState<double>& state, const Planes<double>& image, int height, int width,
                           bool masking_enabled, const LossFunction<double>& loss_fn, double epsilon,
                           const std::function<void(ModelState<double>&)>& corrupt) {
    state.zero_grad();
    {
        const auto act = forward(state, image, height, width, masking_enabled);
        const auto lg = loss_fn(act);
        backward(state, act, lg.d_scores, lg.d_alpha);
    }
    if (corrupt) corrupt(state);

    GradCheckResult r;
    auto loss_at = [&]() { return loss_fn(forward(state, image, height, width, masking_enabled)).loss; };
    for (auto& p : state.params) {
        for (Eigen::Index i = 0; i < p.value.size(); ++i) {
            const double original = p.value.data()[i];
            p.value.data()[i] = original + epsilon;
            const double plus = loss_at();
            p.value.data()[i] = original - epsilon;
            const double minus = loss_at();
            p.value.data()[i] = original;
            const double numeric = (plus - minus) / (2 * epsilon);
            const double analytic = p.grad.data()[i];
            const double rel =
                std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            ++r.checked;
            if (rel > r.max_relative_error) {
                r.max_relative_error = rel;
                r.worst_param = p.name;
                r.worst_index = static_cast<long>(i);
            }
        }
    }
    return r;
}

void save_checkpoint(const ModelState<float>& state, const std::filesystem::path& path) {
    const Architecture& a = state.arch;
    std::ostringstream os;
    os << kCheckpointMagic << '\n';
    os << "version " << kCheckpointVersion << '\n';
    os << "in_channels " << a.in_channels << '\n';
    os << "num_classes " << a.num_classes << '\n';
    os << "branch_width " << a.branch_width << '\n';
    os << "attention " << to_string(a.attention) << '\n';
    os << "masking " << (a.masking ? 1 : 0) << '\n';
    os << "trunk " << a.trunk.size();
    for (const ConvSpec& c : a.trunk) os << ' ' << c.out_channels << ':' << c.stride;
    os << '\n';
    os << "tensors " << state.params.size() << '\n';
    for (const auto& p : state.params) os << "tensor " << p.name << ' ' << p.value.rows() << ' ' << p.value.cols() << '\n';
    os << "data\n";
    for (const auto& p : state.params)
        for (Eigen::Index i = 0; i < p.value.size(); ++i) {
            const std::uint32_t bits = std::bit_cast<std::uint32_t>(p.value.data()[i]);
            const char bytes[4] = {static_cast<char>(bits & 0xFF), static_cast<char>((bits >> 8) & 0xFF),
                                   static_cast<char>((bits >> 16) & 0xFF), static_cast<char>((bits >> 24) & 0xFF)};
            os.write(bytes, 4);
        }
    write_file_atomic(path, os.str());
}

ModelState<float> load_checkpoint(const std::filesystem::path& path) {
    const std::string data = read_file(path);
    const std::size_t marker = data.find("\ndata\n");
    if (data.rfind(kCheckpointMagic, 0) != 0 || marker == std::string::npos)
        throw FormatError("not a checkpoint: " + path.string());
    std::istringstream in(data.substr(0, marker));
    auto expect = [&](const char* key) {
        std::string got;
        if (!(in >> got) || got != key) throw FormatError("checkpoint " + path.string() + ": expected '" + key + "'");
    };
    std::string magic, attention;
    int version = 0, masking = 0;
    std::size_t layers = 0, tensors = 0;
    Architecture a;
    in >> magic;
    expect("version");
    in >> version;
    if (version != kCheckpointVersion) throw FormatError("checkpoint " + path.string() + ": unsupported version");
    expect("in_channels");
    in >> a.in_channels;
    expect("num_classes");
    in >> a.num_classes;
    expect("branch_width");
    in >> a.branch_width;
    expect("attention");
    in >> attention;
    a.attention = attention_mode_from_string(attention);
    expect("masking");
    in >> masking;
    a.masking = masking != 0;
    expect("trunk");
    in >> layers;
    for (std::size_t i = 0; i < layers; ++i) {
        ConvSpec c;
        char colon = 0;
        in >> c.out_channels >> colon >> c.stride;
        if (colon != ':') throw FormatError("checkpoint " + path.string() + ": malformed trunk spec");
        a.trunk.push_back(c);
    }
    if (!in) throw FormatError("checkpoint " + path.string() + ": malformed header");
    a.validate();

    ModelState<float> state = init_model<float>(a, 0);
    expect("tensors");
    in >> tensors;
    if (tensors != state.params.size()) throw FormatError("checkpoint " + path.string() + ": tensor count mismatch");
    for (auto& p : state.params) {
        std::string name;
        Eigen::Index rows = 0, cols = 0;
        expect("tensor");
        in >> name >> rows >> cols;
        if (name != p.name || rows != p.value.rows() || cols != p.value.cols())
            throw FormatError("checkpoint " + path.string() + ": tensor " + name + " does not match the architecture");
    }
    std::size_t pos = marker + 6;
    std::size_t needed = 0;
    for (const auto& p : state.params) needed += static_cast<std::size_t>(p.value.size()) * 4;
    if (data.size() != pos + needed) throw FormatError("checkpoint " + path.string() + ": payload size mismatch");
    for (auto& p : state.params)
        for (Eigen::Index i = 0; i < p.value.size(); ++i, pos += 4) {
            const auto* b = reinterpret_cast<const unsigned char*>(data.data() + pos);
            const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                                       (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
            p.value.data()[i] = std::bit_cast<float>(bits);
        }
    return state;
}

template struct ModelState<float>;
template struct ModelState<double>;
template ModelState<float> init_model<float>(const Architecture&, std::uint64_t);
template ModelState<double> init_model<double>(const Architecture&, std::uint64_t);
template Activations<float> forward<float>(const ModelState<float>&, const Planes<float>&, int, int, bool);
template Activations<double> forward<double>(const ModelState<double>&, const Planes<double>&, int, int, bool);
template void backward<float>(ModelState<float>&, const Activations<float>&, const Mat<float>&, const Mat<float>&);
template void backward<double>(ModelState<double>&, const Activations<double>&, const Mat<double>&, const Mat<double>&);
template void sgd_step<float>(ModelState<float>&, double, double, int);
template void sgd_step<double>(ModelState<double>&, double, double, int);
template LabelMap predict_labels<float>(const Activations<float>&);
template LabelMap predict_labels<double>(const Activations<double>&);

}  // namespace boxseg
