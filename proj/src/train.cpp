#include "boxseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace boxseg {

std::string to_string(Supervision s) {
    switch (s) {
        case Supervision::BoxLike: return "box_like";
        case Supervision::Crf: return "crf";
        case Supervision::CrfFr: return "crf+fr";
        case Supervision::CrfBcm: return "crf+bcm";
        case Supervision::CrfBcmFr: return "crf+bcm+fr";
        case Supervision::CrfBcmFrRefined: return "crf+bcm+fr_refined";
    }
    return "unknown";
}

Supervision supervision_from_string(const std::string& name) {
    for (Supervision s : {Supervision::BoxLike, Supervision::Crf, Supervision::CrfFr, Supervision::CrfBcm,
                          Supervision::CrfBcmFr, Supervision::CrfBcmFrRefined})
        if (to_string(s) == name) return s;
    throw Error("unknown supervision: " + name);
}

void TrainConfig::validate() const {
    if (iterations <= 0) throw Error("train config: iterations must be positive");
    if (!(base_lr > 0)) throw Error("train config: base_lr must be positive");
    if (!(lr_decay > 0)) throw Error("train config: lr_decay must be positive");
    if (lr_step <= 0) throw Error("train config: lr_step must be positive");
    if (momentum < 0 || momentum >= 1) throw Error("train config: momentum must lie in [0, 1)");
    if (batch_size <= 0) throw Error("train config: batch_size must be positive");
    if (lambda < 0) throw Error("train config: lambda must be non-negative");
    if (crop_pad < 0) throw Error("train config: crop_pad must be non-negative");
    if (semi_fraction < 0 || semi_fraction > 1) throw Error("train config: semi_fraction must lie in [0, 1]");
    if (branch_width < 1) throw Error("train config: branch_width must be positive");
    if (fr_warmup < 0) throw Error("train config: fr_warmup must be non-negative");
    fr.validate();
}

bool TrainConfig::uses_masking() const {
    return supervision == Supervision::CrfBcm || supervision == Supervision::CrfBcmFr ||
           supervision == Supervision::CrfBcmFrRefined;
}

FrMode TrainConfig::effective_fr_mode() const {
    switch (supervision) {
        case Supervision::CrfFr:
        case Supervision::CrfBcmFr: return fr.mode == FrMode::Off ? FrMode::ClassFr : fr.mode;
        case Supervision::CrfBcmFrRefined: return FrMode::SubclassFr;
        default: return FrMode::Off;
    }
}

ProposalMode TrainConfig::proposal_mode() const {
    return supervision == Supervision::BoxLike ? ProposalMode::Box : ProposalMode::Crf;
}

double TrainConfig::lr_at(int iteration) const { return base_lr * std::pow(lr_decay, iteration / lr_step); }

std::string TrainLog::to_csv() const {
    std::ostringstream os;
    os << std::setprecision(9);
    const std::size_t classes = rows.empty() ? 0 : rows.front().loss.selected.size();
    os << "iteration,lr,L_fr,sum_L_bcm,L_all";
    for (std::size_t c = 0; c < classes; ++c) os << ",selected_" << c;
    os << '\n';
    for (const LogRow& r : rows) {
        os << r.iteration << ',' << r.lr << ',' << r.loss.fr_loss << ',' << r.loss.bcm_sum() << ',' << r.loss.total;
        for (long n : r.loss.selected) os << ',' << n;
        os << '\n';
    }
    return os.str();
}

std::vector<bool> semi_subset(std::size_t count, double fraction, std::uint64_t seed) {
    std::vector<bool> chosen(count, false);
    const auto take = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(count)));
    if (take == 0) return chosen;
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed ^ 0x5e111ULL);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < take; ++i) chosen[order[i]] = true;
    return chosen;
}

namespace {

struct Augmented {
    Planes<float> image;
    LabelMap labels;
    std::vector<Box> boxes;
    std::vector<double> rates;
};

/// Optional horizontal flip, then a shift by (dx, dy) with zero pixels and ignored labels exposed.
Augmented augment(const ImageSample& s, const LabelMap& labels, const std::vector<double>& rates, bool flip, int dx,
                  int dy) {
    const int H = s.height, W = s.width;
    Augmented a;
    a.image = Planes<float>::Zero(s.pixels.rows(), s.pixels.cols());
    a.labels = LabelMap::Constant(H, W, kIgnore);
    for (int y = 0; y < H; ++y) {
        const int sy = y - dy;
        if (sy < 0 || sy >= H) continue;
        for (int x = 0; x < W; ++x) {
            int sx = x - dx;
            if (sx < 0 || sx >= W) continue;
            if (flip) sx = W - 1 - sx;
            a.image.col(static_cast<Eigen::Index>(y) * W + x) = s.pixels.col(static_cast<Eigen::Index>(sy) * W + sx);
            a.labels(y, x) = labels(sy, sx);
        }
    }
    for (std::size_t i = 0; i < s.boxes.size(); ++i) {
        Box b = s.boxes[i];
        if (flip) {
            const int x0 = W - b.x1;
            b.x1 = W - b.x0;
            b.x0 = x0;
        }
        b.x0 = std::clamp(b.x0 + dx, 0, W);
        b.x1 = std::clamp(b.x1 + dx, 0, W);
        b.y0 = std::clamp(b.y0 + dy, 0, H);
        b.y1 = std::clamp(b.y1 + dy, 0, H);
        if (b.x1 <= b.x0 || b.y1 <= b.y0) continue;
        a.boxes.push_back(b);
        a.rates.push_back(rates[i]);
    }
    return a;
}

}  // namespace

ModelState<float> train(const std::vector<ImageSample>& samples, const std::vector<LabelMap>& proposals,
                        const FillRateTable* table, const TrainConfig& cfg, TrainLog* log) {
    cfg.validate();
    if (samples.empty()) throw TrainingError("train: empty training set");
    if (proposals.size() != samples.size()) throw TrainingError("train: need one proposal per training sample");
    const FrMode fr_mode = cfg.effective_fr_mode();
    if ((fr_mode == FrMode::ClassFr || fr_mode == FrMode::SubclassFr) && !table)
        throw TrainingError("train: supervision " + to_string(cfg.supervision) + " requires a fill-rate table");

    const int num_classes = infer_num_classes(samples);
    Architecture arch = Architecture::standard(samples.front().channels(), num_classes, cfg.branch_width);
    arch.attention = cfg.attention;
    arch.masking = cfg.uses_masking();
    const int stride = arch.feature_stride();
    ModelState<float> state = init_model<float>(arch, cfg.seed);

    FrSelectionConfig fr = cfg.fr;
    fr.mode = fr_mode;
    const std::vector<bool> use_truth = semi_subset(samples.size(), cfg.semi_fraction, cfg.seed);
    std::vector<std::vector<double>> rates(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const ImageSample& s = samples[i];
        if (proposals[i].rows() != s.height || proposals[i].cols() != s.width)
            throw TrainingError("train: proposal size differs from sample " + s.id);
        if (s.height % stride != 0 || s.width % stride != 0)
            throw TrainingError("train: sample " + s.id + " is not divisible by the feature stride");
        if (!use_truth[i]) rates[i] = resolve_box_rates(s.boxes, proposals[i], table, fr);
        else rates[i].assign(s.boxes.size(), 0.0);
    }

    std::mt19937_64 rng(cfg.seed ^ 0xa5a5a5a5ULL);
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    const FrSelectionConfig truth_cfg{FrMode::Off, fr.global_rate, fr.ranking_base};

    for (int it = 0; it < cfg.iterations; ++it) {
        const double lr = cfg.lr_at(it);
        LogRow row;
        row.iteration = it;
        row.lr = lr;
        row.loss.lambda = cfg.lambda;
        row.loss.selected.assign(static_cast<std::size_t>(num_classes), 0);
        row.loss.bcm.assign(static_cast<std::size_t>(arch.masking ? arch.attention_maps() : 0), 0.0);

        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const std::size_t idx = order[cursor++];
            const ImageSample& s = samples[idx];
            const bool flip = cfg.hflip && std::uniform_int_distribution<int>(0, 1)(rng) == 1;
            int dx = 0, dy = 0;
            if (cfg.crop_pad > 0) {
                dx = std::uniform_int_distribution<int>(-cfg.crop_pad, cfg.crop_pad)(rng);
                dy = std::uniform_int_distribution<int>(-cfg.crop_pad, cfg.crop_pad)(rng);
            }
            const LabelMap& source = use_truth[idx] ? s.gt_labels : proposals[idx];
            const Augmented a = augment(s, source, rates[idx], flip, dx, dy);

            const auto act = forward(state, a.image, s.height, s.width, arch.masking);
            const LabelMap feature_labels = downsample_labels(a.labels, stride);
            std::vector<Box> feature_boxes;
            for (const Box& box : a.boxes) feature_boxes.push_back(nearest_box(box, stride));
            BoxMaskSet masks;
            if (arch.masking) masks = downsample_box_masks(a.boxes, num_classes, s.height, s.width, stride);

            const auto loss = total_loss<float>(act, feature_boxes, feature_labels, a.rates,
                                                arch.masking ? &masks : nullptr, arch.attention, cfg.lambda,
                                                use_truth[idx] || it < cfg.fr_warmup ? truth_cfg : fr);
            if (!std::isfinite(loss.breakdown.total))
                throw TrainingError("non-finite loss at iteration " + std::to_string(it));
            backward(state, act, loss.d_scores, loss.d_alpha);

            row.loss.fr_loss += loss.breakdown.fr_loss / cfg.batch_size;
            for (std::size_t m = 0; m < loss.breakdown.bcm.size(); ++m) row.loss.bcm[m] += loss.breakdown.bcm[m] / cfg.batch_size;
            row.loss.total += loss.breakdown.total / cfg.batch_size;
            for (std::size_t c = 0; c < loss.breakdown.selected.size(); ++c) row.loss.selected[c] += loss.breakdown.selected[c];
        }
        try {
            sgd_step(state, lr, cfg.momentum, cfg.batch_size);
        } catch (const Error& e) {
            throw TrainingError(std::string(e.what()) + " at iteration " + std::to_string(it));
        }
        if (log) log->rows.push_back(std::move(row));
    }
    return state;
}

bool EvalReport::operator==(const EvalReport& o) const {
    return tp == o.tp && fp == o.fp && fn == o.fn && mean_iou == o.mean_iou && fingerprint == o.fingerprint &&
           seed == o.seed && config_echo == o.config_echo;
}

std::string EvalReport::to_text() const {
    std::ostringstream os;
    os << std::setprecision(9);
    os << "class,iou,tp,fp,fn\n";
    for (std::size_t c = 0; c < iou.size(); ++c) {
        os << c << ',';
        if (std::isnan(iou[c])) os << "absent";
        else os << iou[c];
        os << ',' << tp[c] << ',' << fp[c] << ',' << fn[c] << '\n';
    }
    os << "mean_iou," << mean_iou << '\n';
    os << "fingerprint," << std::hex << std::setw(16) << std::setfill('0') << fingerprint << std::dec << '\n';
    os << "seed," << seed << '\n';
    os << "config," << config_echo << '\n';
    return os.str();
}

EvalReport evaluate_labels(const std::vector<LabelMap>& predictions, const std::vector<LabelMap>& truth, int num_classes) {
    if (predictions.size() != truth.size()) throw Error("evaluate_labels: prediction and truth counts differ");
    const auto N = static_cast<std::size_t>(num_classes);
    EvalReport r;
    r.tp.assign(N, 0);
    r.fp.assign(N, 0);
    r.fn.assign(N, 0);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (predictions[i].rows() != truth[i].rows() || predictions[i].cols() != truth[i].cols())
            throw Error("evaluate_labels: prediction and truth sizes differ");
        for (Eigen::Index p = 0; p < truth[i].size(); ++p) {
            const std::size_t g = truth[i].data()[p], q = predictions[i].data()[p];
            if (g == kIgnore) continue;
            if (g >= N || q >= N) throw Error("evaluate_labels: label exceeds class count");
            if (g == q) {
                ++r.tp[g];
            } else {
                ++r.fn[g];
                ++r.fp[q];
            }
        }
    }
    r.iou.assign(N, std::numeric_limits<double>::quiet_NaN());
    double sum = 0;
    int present = 0;
    for (std::size_t c = 0; c < N; ++c) {
        if (r.tp[c] + r.fn[c] == 0) continue;
        r.iou[c] = static_cast<double>(r.tp[c]) / static_cast<double>(r.tp[c] + r.fp[c] + r.fn[c]);
        sum += r.iou[c];
        ++present;
    }
    r.mean_iou = present == 0 ? 0.0 : sum / present;
    return r;
}

EvalReport evaluate_miou(const ModelState<float>& state, const std::vector<ImageSample>& dataset) {
    std::vector<LabelMap> predictions, truth;
    predictions.reserve(dataset.size());
    truth.reserve(dataset.size());
    for (const ImageSample& s : dataset) {
        predictions.push_back(predict_labels(forward(state, s.pixels, s.height, s.width, state.arch.masking)));
        truth.push_back(s.gt_labels);
    }
    return evaluate_labels(predictions, truth, state.arch.num_classes);
}

AblationInputs prepare_ablation(std::vector<ImageSample> train_set, std::vector<ImageSample> validation,
                                const CrfParams& crf, int k, std::uint64_t cluster_seed) {
    AblationInputs in;
    in.train = std::move(train_set);
    in.validation = std::move(validation);
    std::vector<ImageSample> all = in.train;
    all.insert(all.end(), in.validation.begin(), in.validation.end());
    const int num_classes = infer_num_classes(all);
    for (const ImageSample& s : in.train) {
        in.box_proposals.push_back(make_proposal(s, ProposalMode::Box, crf, num_classes));
        in.crf_proposals.push_back(make_proposal(s, ProposalMode::Crf, crf, num_classes));
    }
    std::vector<std::vector<Box>> boxes;
    for (const ImageSample& s : in.train) boxes.push_back(s.boxes);
    in.fill_rates = build_fill_rate_table(collect_fill_samples(in.crf_proposals, boxes), k, cluster_seed);
    return in;
}

double median(std::vector<double> values) {
    if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::vector<AblationRow> run_ablation(const AblationInputs& inputs, const std::vector<TrainConfig>& grid,
                                      const std::vector<std::uint64_t>& seeds, const AblationProgress& progress) {
    if (seeds.empty()) throw Error("run_ablation: at least one seed required");
    std::vector<AblationRow> rows;
    for (const TrainConfig& base : grid) {
        AblationRow row;
        row.config = base;
        row.seeds = seeds;
        for (std::uint64_t seed : seeds) {
            TrainConfig cfg = base;
            cfg.seed = seed;
            const auto& proposals =
                cfg.proposal_mode() == ProposalMode::Box ? inputs.box_proposals : inputs.crf_proposals;
            const ModelState<float> model = train(inputs.train, proposals, &inputs.fill_rates, cfg);
            const double miou = evaluate_miou(model, inputs.validation).mean_iou;
            row.miou.push_back(miou);
            if (progress) progress(cfg, seed, miou);
        }
        row.median = median(row.miou);
        rows.push_back(std::move(row));
    }
    return rows;
}

TrainConfig ablation_row(const std::string& name, const TrainConfig& base) {
    TrainConfig c = base;
    c.name = name;
    c.fr.mode = FrMode::ClassFr;
    c.attention = AttentionMode::ClassWise;
    if (name == "box_like") {
        c.supervision = Supervision::BoxLike;
    } else if (name == "baseline") {
        c.supervision = Supervision::Crf;
    } else if (name == "cm") {
        c.supervision = Supervision::CrfBcm;
        c.lambda = 0.0;
    } else if (name == "bgm") {
        c.supervision = Supervision::CrfBcm;
        c.attention = AttentionMode::Global;
    } else if (name == "bcm") {
        c.supervision = Supervision::CrfBcm;
    } else if (name == "global_loss") {
        c.supervision = Supervision::CrfFr;
        c.fr.mode = FrMode::GlobalFr;
    } else if (name == "fr_loss") {
        c.supervision = Supervision::CrfFr;
    } else if (name == "fr_loss_refine") {
        c.supervision = Supervision::CrfFr;
        c.fr.mode = FrMode::SubclassFr;
    } else if (name == "bcm_fr_loss") {
        c.supervision = Supervision::CrfBcmFr;
    } else if (name == "bcm_fr_loss_refine") {
        c.supervision = Supervision::CrfBcmFrRefined;
    } else {
        throw Error("unknown ablation row: " + name);
    }
    return c;
}

std::vector<TrainConfig> standard_ablation_grid(const TrainConfig& base) {
    std::vector<TrainConfig> grid;
    for (const char* name : {"box_like", "baseline", "cm", "bgm", "bcm", "global_loss", "fr_loss", "fr_loss_refine",
                             "bcm_fr_loss_refine"})
        grid.push_back(ablation_row(name, base));
    return grid;
}

std::string ablation_to_csv(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << std::setprecision(6);
    const std::size_t nseeds = rows.empty() ? 0 : rows.front().seeds.size();
    os << "row,supervision,fr_mode,attention,lambda,semi_fraction";
    for (std::size_t i = 0; i < nseeds; ++i) os << ",miou_seed" << rows.front().seeds[i];
    os << ",median_miou\n";
    for (const AblationRow& r : rows) {
        os << r.config.name << ',' << to_string(r.config.supervision) << ',' << to_string(r.config.effective_fr_mode())
           << ',' << to_string(r.config.attention) << ',' << r.config.lambda << ',' << r.config.semi_fraction;
        for (double m : r.miou) os << ',' << m;
        os << ',' << r.median << '\n';
    }
    return os.str();
}

}  // namespace boxseg
