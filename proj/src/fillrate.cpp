#include "boxseg/fillrate.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace boxseg {

namespace {
constexpr const char* kTableMagic = "boxseg-fillrate";
constexpr int kTableVersion = 1;
}  // namespace

BoxFillSample make_fill_sample(const Box& box, const LabelMap& proposal) {
    if (!box.inside_canvas(static_cast<int>(proposal.rows()), static_cast<int>(proposal.cols())))
        throw Error("box does not fit its proposal map: " + describe(box));
    BoxFillSample s;
    s.class_id = box.class_id;
    s.box_area = box.area();
    const auto region = proposal.block(box.y0, box.x0, box.height(), box.width());
    s.proposal_count = (region == static_cast<std::uint8_t>(box.class_id)).count();
    s.ratio = static_cast<double>(s.proposal_count) / static_cast<double>(s.box_area);
    s.log_aspect = std::log(static_cast<double>(box.width()) / static_cast<double>(box.height()));
    s.sub_class_id = box.sub_class_id;
    return s;
}

std::vector<BoxFillSample> collect_fill_samples(const std::vector<LabelMap>& proposals,
                                                const std::vector<std::vector<Box>>& boxes) {
    if (proposals.size() != boxes.size()) throw Error("collect_fill_samples: proposal and box lists differ in length");
    std::vector<BoxFillSample> out;
    for (std::size_t i = 0; i < proposals.size(); ++i)
        for (const Box& b : boxes[i]) out.push_back(make_fill_sample(b, proposals[i]));
    return out;
}

std::vector<BoxFillSample> collect_fill_samples(const std::vector<ImageSample>& proposals) {
    std::vector<BoxFillSample> out;
    for (const ImageSample& s : proposals)
        for (const Box& b : s.boxes) out.push_back(make_fill_sample(b, s.gt_labels));
    return out;
}

namespace {

int nearest(const Eigen::Matrix2Xd& centroids, const Eigen::Vector2d& p, double* dist2 = nullptr) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centroids.cols(); ++c) {
        const double d = (centroids.col(c) - p).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(c);
        }
    }
    if (dist2) *dist2 = best_d;
    return best;
}

}  // namespace

KMeansResult kmeans(const Eigen::Matrix2Xd& points, int k, std::uint64_t seed, int max_iterations) {
    if (points.cols() == 0) throw Error("kmeans: no points to cluster");
    if (k < 1) throw Error("kmeans: k must be at least 1");
    const Eigen::Index n = points.cols();

    std::vector<Eigen::Vector2d> distinct;
    for (Eigen::Index i = 0; i < n; ++i)
        if (std::none_of(distinct.begin(), distinct.end(), [&](const Eigen::Vector2d& d) { return d == points.col(i); }))
            distinct.emplace_back(points.col(i));
    k = std::min<int>(k, static_cast<int>(distinct.size()));

    // k-means++ seeding
    std::mt19937_64 rng(seed);
    Eigen::Matrix2Xd centroids(2, k);
    centroids.col(0) = points.col(std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng));
    Eigen::VectorXd d2(n);
    for (int c = 1; c < k; ++c) {
        for (Eigen::Index i = 0; i < n; ++i) {
            double d = 0;
            nearest(centroids.leftCols(c), points.col(i), &d);
            d2(i) = d;
        }
        const double target = std::uniform_real_distribution<double>(0.0, d2.sum())(rng);
        double acc = 0;
        Eigen::Index pick = n - 1;
        for (Eigen::Index i = 0; i < n; ++i) {
            acc += d2(i);
            if (acc > target && d2(i) > 0) {
                pick = i;
                break;
            }
        }
        while (d2(pick) == 0) --pick;  // never re-pick an existing centroid
        centroids.col(c) = points.col(pick);
    }

    KMeansResult r;
    r.assignment.assign(static_cast<std::size_t>(n), -1);
    for (int it = 0; it < max_iterations; ++it) {
        bool changed = false;
        double objective = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            double d = 0;
            const int a = nearest(centroids, points.col(i), &d);
            objective += d;
            if (a != r.assignment[static_cast<std::size_t>(i)]) {
                r.assignment[static_cast<std::size_t>(i)] = a;
                changed = true;
            }
        }
        r.objective.push_back(objective);
        r.iterations = it + 1;
        if (!changed) {
            r.converged = true;
            break;
        }
        Eigen::Matrix2Xd sums = Eigen::Matrix2Xd::Zero(2, k);
        Eigen::VectorXi counts = Eigen::VectorXi::Zero(k);
        for (Eigen::Index i = 0; i < n; ++i) {
            sums.col(r.assignment[static_cast<std::size_t>(i)]) += points.col(i);
            ++counts(r.assignment[static_cast<std::size_t>(i)]);
        }
        for (int c = 0; c < k; ++c)
            if (counts(c) > 0) centroids.col(c) = sums.col(c) / counts(c);
    }

    std::vector<int> order(static_cast<std::size_t>(k));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (centroids(0, a) != centroids(0, b)) return centroids(0, a) < centroids(0, b);
        if (centroids(1, a) != centroids(1, b)) return centroids(1, a) < centroids(1, b);
        return a < b;
    });
    std::vector<int> rank(static_cast<std::size_t>(k));
    r.centroids.resize(2, k);
    for (int c = 0; c < k; ++c) {
        rank[static_cast<std::size_t>(order[static_cast<std::size_t>(c)])] = c;
        r.centroids.col(c) = centroids.col(order[static_cast<std::size_t>(c)]);
    }
    for (int& a : r.assignment) a = rank[static_cast<std::size_t>(a)];
    return r;
}

KMeansResult cluster_subclasses(std::span<const BoxFillSample> samples, int k, std::uint64_t seed,
                                double aspect_weight) {
    if (samples.empty()) throw Error("cluster_subclasses: no samples");
    Eigen::Matrix2Xd points(2, static_cast<Eigen::Index>(samples.size()));
    for (std::size_t i = 0; i < samples.size(); ++i)
        points.col(static_cast<Eigen::Index>(i)) = samples[i].feature(aspect_weight);
    return kmeans(points, k, seed);
}

const ClassFillRate& FillRateTable::at(int class_id) const {
    const auto it = classes.find(class_id);
    if (it == classes.end()) throw Error("fill-rate table has no entry for class " + std::to_string(class_id));
    return it->second;
}

FillRateTable mean_fill_rates(std::span<const BoxFillSample> samples) {
    FillRateTable t;
    std::map<int, double> sums;
    for (const BoxFillSample& s : samples) {
        sums[s.class_id] += s.ratio;
        ++t.classes[s.class_id].count;
    }
    for (auto& [c, entry] : t.classes) entry.fill_rate = sums[c] / static_cast<double>(entry.count);
    return t;
}

FillRateTable build_fill_rate_table(std::span<const BoxFillSample> samples, int k, std::uint64_t seed,
                                    double aspect_weight) {
    if (k < 1) throw Error("build_fill_rate_table: k must be at least 1");
    FillRateTable t = mean_fill_rates(samples);
    t.k = k;
    t.seed = seed;
    t.aspect_weight = aspect_weight;
    for (auto& [c, entry] : t.classes) {
        std::vector<BoxFillSample> members;
        for (const BoxFillSample& s : samples)
            if (s.class_id == c) members.push_back(s);
        if (entry.count < k) {
            SubclassFillRate sub;
            for (const BoxFillSample& s : members) sub.centroid += s.feature(aspect_weight);
            sub.centroid /= static_cast<double>(members.size());
            sub.fill_rate = entry.fill_rate;
            sub.count = entry.count;
            entry.subclasses = {sub};
            continue;
        }
        const KMeansResult km = cluster_subclasses(members, k, seed, aspect_weight);
        entry.subclasses.assign(static_cast<std::size_t>(km.centroids.cols()), SubclassFillRate{});
        for (std::size_t i = 0; i < members.size(); ++i) {
            SubclassFillRate& sub = entry.subclasses[static_cast<std::size_t>(km.assignment[i])];
            sub.fill_rate += members[i].ratio;
            ++sub.count;
        }
        for (std::size_t sc = 0; sc < entry.subclasses.size(); ++sc) {
            SubclassFillRate& sub = entry.subclasses[sc];
            sub.centroid = km.centroids.col(static_cast<Eigen::Index>(sc));
            if (sub.count > 0) sub.fill_rate /= static_cast<double>(sub.count);
        }
    }
    return t;
}

int assign_subclass(const FillFeature& feature, const FillRateTable& table, int class_id) {
    const ClassFillRate& entry = table.at(class_id);
    if (entry.subclasses.empty())
        throw Error("fill-rate table has no sub-classes for class " + std::to_string(class_id));
    Eigen::Matrix2Xd centroids(2, static_cast<Eigen::Index>(entry.subclasses.size()));
    for (std::size_t i = 0; i < entry.subclasses.size(); ++i)
        centroids.col(static_cast<Eigen::Index>(i)) = entry.subclasses[i].centroid;
    return nearest(centroids, feature);
}

double fill_rate_for(const BoxFillSample& box, const FillRateTable& table, bool refined) {
    const ClassFillRate& entry = table.at(box.class_id);
    if (!refined) return entry.fill_rate;
    const int sc = assign_subclass(box.feature(table.aspect_weight), table, box.class_id);
    return entry.subclasses[static_cast<std::size_t>(sc)].fill_rate;
}

void save_fill_rate_table(const FillRateTable& table, const std::filesystem::path& path) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << kTableMagic << ' ' << kTableVersion << '\n';
    os << "k " << table.k << " seed " << table.seed << " aspect_weight " << table.aspect_weight << '\n';
    os << "classes " << table.classes.size() << '\n';
    for (const auto& [c, entry] : table.classes) {
        os << "class " << c << " fr " << entry.fill_rate << " count " << entry.count << " subclasses "
           << entry.subclasses.size() << '\n';
        for (std::size_t sc = 0; sc < entry.subclasses.size(); ++sc) {
            const SubclassFillRate& sub = entry.subclasses[sc];
            os << "sub " << sc << " centroid " << sub.centroid(0) << ' ' << sub.centroid(1) << " fr " << sub.fill_rate
               << " count " << sub.count << '\n';
        }
    }
    write_file_atomic(path, os.str());
}

FillRateTable load_fill_rate_table(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    auto expect = [&](const char* word) {
        std::string got;
        if (!(in >> got) || got != word)
            throw FormatError("fill-rate table " + path.string() + ": expected '" + word + "', found '" + got + "'");
    };
    FillRateTable t;
    std::string magic;
    int version = 0;
    if (!(in >> magic >> version) || magic != kTableMagic || version != kTableVersion)
        throw FormatError("not a fill-rate table: " + path.string());
    std::size_t nclasses = 0;
    expect("k");
    in >> t.k;
    expect("seed");
    in >> t.seed;
    expect("aspect_weight");
    in >> t.aspect_weight;
    expect("classes");
    in >> nclasses;
    for (std::size_t i = 0; i < nclasses; ++i) {
        int c = 0;
        std::size_t nsub = 0;
        ClassFillRate entry;
        expect("class");
        in >> c;
        expect("fr");
        in >> entry.fill_rate;
        expect("count");
        in >> entry.count;
        expect("subclasses");
        in >> nsub;
        for (std::size_t s = 0; s < nsub; ++s) {
            SubclassFillRate sub;
            std::size_t index = 0;
            expect("sub");
            in >> index;
            expect("centroid");
            in >> sub.centroid(0) >> sub.centroid(1);
            expect("fr");
            in >> sub.fill_rate;
            expect("count");
            in >> sub.count;
            if (index != s) throw FormatError("fill-rate table " + path.string() + ": sub-classes out of order");
            entry.subclasses.push_back(sub);
        }
        if (!in) throw FormatError("fill-rate table " + path.string() + ": truncated class record");
        t.classes[c] = entry;
    }
    return t;
}

std::string format_fill_rate_report(const FillRateTable& table) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3);
    os << "class  count  fill-rate\n";
    for (const auto& [c, entry] : table.classes) {
        const int bar = static_cast<int>(std::lround(entry.fill_rate * 40));
        os << std::setw(5) << c << "  " << std::setw(5) << entry.count << "  " << entry.fill_rate << "  "
           << std::string(static_cast<std::size_t>(bar), '#') << '\n';
        for (std::size_t sc = 0; sc < entry.subclasses.size(); ++sc) {
            const SubclassFillRate& sub = entry.subclasses[sc];
            os << "    sub " << sc << "  count " << sub.count << "  fr " << sub.fill_rate << "  centroid ("
               << sub.centroid(0) << ", " << sub.centroid(1) << ")\n";
        }
    }
    return os.str();
}

}  // namespace boxseg
