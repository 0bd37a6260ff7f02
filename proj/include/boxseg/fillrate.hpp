#pragma once

#include "boxseg/common.hpp"
#include "boxseg/dataset.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace boxseg {

/// Clustering feature of one box: (fill ratio, aspect_weight * log(width / height)).
using FillFeature = Eigen::Vector2d;

inline constexpr double kDefaultAspectWeight = 0.2;

struct BoxFillSample {
    int class_id = 0;
    long box_area = 0;
    long proposal_count = 0;  // pixels inside the box carrying the box's class
    double ratio = 0.0;
    double log_aspect = 0.0;
    std::optional<int> sub_class_id;  // generator ground truth, when known

    FillFeature feature(double aspect_weight = kDefaultAspectWeight) const { return {ratio, aspect_weight * log_aspect}; }
};

BoxFillSample make_fill_sample(const Box& box, const LabelMap& proposal);

/// One sample per box; `proposals[i]` pairs with `boxes[i]`.
std::vector<BoxFillSample> collect_fill_samples(const std::vector<LabelMap>& proposals,
                                                const std::vector<std::vector<Box>>& boxes);
/// Same, reading label maps and boxes from a proposal dataset.
std::vector<BoxFillSample> collect_fill_samples(const std::vector<ImageSample>& proposals);

struct KMeansResult {
    Eigen::Matrix2Xd centroids;
    std::vector<int> assignment;
    std::vector<double> objective;  // sum of squared distances after each assignment step
    int iterations = 0;
    bool converged = false;
};

/// Lloyd iterations from k-means++ seeding. k collapses to the number of distinct points when
/// fewer; clusters are renumbered by ascending centroid.
KMeansResult kmeans(const Eigen::Matrix2Xd& points, int k, std::uint64_t seed, int max_iterations = 100);

KMeansResult cluster_subclasses(std::span<const BoxFillSample> samples, int k, std::uint64_t seed,
                                double aspect_weight = kDefaultAspectWeight);

struct SubclassFillRate {
    FillFeature centroid = FillFeature::Zero();
    double fill_rate = 0.0;
    long count = 0;

    bool operator==(const SubclassFillRate&) const = default;
};

struct ClassFillRate {
    double fill_rate = 0.0;
    long count = 0;
    std::vector<SubclassFillRate> subclasses;

    bool operator==(const ClassFillRate&) const = default;
};

struct FillRateTable {
    int k = 3;
    std::uint64_t seed = 0;
    double aspect_weight = kDefaultAspectWeight;
    std::map<int, ClassFillRate> classes;

    const ClassFillRate& at(int class_id) const;
    bool operator==(const FillRateTable&) const = default;
};

/// Class-level mean fill rates; classes without samples are absent.
FillRateTable mean_fill_rates(std::span<const BoxFillSample> samples);

/// Class-level rates plus k-means sub-classes. Classes with fewer than k samples keep a single
/// sub-class equal to the class mean.
FillRateTable build_fill_rate_table(std::span<const BoxFillSample> samples, int k, std::uint64_t seed,
                                    double aspect_weight = kDefaultAspectWeight);

/// Nearest centroid, ties to the lowest sub-class id.
int assign_subclass(const FillFeature& feature, const FillRateTable& table, int class_id);

double fill_rate_for(const BoxFillSample& box, const FillRateTable& table, bool refined);

void save_fill_rate_table(const FillRateTable& table, const std::filesystem::path& path);
FillRateTable load_fill_rate_table(const std::filesystem::path& path);

/// Human-readable per-class report with a bar per class.
std::string format_fill_rate_report(const FillRateTable& table);

}  // namespace boxseg
