#pragma once

#include "boxseg/common.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace boxseg {

/// Raised when an object cannot be placed on a sample's canvas.
class GenerationError : public Error {
public:
    using Error::Error;
};

struct ImageSample {
    std::string id;
    int height = 0;
    int width = 0;
    Planes<float> pixels;  // channels x (height * width), values in [0, 1]
    LabelMap gt_labels;
    std::vector<Box> boxes;

    int channels() const { return static_cast<int>(pixels.rows()); }
    bool operator==(const ImageSample& o) const;
};

/// Block fills its box, disc is the inscribed ellipse, wedge is a right triangle over half the box.
enum class ShapeKind { Block, Disc, Wedge };

std::string to_string(ShapeKind kind);
ShapeKind shape_kind_from_string(const std::string& name);

struct IntensityRange {
    float lo = 0.0f;
    float hi = 1.0f;
};

struct SynthConfig {
    int canvas = 64;
    int channels = 1;
    /// Shape kinds per foreground class; class id = index + 1. A class listing several kinds
    /// draws one uniformly per object and records its index as the box's sub_class_id.
    std::vector<std::vector<ShapeKind>> class_shapes{{ShapeKind::Block}, {ShapeKind::Disc}, {ShapeKind::Wedge}};
    int min_objects = 1;
    int max_objects = 3;
    int min_side = 16;
    int max_side = 32;
    IntensityRange background{0.55f, 0.9f};
    IntensityRange foreground{0.05f, 0.4f};
    /// Optional per-class foreground range overriding `foreground`.
    std::vector<IntensityRange> class_foreground;
    float noise = 0.05f;
    bool allow_overlap = false;
    int samples = 600;
    std::uint64_t seed = 42;

    int num_classes() const { return static_cast<int>(class_shapes.size()) + 1; }
    void validate() const;
};

/// Minimal rectangle containing every set pixel.
Box tight_box(const BinaryMask& mask, int class_id);

/// Pixel-center inclusion raster of `kind` inside a width x height box.
/// `orientation` (0..3) selects which corner holds a wedge's right angle.
BinaryMask rasterize_shape(ShapeKind kind, int width, int height, int orientation = 0);

std::vector<ImageSample> generate_synthetic(const SynthConfig& cfg);

void save_dataset(const std::vector<ImageSample>& samples, const std::filesystem::path& dir);
std::vector<ImageSample> load_dataset(const std::filesystem::path& dir);

/// 8-bit binary graymap I/O.
void write_pgm(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, int& width, int& height);

}  // namespace boxseg
