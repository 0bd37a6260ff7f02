#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace boxseg {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent on-disk content.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Missing or unreadable file.
class LoadError : public Error {
public:
    using Error::Error;
};

/// Reserved label excluded from every loss and gradient.
inline constexpr std::uint8_t kIgnore = 255;

/// Per-pixel class indices, row-major H x W.
using LabelMap = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using BinaryMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Channel-major planes: one row per channel, one column per pixel (index y * width + x).
template <typename Scalar>
using Planes = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Axis-aligned box, inclusive top-left and exclusive bottom-right corners.
struct Box {
    int class_id = 0;
    int x0 = 0;
    int y0 = 0;
    int x1 = 0;
    int y1 = 0;
    std::optional<int> sub_class_id;

    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    long area() const { return static_cast<long>(width()) * height(); }
    bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
    bool intersects(const Box& o) const { return x0 < o.x1 && o.x0 < x1 && y0 < o.y1 && o.y0 < y1; }
    bool inside_canvas(int height_px, int width_px) const {
        return x0 >= 0 && y0 >= 0 && x1 <= width_px && y1 <= height_px && x1 > x0 && y1 > y0;
    }

    bool operator==(const Box&) const = default;
};

std::string describe(const Box& box);

/// Write `content` to `path` through a sibling temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

/// 64-bit FNV-1a, used for config fingerprints.
std::uint64_t fnv1a(std::string_view bytes);

}  // namespace boxseg
