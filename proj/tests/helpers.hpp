#pragma once

#include "boxseg/common.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace boxseg::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("boxseg-" + tag + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline LabelMap random_labels(int h, int w, int classes, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> pick(0, classes - 1);
    LabelMap m(h, w);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<std::uint8_t>(pick(rng));
    return m;
}

}  // namespace boxseg::testing
