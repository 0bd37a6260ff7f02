#include "boxseg/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

namespace boxseg {

namespace {

constexpr int kMaxPlacementAttempts = 64;
constexpr const char* kManifestMagic = "boxseg-dataset";
constexpr int kManifestVersion = 1;

std::string sample_id(int index) {
    std::ostringstream os;
    os << 's' << std::setw(5) << std::setfill('0') << index;
    return os.str();
}

float quantize(float v) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    return std::round(c * 255.0f) / 255.0f;
}

}  // namespace

bool ImageSample::operator==(const ImageSample& o) const {
    return id == o.id && height == o.height && width == o.width && pixels.rows() == o.pixels.rows() &&
           pixels.cols() == o.pixels.cols() && pixels == o.pixels && gt_labels.rows() == o.gt_labels.rows() &&
           gt_labels.cols() == o.gt_labels.cols() && (gt_labels == o.gt_labels).all() && boxes == o.boxes;
}

std::string to_string(ShapeKind kind) {
    switch (kind) {
        case ShapeKind::Block: return "block";
        case ShapeKind::Disc: return "disc";
        case ShapeKind::Wedge: return "wedge";
    }
    return "unknown";
}

ShapeKind shape_kind_from_string(const std::string& name) {
    if (name == "block") return ShapeKind::Block;
    if (name == "disc") return ShapeKind::Disc;
    if (name == "wedge") return ShapeKind::Wedge;
    throw Error("unknown shape kind: " + name);
}

void SynthConfig::validate() const {
    if (canvas <= 0) throw Error("synth config: canvas must be positive");
    if (channels != 1 && channels != 3) throw Error("synth config: channels must be 1 or 3");
    if (class_shapes.empty()) throw Error("synth config: class_shapes is empty");
    if (num_classes() > 254) throw Error("synth config: too many classes");
    for (const auto& kinds : class_shapes)
        if (kinds.empty()) throw Error("synth config: a class has no shape kinds");
    if (min_objects < 0 || max_objects < min_objects) throw Error("synth config: bad objects range");
    if (min_side < 8) throw Error("synth config: min_side must be at least 8");
    if (max_side < min_side || max_side > canvas) throw Error("synth config: bad side range");
    if (!class_foreground.empty() && class_foreground.size() != class_shapes.size())
        throw Error("synth config: class_foreground must list one range per class");
    if (noise < 0.0f) throw Error("synth config: noise must be non-negative");
    if (samples < 0) throw Error("synth config: samples must be non-negative");
}

Box tight_box(const BinaryMask& mask, int class_id) {
    int x0 = static_cast<int>(mask.cols()), y0 = static_cast<int>(mask.rows()), x1 = -1, y1 = -1;
    for (Eigen::Index y = 0; y < mask.rows(); ++y)
        for (Eigen::Index x = 0; x < mask.cols(); ++x)
            if (mask(y, x)) {
                x0 = std::min<int>(x0, static_cast<int>(x));
                y0 = std::min<int>(y0, static_cast<int>(y));
                x1 = std::max<int>(x1, static_cast<int>(x));
                y1 = std::max<int>(y1, static_cast<int>(y));
            }
    if (x1 < 0) throw Error("tight_box: mask has no set pixels");
    return Box{class_id, x0, y0, x1 + 1, y1 + 1, std::nullopt};
}

BinaryMask rasterize_shape(ShapeKind kind, int width, int height, int orientation) {
    BinaryMask m(height, width);
    switch (kind) {
        case ShapeKind::Block:
            m.setConstant(true);
            break;
        case ShapeKind::Disc: {
            const double rx = width / 2.0, ry = height / 2.0;
            for (int y = 0; y < height; ++y)
                for (int x = 0; x < width; ++x) {
                    const double dx = (x + 0.5 - rx) / rx, dy = (y + 0.5 - ry) / ry;
                    m(y, x) = dx * dx + dy * dy <= 1.0;
                }
            break;
        }
        case ShapeKind::Wedge: {
            // Hypotenuse runs through the centers of the two acute-corner pixels.
            const long a = width - 1, b = height - 1;
            for (int y = 0; y < height; ++y)
                for (int x = 0; x < width; ++x) {
                    const long i = (orientation & 1) ? a - x : x;
                    const long j = (orientation & 2) ? b - y : y;
                    m(y, x) = a == 0 || b == 0 || i * b + j * a <= a * b;
                }
            break;
        }
    }
    return m;
}

namespace {

struct Placement {
    int x = 0;
    int y = 0;
};

ImageSample generate_one(const SynthConfig& cfg, int index) {
    std::mt19937_64 rng(cfg.seed ^ static_cast<std::uint64_t>(index));
    const int S = cfg.canvas;
    const int C = cfg.channels;
    const int num_fg = static_cast<int>(cfg.class_shapes.size());

    ImageSample s;
    s.id = sample_id(index);
    s.height = S;
    s.width = S;
    s.pixels.resize(C, static_cast<Eigen::Index>(S) * S);
    s.gt_labels = LabelMap::Zero(S, S);

    auto uniform = [&rng](float lo, float hi) { return std::uniform_real_distribution<float>(lo, hi)(rng); };
    auto uniform_int = [&rng](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

    for (int c = 0; c < C; ++c) s.pixels.row(c).setConstant(uniform(cfg.background.lo, cfg.background.hi));

    const int objects = uniform_int(cfg.min_objects, cfg.max_objects);
    for (int obj = 0; obj < objects; ++obj) {
        const int class_id = uniform_int(1, num_fg);
        const auto& kinds = cfg.class_shapes[class_id - 1];
        const int kind_index = uniform_int(0, static_cast<int>(kinds.size()) - 1);
        const int orientation = uniform_int(0, 3);

        bool placed = false;
        for (int attempt = 0; attempt < kMaxPlacementAttempts && !placed; ++attempt) {
            const int w = uniform_int(cfg.min_side, cfg.max_side);
            const int h = uniform_int(cfg.min_side, cfg.max_side);
            const BinaryMask shape = rasterize_shape(kinds[kind_index], w, h, orientation);

            std::vector<Placement> valid;
            for (int y = 0; y + h <= S; ++y)
                for (int x = 0; x + w <= S; ++x) {
                    bool ok = true;
                    if (!cfg.allow_overlap) {
                        const Box candidate{class_id, x, y, x + w, y + h, std::nullopt};
                        for (const Box& b : s.boxes)
                            if (b.intersects(candidate)) {
                                ok = false;
                                break;
                            }
                    } else {
                        for (int yy = 0; yy < h && ok; ++yy)
                            for (int xx = 0; xx < w; ++xx)
                                if (shape(yy, xx) && s.gt_labels(y + yy, x + xx) != 0) {
                                    ok = false;
                                    break;
                                }
                    }
                    if (ok) valid.push_back({x, y});
                }
            if (valid.empty()) continue;

            const Placement p = valid[std::uniform_int_distribution<std::size_t>(0, valid.size() - 1)(rng)];
            const IntensityRange fg =
                cfg.class_foreground.empty() ? cfg.foreground : cfg.class_foreground[class_id - 1];
            Eigen::VectorXf value(C);
            for (int c = 0; c < C; ++c) value(c) = uniform(fg.lo, fg.hi);

            BinaryMask full = BinaryMask::Constant(S, S, false);
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx)
                    if (shape(yy, xx)) {
                        const int px = p.x + xx, py = p.y + yy;
                        full(py, px) = true;
                        s.gt_labels(py, px) = static_cast<std::uint8_t>(class_id);
                        s.pixels.col(static_cast<Eigen::Index>(py) * S + px) = value;
                    }
            Box box = tight_box(full, class_id);
            if (kinds.size() > 1) box.sub_class_id = kind_index;
            s.boxes.push_back(box);
            placed = true;
        }
        if (!placed)
            throw GenerationError("sample " + s.id + ": could not place object " + std::to_string(obj) +
                                  " after " + std::to_string(kMaxPlacementAttempts) + " attempts");
    }

    for (Eigen::Index i = 0; i < s.pixels.size(); ++i)
        s.pixels.data()[i] = quantize(s.pixels.data()[i] + uniform(-cfg.noise, cfg.noise));
    return s;
}

}  // namespace

std::vector<ImageSample> generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    std::vector<ImageSample> out;
    out.reserve(static_cast<std::size_t>(cfg.samples));
    for (int i = 0; i < cfg.samples; ++i) out.push_back(generate_one(cfg, i));
    return out;
}

void write_pgm(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& bytes) {
    std::ostringstream os;
    os << "P5\n" << width << ' ' << height << "\n255\n";
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    write_file_atomic(path, os.str());
}

std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, int& width, int& height) {
    if (!std::filesystem::exists(path)) throw LoadError("missing raster: " + path.string());
    const std::string data = read_file(path);
    std::size_t pos = 0;
    auto next_token = [&]() -> std::string {
        while (pos < data.size()) {
            if (data[pos] == '#') {
                while (pos < data.size() && data[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(data[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
        const std::size_t start = pos;
        while (pos < data.size() && !std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
        return data.substr(start, pos - start);
    };
    try {
        if (next_token() != "P5") throw FormatError("not a binary graymap: " + path.string());
        width = std::stoi(next_token());
        height = std::stoi(next_token());
        if (std::stoi(next_token()) != 255) throw FormatError("unsupported maxval in " + path.string());
    } catch (const std::logic_error&) {
        throw FormatError("corrupt graymap header: " + path.string());
    }
    ++pos;  // single whitespace before the raster
    const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    if (width <= 0 || height <= 0 || data.size() < pos + n) throw FormatError("truncated raster: " + path.string());
    return {data.begin() + static_cast<std::ptrdiff_t>(pos), data.begin() + static_cast<std::ptrdiff_t>(pos + n)};
}

void save_dataset(const std::vector<ImageSample>& samples, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ostringstream manifest;
    manifest << kManifestMagic << ' ' << kManifestVersion << '\n';
    manifest << "samples " << samples.size() << '\n';
    for (const ImageSample& s : samples) {
        const std::size_t n = static_cast<std::size_t>(s.height) * s.width;
        const std::string label_file = s.id + "_labels.pgm";
        std::vector<std::uint8_t> bytes(s.gt_labels.data(), s.gt_labels.data() + n);
        write_pgm(dir / label_file, s.width, s.height, bytes);

        manifest << "sample " << s.id << ' ' << s.width << ' ' << s.height << ' ' << s.channels() << ' ' << label_file;
        for (int c = 0; c < s.channels(); ++c) {
            const std::string plane_file = s.id + "_c" + std::to_string(c) + ".pgm";
            for (std::size_t i = 0; i < n; ++i)
                bytes[i] = static_cast<std::uint8_t>(std::lround(s.pixels(c, static_cast<Eigen::Index>(i)) * 255.0f));
            write_pgm(dir / plane_file, s.width, s.height, bytes);
            manifest << ' ' << plane_file;
        }
        manifest << '\n';
        for (const Box& b : s.boxes) {
            manifest << "box " << b.class_id << ' ' << b.x0 << ' ' << b.y0 << ' ' << b.x1 << ' ' << b.y1;
            if (b.sub_class_id) manifest << ' ' << *b.sub_class_id;
            manifest << '\n';
        }
    }
    write_file_atomic(dir / "manifest.txt", manifest.str());
}

std::vector<ImageSample> load_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.txt";
    if (!std::filesystem::exists(manifest_path)) throw LoadError("missing manifest: " + manifest_path.string());
    std::istringstream in(read_file(manifest_path));

    std::string magic;
    int version = 0;
    std::size_t count = 0;
    std::string key;
    if (!(in >> magic >> version) || magic != kManifestMagic || version != kManifestVersion)
        throw FormatError("unrecognized manifest header in " + manifest_path.string());
    if (!(in >> key >> count) || key != "samples") throw FormatError("manifest lacks sample count");

    std::vector<ImageSample> out;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        ls >> key;
        if (key == "sample") {
            ImageSample s;
            int channels = 0;
            std::string label_file;
            if (!(ls >> s.id >> s.width >> s.height >> channels >> label_file) || s.width <= 0 || s.height <= 0 ||
                channels < 1)
                throw FormatError("malformed sample record: " + line);
            int w = 0, h = 0;
            auto bytes = read_pgm(dir / label_file, w, h);
            if (w != s.width || h != s.height)
                throw FormatError("dimension mismatch between manifest and raster " + label_file);
            s.gt_labels = Eigen::Map<LabelMap>(bytes.data(), h, w);
            s.pixels.resize(channels, static_cast<Eigen::Index>(w) * h);
            for (int c = 0; c < channels; ++c) {
                std::string plane_file;
                if (!(ls >> plane_file)) throw FormatError("sample " + s.id + " lists too few planes");
                bytes = read_pgm(dir / plane_file, w, h);
                if (w != s.width || h != s.height)
                    throw FormatError("dimension mismatch between manifest and raster " + plane_file);
                for (std::size_t i = 0; i < bytes.size(); ++i)
                    s.pixels(c, static_cast<Eigen::Index>(i)) = static_cast<float>(bytes[i]) / 255.0f;
            }
            out.push_back(std::move(s));
        } else if (key == "box") {
            if (out.empty()) throw FormatError("box record before any sample");
            Box b;
            if (!(ls >> b.class_id >> b.x0 >> b.y0 >> b.x1 >> b.y1)) throw FormatError("malformed box record: " + line);
            int sub = 0;
            if (ls >> sub) b.sub_class_id = sub;
            if (!b.inside_canvas(out.back().height, out.back().width))
                throw FormatError("box outside canvas in sample " + out.back().id);
            out.back().boxes.push_back(b);
        } else {
            throw FormatError("unknown manifest record: " + key);
        }
    }
    if (out.size() != count) throw FormatError("manifest sample count does not match records");
    return out;
}

}  // namespace boxseg
