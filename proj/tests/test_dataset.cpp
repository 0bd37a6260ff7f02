#include "boxseg/dataset.hpp"
#include "helpers.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numbers>

using namespace boxseg;

namespace {

long count(const BinaryMask& m) { return m.cast<long>().sum(); }

/// Pixel-center ellipse membership written out directly from the inequality.
long disc_oracle(int w, int h) {
    long n = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double u = (2.0 * x + 1.0 - w) / w, v = (2.0 * y + 1.0 - h) / h;
            if (u * u + v * v <= 1.0) ++n;
        }
    return n;
}

SynthConfig small_config(int samples) {
    SynthConfig cfg;
    cfg.samples = samples;
    return cfg;
}

}  // namespace

TEST_SUITE("dataset") {

TEST_CASE("tight_box examples") {
    BinaryMask m = BinaryMask::Constant(8, 8, false);
    m(3, 5) = true;
    CHECK(tight_box(m, 1) == Box{1, 5, 3, 6, 4, std::nullopt});

    CHECK(tight_box(BinaryMask::Constant(6, 9, true), 2) == Box{2, 0, 0, 9, 6, std::nullopt});

    BinaryMask corners = BinaryMask::Constant(6, 9, false);
    corners(0, 0) = true;
    corners(5, 8) = true;
    CHECK(tight_box(corners, 3) == Box{3, 0, 0, 9, 6, std::nullopt});

    CHECK_THROWS_AS(tight_box(BinaryMask::Constant(4, 4, false), 1), Error);
}

TEST_CASE("shape rasterization") {
    CHECK(count(rasterize_shape(ShapeKind::Block, 10, 10)) == 100);

    const long disc = count(rasterize_shape(ShapeKind::Disc, 32, 32));
    CHECK(disc == disc_oracle(32, 32));
    CHECK(disc / 1024.0 >= 0.76);
    CHECK(disc / 1024.0 <= 0.80);

    double fill_sum = 0;
    int shapes = 0;
    for (int w = 16; w <= 32; ++w)
        for (int h = 16; h <= 32; ++h) {
            CHECK(count(rasterize_shape(ShapeKind::Disc, w, h)) == disc_oracle(w, h));
            const double disc_fill = static_cast<double>(disc_oracle(w, h)) / (w * h);
            // pixel-center sampling peaks at 0.8125 for a 16x16 box
            CHECK(std::abs(disc_fill - std::numbers::pi / 4) <= 0.03);
            fill_sum += disc_fill;
            ++shapes;
            for (int o = 0; o < 4; ++o) {
                const BinaryMask wedge = rasterize_shape(ShapeKind::Wedge, w, h, o);
                const double fill = static_cast<double>(count(wedge)) / (w * h);
                CHECK(std::abs(fill - 0.5) <= 1.0 / std::min(w, h));
                // the shape touches all four sides of its box
                CHECK(tight_box(wedge, 1) == Box{1, 0, 0, w, h, std::nullopt});
            }
        }
    CHECK(std::abs(fill_sum / shapes - std::numbers::pi / 4) <= 0.02);
}

TEST_CASE("wedge orientations are mirror images") {
    const BinaryMask base = rasterize_shape(ShapeKind::Wedge, 20, 14, 0);
    CHECK((rasterize_shape(ShapeKind::Wedge, 20, 14, 1) == base.rowwise().reverse()).all());
    CHECK((rasterize_shape(ShapeKind::Wedge, 20, 14, 2) == base.colwise().reverse()).all());
}

TEST_CASE("generated samples satisfy the corpus invariants") {
    const auto samples = generate_synthetic(small_config(40));
    REQUIRE(samples.size() == 40);
    for (const ImageSample& s : samples) {
        CHECK(s.height == 64);
        CHECK(s.width == 64);
        CHECK(s.pixels.minCoeff() >= 0.0f);
        CHECK(s.pixels.maxCoeff() <= 1.0f);
        CHECK(s.gt_labels.maxCoeff() <= 3);
        CHECK(!s.boxes.empty());
        CHECK(s.boxes.size() <= 3);
        long labeled = 0;
        for (std::size_t i = 0; i < s.boxes.size(); ++i) {
            const Box& b = s.boxes[i];
            CHECK(b.inside_canvas(64, 64));
            const BinaryMask inside = (s.gt_labels == b.class_id).block(b.y0, b.x0, b.height(), b.width());
            BinaryMask full = BinaryMask::Constant(64, 64, false);
            full.block(b.y0, b.x0, b.height(), b.width()) = inside;
            CHECK(tight_box(full, b.class_id) == b);
            for (std::size_t j = i + 1; j < s.boxes.size(); ++j) CHECK_FALSE(b.intersects(s.boxes[j]));
            labeled += count(inside);
        }
        CHECK(labeled == (s.gt_labels != 0).cast<long>().sum());
    }
}

TEST_CASE("block class fills its boxes exactly") {
    for (const ImageSample& s : generate_synthetic(small_config(20)))
        for (const Box& b : s.boxes)
            if (b.class_id == 1) CHECK((s.gt_labels.block(b.y0, b.x0, b.height(), b.width()) == 1).all());
}

TEST_CASE("generation is deterministic and per-sample streams are independent") {
    const auto a = generate_synthetic(small_config(12));
    const auto b = generate_synthetic(small_config(12));
    CHECK(a == b);
    const auto prefix = generate_synthetic(small_config(5));
    for (std::size_t i = 0; i < prefix.size(); ++i) CHECK(prefix[i] == a[i]);
    SynthConfig other = small_config(12);
    other.seed = 43;
    CHECK_FALSE(generate_synthetic(other) == a);
}

TEST_CASE("mixed-shape classes record the drawn shape") {
    SynthConfig cfg = small_config(30);
    cfg.class_shapes = {{ShapeKind::Block, ShapeKind::Disc}, {ShapeKind::Wedge}};
    bool saw[2] = {false, false};
    for (const ImageSample& s : generate_synthetic(cfg))
        for (const Box& b : s.boxes) {
            if (b.class_id == 1) {
                REQUIRE(b.sub_class_id.has_value());
                saw[*b.sub_class_id] = true;
                const long filled = (s.gt_labels.block(b.y0, b.x0, b.height(), b.width()) == 1).cast<long>().sum();
                if (*b.sub_class_id == 0) CHECK(filled == b.area());
                else CHECK(filled < b.area());
            } else {
                CHECK_FALSE(b.sub_class_id.has_value());
            }
        }
    CHECK(saw[0]);
    CHECK(saw[1]);
}

TEST_CASE("overlap mode places every object") {
    SynthConfig cfg = small_config(30);
    cfg.allow_overlap = true;
    cfg.min_objects = 3;
    bool any_overlap = false;
    for (const ImageSample& s : generate_synthetic(cfg)) {
        CHECK(s.boxes.size() == 3);
        for (std::size_t i = 0; i < s.boxes.size(); ++i)
            for (std::size_t j = i + 1; j < s.boxes.size(); ++j) any_overlap |= s.boxes[i].intersects(s.boxes[j]);
    }
    CHECK(any_overlap);
}

TEST_CASE("crowded canvas fails naming the sample") {
    SynthConfig cfg = small_config(3);
    cfg.canvas = 40;
    cfg.min_objects = 3;
    cfg.min_side = 30;
    cfg.max_side = 32;
    try {
        generate_synthetic(cfg);
        FAIL("expected a generation error");
    } catch (const GenerationError& e) {
        CHECK(std::string(e.what()).find("sample s00000") != std::string::npos);
    }
}

TEST_CASE("config validation") {
    SynthConfig cfg;
    cfg.min_side = 6;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = SynthConfig{};
    cfg.max_side = 80;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = SynthConfig{};
    cfg.channels = 2;
    CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("save and load round trip") {
    testing::TempDir dir("dataset");
    SynthConfig cfg = small_config(10);
    cfg.channels = 3;
    const auto samples = generate_synthetic(cfg);
    save_dataset(samples, dir.path());
    CHECK(load_dataset(dir.path()) == samples);

    testing::TempDir again("dataset");
    save_dataset(samples, again.path());
    CHECK(read_file(dir / "manifest.txt") == read_file(again / "manifest.txt"));
}

TEST_CASE("empty dataset round trip") {
    testing::TempDir dir("dataset");
    save_dataset({}, dir.path());
    CHECK(load_dataset(dir.path()).empty());
}

TEST_CASE("missing raster is named in the error") {
    testing::TempDir dir("dataset");
    save_dataset(generate_synthetic(small_config(2)), dir.path());
    std::filesystem::path victim;
    for (const auto& entry : std::filesystem::directory_iterator(dir.path()))
        if (entry.path().extension() == ".pgm") victim = entry.path();
    REQUIRE(!victim.empty());
    std::filesystem::remove(victim);
    try {
        load_dataset(dir.path());
        FAIL("expected a load error");
    } catch (const LoadError& e) {
        CHECK(std::string(e.what()).find(victim.filename().string()) != std::string::npos);
    }
}

TEST_CASE("raster dimension mismatch is a format error") {
    testing::TempDir dir("dataset");
    const auto samples = generate_synthetic(small_config(1));
    save_dataset(samples, dir.path());
    std::filesystem::path labels;
    for (const auto& entry : std::filesystem::directory_iterator(dir.path()))
        if (entry.path().filename().string().find("labels") != std::string::npos) labels = entry.path();
    REQUIRE(!labels.empty());
    write_pgm(labels, 8, 8, std::vector<std::uint8_t>(64, 0));
    CHECK_THROWS_AS(load_dataset(dir.path()), FormatError);
}

TEST_CASE("pgm round trip and corrupt header") {
    testing::TempDir dir("pgm");
    std::vector<std::uint8_t> bytes(12);
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<std::uint8_t>(i * 20);
    write_pgm(dir / "a.pgm", 4, 3, bytes);
    int w = 0, h = 0;
    CHECK(read_pgm(dir / "a.pgm", w, h) == bytes);
    CHECK(w == 4);
    CHECK(h == 3);
    std::ofstream(dir / "bad.pgm") << "P2\n4 3\n255\n";
    CHECK_THROWS_AS(read_pgm(dir / "bad.pgm", w, h), FormatError);
}

}
