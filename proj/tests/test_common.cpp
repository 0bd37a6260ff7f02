#include "boxseg/common.hpp"
#include "helpers.hpp"

#include <doctest.h>

using namespace boxseg;

TEST_SUITE("common") {

TEST_CASE("box geometry") {
    const Box b{2, 1, 3, 5, 7, std::nullopt};
    CHECK(b.width() == 4);
    CHECK(b.height() == 4);
    CHECK(b.area() == 16);
    CHECK(b.contains(1, 3));
    CHECK_FALSE(b.contains(5, 3));
    CHECK(b.inside_canvas(7, 5));
    CHECK_FALSE(b.inside_canvas(6, 5));
    CHECK(b.intersects(Box{1, 4, 6, 9, 9, std::nullopt}));
    CHECK_FALSE(b.intersects(Box{1, 5, 3, 9, 9, std::nullopt}));
    CHECK(describe(b) == "box(class=2, x0=1, y0=3, x1=5, y1=7)");
}

TEST_CASE("atomic write and read back") {
    testing::TempDir dir("common");
    const auto path = dir / "file.txt";
    write_file_atomic(path, "first");
    write_file_atomic(path, "second");
    CHECK(read_file(path) == "second");
    CHECK_FALSE(std::filesystem::exists(dir / "file.txt.tmp"));
    CHECK_THROWS_AS(read_file(dir / "absent.txt"), LoadError);
}

TEST_CASE("fnv1a reference values") {
    CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a("foobar") == 0x85944171f73967e8ULL);
}

}
