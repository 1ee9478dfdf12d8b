#include <doctest.h>

#include <fstream>
#include <functional>
#include <random>

#include "birdcount/errors.hpp"
#include "birdcount/ingest.hpp"
#include "birdcount/io.hpp"
#include "support.hpp"

using namespace birdcount;
using test_support::TempDir;

namespace {

Raster noise_raster(int w, int h, std::uint64_t seed) {
    Raster r(h, w, CV_8UC3);
    cv::RNG rng(seed);
    rng.fill(r, cv::RNG::UNIFORM, 0, 256);
    return r;
}

std::string message_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const std::exception& e) {
        return e.what();
    }
    return {};
}

}  // namespace

TEST_CASE("point csv parses with BOM and CRLF") {
    const std::string text = "\xEF\xBB\xBFisland,x,y,annotator\r\nDepot,10,20,ann\r\nFunnel,0,0,ann2\r\n";
    const auto pts = parse_points(text);
    REQUIRE(pts.size() == 2);
    CHECK(pts[0] == PointAnnotation{10, 20, "Depot", "ann"});
    CHECK(pts[1].island == "Funnel");
    CHECK(parse_points(format_points(pts)) == pts);
}

TEST_CASE("point csv errors name the offending line") {
    CHECK(message_of([] { parse_points("island,x,y\nA,1,2\n"); }).find("line 1") != std::string::npos);
    CHECK(message_of([] { parse_points("island,x,y,annotator\nA,1,2,a\nA,x,2,a\n"); }).find("line 3") !=
          std::string::npos);
    CHECK_THROWS_AS(parse_points("island,x,y,annotator\nA,1,2\n"), DataError);
    CHECK_THROWS_AS(parse_points("island,x,y,annotator\nA,1.5,2,a\n"), DataError);
}

TEST_CASE("points outside the mosaic are rejected together") {
    const std::map<std::string, ImageSize> bounds{{"A", {100, 50}}};
    const std::string text = "island,x,y,annotator\nA,99,49,a\nA,100,10,a\nA,5,50,a\n";
    const auto msg = message_of([&] { parse_points(text, bounds); });
    CHECK(msg.find("line 3") != std::string::npos);
    CHECK(msg.find("line 4") != std::string::npos);
    CHECK_THROWS_AS(parse_points("island,x,y,annotator\nB,1,1,a\n", bounds), DataError);
    CHECK(parse_points("island,x,y,annotator\nA,99,49,a\n", bounds).size() == 1);
}

TEST_CASE("pseudo-box is centred and clipped at the raster edge") {
    const PixelBox bounds(0, 0, 200, 100);
    const auto inner = point_to_pseudobox({100, 50, "A", "a"}, 50, bounds);
    CHECK(inner.box == PixelBox(75, 25, 125, 75));
    CHECK_FALSE(inner.clipped);
    const auto corner = point_to_pseudobox({3, 98, "A", "a"}, 50, bounds);
    CHECK(corner.box == PixelBox(0, 73, 28, 100));
    CHECK(corner.clipped);
    CHECK(point_to_pseudobox({100, 50, "A", "a"}, 51, bounds).box == PixelBox(75, 25, 126, 76));
}

TEST_CASE("points are recovered from boxes clipped at either edge") {
    const PixelBox bounds(0, 0, 300, 300);
    for (int size : {49, 50}) {
        for (int x : {0, 1, 10, 24, 25, 26, 150, 274, 275, 299}) {
            for (int y : {0, 12, 150, 299}) {
                const auto g = point_to_pseudobox({x, y, "A", "a"}, size, bounds);
                CHECK(recover_point(g.box, size) == std::pair{x, y});
            }
        }
    }
}

TEST_CASE("supertiles keep only annotated cells, in row-major order, with local boxes") {
    const Raster mosaic = noise_raster(3200, 1700, 1);
    const std::vector<PointAnnotation> pts{{3100, 1650, "A", "a"}, {10, 10, "A", "a"}, {1499, 700, "A", "a"},
                                           {1500, 700, "A", "a"}};
    const auto tiles = extract_supertiles("A", mosaic, pts, IngestConfig{50, 1500});
    REQUIRE(tiles.size() == 3);
    CHECK(tiles[0].grid_row == 0);
    CHECK(tiles[0].grid_col == 0);
    CHECK(tiles[1].grid_col == 1);
    CHECK(tiles[2].grid_row == 1);
    CHECK(tiles[2].grid_col == 2);
    // edge tile keeps its natural size
    CHECK(tiles[2].pixels.cols == 200);
    CHECK(tiles[2].pixels.rows == 200);
    REQUIRE(tiles[0].boxes.size() == 2);
    // the point on the tile seam stays whole in its own tile and is clipped there
    CHECK(tiles[0].boxes[1].box == PixelBox(1474, 675, 1500, 725));
    CHECK(tiles[0].boxes[1].clipped);
    CHECK(tiles[1].boxes[0].box == PixelBox(0, 675, 25, 725));
    CHECK(tiles[1].boxes[0].source_point == pts[3]);
    // tile pixels are an exact copy of the mosaic region
    CHECK(test_support::same_pixels(tiles[2].pixels, mosaic(cv::Rect(3000, 1500, 200, 200))));
    for (const auto& t : tiles) {
        for (const auto& b : t.boxes) CHECK(t.bounds().contains(b.box));
    }
}

TEST_CASE("supertile extraction does not depend on the worker count") {
    const Raster mosaic = noise_raster(2000, 2000, 2);
    std::vector<PointAnnotation> pts;
    std::mt19937_64 rng(3);
    for (int i = 0; i < 300; ++i) {
        pts.push_back({std::uniform_int_distribution<int>(0, 1999)(rng), std::uniform_int_distribution<int>(0, 1999)(rng),
                       "A", "a"});
    }
    const auto a = extract_supertiles("A", mosaic, pts, IngestConfig{50, 700}, 1);
    const auto b = extract_supertiles("A", mosaic, pts, IngestConfig{50, 700}, 4);
    REQUIRE(a.size() == b.size());
    std::size_t total = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].boxes == b[i].boxes);
        total += a[i].boxes.size();
    }
    CHECK(total == pts.size());
}

TEST_CASE("manifest round trip preserves tiles and boxes") {
    TempDir dir("manifest");
    const Raster mosaic = noise_raster(1600, 900, 4);
    const std::vector<PointAnnotation> pts{{30, 30, "B", "x"}, {800, 400, "B", "x"}, {1550, 880, "B", "x"}};
    const Raster other = noise_raster(500, 500, 5);
    auto tiles = extract_supertiles("B", mosaic, pts, IngestConfig{50, 1000});
    auto more = extract_supertiles("A", other, {{250, 250, "A", "y"}}, IngestConfig{50, 1000});
    tiles.insert(tiles.begin(), more.begin(), more.end());

    const auto written = write_manifest(tiles, dir.path(), IngestConfig{50, 1000});
    const auto loaded = load_manifest(dir.path());
    CHECK(loaded.islands == written.islands);
    CHECK(loaded.tile_count() == 3);
    CHECK(loaded.annotation_count() == 4);
    CHECK(loaded.islands[0].name == "A");
    CHECK(loaded.island("B").annotator == "x");

    const auto& isl = loaded.island("B");
    for (const auto& rec : isl.tiles) {
        const AnnotatedTile t = load_tile(loaded, isl, rec);
        const auto it = std::find_if(tiles.begin(), tiles.end(), [&](const AnnotatedTile& o) {
            return o.island == "B" && o.grid_row == rec.grid_row && o.grid_col == rec.grid_col;
        });
        REQUIRE(it != tiles.end());
        CHECK(t.boxes == it->boxes);
        CHECK(test_support::same_pixels(t.pixels, it->pixels));
    }
}

TEST_CASE("manifest loading detects missing and corrupted files") {
    TempDir dir("corrupt");
    const auto tiles = extract_supertiles("A", noise_raster(400, 400, 6), {{100, 100, "A", "a"}}, IngestConfig{50, 400});
    const auto m = write_manifest(tiles, dir.path(), IngestConfig{50, 400});
    const auto tile_path = dir.path() / m.islands[0].tiles[0].image_path;

    SUBCASE("checksum") {
        write_png(tile_path, noise_raster(400, 400, 7));
        CHECK(message_of([&] { load_manifest(dir.path()); }).find("checksum") != std::string::npos);
    }
    SUBCASE("missing tile") {
        std::filesystem::remove(tile_path);
        const auto msg = message_of([&] { load_manifest(dir.path()); });
        CHECK(msg.find(m.islands[0].tiles[0].image_path) != std::string::npos);
        CHECK_THROWS_AS(load_manifest(dir.path()), DataError);
    }
    SUBCASE("box count") {
        write_text(dir.path() / m.islands[0].tiles[0].boxes_path, "xmin,ymin,xmax,ymax,clipped\n");
        CHECK_THROWS_AS(load_tile(load_manifest(dir.path()), m.islands[0], m.islands[0].tiles[0]), DataError);
    }
    SUBCASE("no manifest") { CHECK_THROWS_AS(load_manifest(dir / "nowhere"), DataError); }
}

TEST_CASE("box sidecar parsing") {
    const auto boxes = read_boxes_csv("xmin,ymin,xmax,ymax,clipped\n0,10,30,60,1\n5,5,55,55,0\n", "A", "a", 1500, 0, 50);
    REQUIRE(boxes.size() == 2);
    CHECK(boxes[0].clipped);
    CHECK(boxes[0].source_point.x == 1500 + 5);
    CHECK(boxes[1].source_point == PointAnnotation{1530, 30, "A", "a"});
    CHECK(read_boxes_csv(format_boxes_csv(boxes), "A", "a", 1500, 0, 50) == boxes);
    CHECK_THROWS_AS(read_boxes_csv("xmin,ymin,xmax,ymax,clipped\n5,5,5,55,0\n", "A", "a", 0, 0, 50), DataError);
    CHECK_THROWS_AS(read_boxes_csv("x,y\n", "A", "a", 0, 0, 50), DataError);
}

TEST_CASE("io helpers") {
    const std::vector<std::uint8_t> bytes{0, 1, 2, 250, 255};
    for (std::size_t n = 0; n <= bytes.size(); ++n) {
        const std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<long>(n));
        CHECK(base64_decode(base64_encode(part)) == part);
    }
    CHECK(base64_encode({'M', 'a', 'n'}) == "TWFu");
    CHECK_THROWS_AS(base64_decode("T!Fu"), DataError);
    CHECK(sha256_hex({'a', 'b', 'c'}) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    int v = 0;
    CHECK(parse_int("-42", v));
    CHECK(v == -42);
    CHECK_FALSE(parse_int("42x", v));
    CHECK_FALSE(parse_int("", v));
    const Raster r = noise_raster(31, 17, 8);
    CHECK(test_support::same_pixels(decode_png(encode_png(r)), r));
}
