#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "birdcount/geometry.hpp"
#include "birdcount/io.hpp"

namespace birdcount {

/// One manually clicked bird, in mosaic pixel coordinates.
struct PointAnnotation {
    int x = 0;
    int y = 0;
    std::string island;
    std::string annotator;

    friend bool operator==(const PointAnnotation&, const PointAnnotation&) = default;
};

/// Pseudo-box synthesised around a point annotation.
///
/// `box` is in the coordinate frame of whatever raster it is attached to
/// (tile-local inside an AnnotatedTile); `source_point` always keeps the
/// original mosaic coordinates.
struct GroundTruthBox {
    PixelBox box;
    PointAnnotation source_point;
    bool clipped = false;

    friend bool operator==(const GroundTruthBox&, const GroundTruthBox&) = default;
};

struct ImageSize {
    int width = 0;
    int height = 0;
};

struct IngestConfig {
    int pseudo_box_size = 50;
    int supertile_size = 1500;
};

struct AnnotatedTile {
    std::string island;
    int grid_col = 0;
    int grid_row = 0;
    Raster pixels;
    std::vector<GroundTruthBox> boxes;

    PixelBox bounds() const { return PixelBox(0, 0, pixels.cols, pixels.rows); }
};

/// Parses the `island,x,y,annotator` CSV. When `bounds` is non-empty every
/// point's island must appear in it and the point must lie inside that
/// island's mosaic.
std::vector<PointAnnotation> parse_points(std::string_view csv_text,
                                          const std::map<std::string, ImageSize>& bounds = {});
std::vector<PointAnnotation> parse_points_file(const std::filesystem::path& path,
                                               const std::map<std::string, ImageSize>& bounds = {});
std::string format_points(const std::vector<PointAnnotation>& points);

/// Centres a size x size square on the point and clips it to `bounds`.
/// Odd sizes put the extra pixel on the max side.
GroundTruthBox point_to_pseudobox(const PointAnnotation& p, int size, const PixelBox& bounds);

/// Cuts the mosaic into a non-overlapping grid of supertiles and keeps
/// those holding at least one annotation. Boxes are assigned to the tile
/// containing their source point, then clipped to that tile. Edge tiles
/// keep their natural (smaller) size. Output is ordered row-major.
std::vector<AnnotatedTile> extract_supertiles(const std::string& island, const Raster& mosaic,
                                              const std::vector<PointAnnotation>& points,
                                              const IngestConfig& cfg = {}, int workers = 1);

/// Inverse of the pseudo-box construction for boxes clipped only at the
/// raster's own edges. Returns the point in the box's coordinate frame.
std::pair<int, int> recover_point(const PixelBox& box, int size);

struct TileRecord {
    std::string image_path;  // relative to the survey root
    std::string boxes_path;
    std::string sha256;
    int box_count = 0;
    int width = 0;
    int height = 0;
    int grid_row = 0;
    int grid_col = 0;

    /// "<island>/tile_<row>_<col>", the identity used for backend lookups.
    std::string image_id() const;

    friend bool operator==(const TileRecord&, const TileRecord&) = default;
};

struct IslandRecord {
    std::string name;
    std::string annotator;
    std::vector<TileRecord> tiles;

    int annotation_count() const;

    friend bool operator==(const IslandRecord&, const IslandRecord&) = default;
};

struct SurveyManifest {
    std::filesystem::path root;
    IngestConfig config;
    std::vector<IslandRecord> islands;

    int tile_count() const;
    int annotation_count() const;
    const IslandRecord& island(std::string_view name) const;
};

std::string tile_stem(const std::string& island, int row, int col);

/// Writes every tile as PNG plus box sidecar under `dir` and a manifest.json
/// at its root. Tiles may come from several islands in any order.
SurveyManifest write_manifest(const std::vector<AnnotatedTile>& tiles, const std::filesystem::path& dir,
                              const IngestConfig& cfg = {});

/// Reads manifest.json and verifies that every tile file exists and matches
/// its recorded checksum and box count.
SurveyManifest load_manifest(const std::filesystem::path& dir);

std::vector<GroundTruthBox> read_boxes_csv(std::string_view csv_text, const std::string& island,
                                           const std::string& annotator, int origin_x, int origin_y,
                                           int box_size);
std::string format_boxes_csv(const std::vector<GroundTruthBox>& boxes);

AnnotatedTile load_tile(const SurveyManifest& manifest, const IslandRecord& island, const TileRecord& tile);

}  // namespace birdcount
