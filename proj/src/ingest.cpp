#include "birdcount/ingest.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "birdcount/errors.hpp"
#include "birdcount/parallel.hpp"

namespace birdcount {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kPointsHeader = "island,x,y,annotator";
constexpr std::string_view kBoxesHeader = "xmin,ymin,xmax,ymax,clipped";

std::vector<std::string_view> split_lines(std::string_view text) {
    std::vector<std::string_view> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        lines.push_back(text.substr(start, end - start));
        start = end + 1;
    }
    return lines;
}

std::string_view strip_bom(std::string_view s) {
    if (s.size() >= 3 && s.substr(0, 3) == "\xEF\xBB\xBF") s.remove_prefix(3);
    return s;
}

std::string_view strip_cr(std::string_view s) {
    if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
    return s;
}

}  // namespace

std::vector<PointAnnotation> parse_points(std::string_view csv_text,
                                          const std::map<std::string, ImageSize>& bounds) {
    const auto lines = split_lines(strip_bom(csv_text));
    if (lines.empty() || strip_cr(lines[0]) != kPointsHeader) {
        throw DataError("point CSV: line 1: expected header '" + std::string(kPointsHeader) + "'");
    }
    std::vector<PointAnnotation> points;
    std::vector<std::string> out_of_bounds;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto line = strip_cr(lines[i]);
        if (line.empty()) continue;
        const std::size_t line_no = i + 1;
        const auto fields = split_csv_line(line);
        PointAnnotation p;
        if (fields.size() != 4 || fields[0].empty() || !parse_int(fields[1], p.x) ||
            !parse_int(fields[2], p.y)) {
            throw DataError("point CSV: line " + std::to_string(line_no) + ": malformed row '" +
                            std::string(line) + "'");
        }
        p.island = fields[0];
        p.annotator = fields[3];
        bool inside = p.x >= 0 && p.y >= 0;
        if (!bounds.empty()) {
            const auto it = bounds.find(p.island);
            if (it == bounds.end()) {
                throw DataError("point CSV: line " + std::to_string(line_no) + ": no mosaic for island '" +
                                p.island + "'");
            }
            inside = inside && p.x < it->second.width && p.y < it->second.height;
        }
        if (!inside) {
            out_of_bounds.push_back("line " + std::to_string(line_no) + " (" + std::to_string(p.x) + "," +
                                    std::to_string(p.y) + ")");
        }
        points.push_back(std::move(p));
    }
    if (!out_of_bounds.empty()) {
        std::string msg = "point CSV: coordinates outside mosaic bounds:";
        for (const auto& s : out_of_bounds) msg += " " + s;
        throw DataError(msg);
    }
    return points;
}

std::vector<PointAnnotation> parse_points_file(const fs::path& path,
                                               const std::map<std::string, ImageSize>& bounds) {
    return parse_points(read_text(path), bounds);
}

std::string format_points(const std::vector<PointAnnotation>& points) {
    std::ostringstream os;
    os << kPointsHeader << '\n';
    for (const auto& p : points) os << p.island << ',' << p.x << ',' << p.y << ',' << p.annotator << '\n';
    return os.str();
}

GroundTruthBox point_to_pseudobox(const PointAnnotation& p, int size, const PixelBox& bounds) {
    if (size < 1) throw UsageError("pseudo-box size must be positive");
    const int x0 = p.x - size / 2;
    const int y0 = p.y - size / 2;
    const PixelBox full(x0, y0, x0 + size, y0 + size);
    const auto clipped = clip(full, bounds);
    if (!clipped) {
        throw InvariantError("annotation (" + std::to_string(p.x) + "," + std::to_string(p.y) +
                             ") lies outside its raster");
    }
    return GroundTruthBox{*clipped, p, !(*clipped == full)};
}

std::pair<int, int> recover_point(const PixelBox& box, int size) {
    const int half = size / 2;
    const int x = box.xmin() > 0 ? box.xmin() + half : box.xmax() - (size - half);
    const int y = box.ymin() > 0 ? box.ymin() + half : box.ymax() - (size - half);
    return {x, y};
}

std::vector<AnnotatedTile> extract_supertiles(const std::string& island, const Raster& mosaic,
                                              const std::vector<PointAnnotation>& points,
                                              const IngestConfig& cfg, int workers) {
    if (mosaic.empty()) throw DataError("empty mosaic for island " + island);
    const int S = cfg.supertile_size;
    if (S < 1) throw UsageError("supertile size must be positive");
    const PixelBox mosaic_bounds(0, 0, mosaic.cols, mosaic.rows);
    const int cols = (mosaic.cols + S - 1) / S;

    // Cell index -> indices of the points it owns, in input order.
    std::map<int, std::vector<std::size_t>> owned;
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto& p = points[i];
        if (!mosaic_bounds.contains(p.x, p.y)) {
            throw DataError("annotation (" + std::to_string(p.x) + "," + std::to_string(p.y) +
                            ") outside mosaic of island " + island);
        }
        owned[(p.y / S) * cols + (p.x / S)].push_back(i);
    }

    std::vector<AnnotatedTile> tiles(owned.size());
    std::vector<std::pair<int, const std::vector<std::size_t>*>> cells;
    for (const auto& [cell, idx] : owned) cells.emplace_back(cell, &idx);

    std::vector<std::size_t> order(cells.size());
    std::iota(order.begin(), order.end(), 0);
    parallel_for_each(order, workers, [&](std::size_t k) {
        const auto [cell, idx] = cells[k];
        AnnotatedTile& tile = tiles[k];
        tile.island = island;
        tile.grid_row = cell / cols;
        tile.grid_col = cell % cols;
        const int ox = tile.grid_col * S;
        const int oy = tile.grid_row * S;
        const PixelBox tile_box(ox, oy, std::min(ox + S, mosaic.cols), std::min(oy + S, mosaic.rows));
        tile.pixels = mosaic(cv::Rect(ox, oy, tile_box.width(), tile_box.height())).clone();
        for (std::size_t i : *idx) {
            GroundTruthBox gt = point_to_pseudobox(points[i], cfg.pseudo_box_size, mosaic_bounds);
            const auto in_tile = clip(gt.box, tile_box);
            // The source point is inside the tile, so the clip is never empty.
            gt.clipped = gt.clipped || !(*in_tile == gt.box);
            gt.box = translate(*in_tile, -ox, -oy);
            tile.boxes.push_back(std::move(gt));
        }
    });
    return tiles;
}

std::string tile_stem(const std::string& island, int row, int col) {
    return island + "/tile_" + std::to_string(row) + "_" + std::to_string(col);
}

std::string TileRecord::image_id() const {
    // image_path is "<island>/tile_<row>_<col>.png"
    return image_path.substr(0, image_path.size() - 4);
}

int IslandRecord::annotation_count() const {
    int n = 0;
    for (const auto& t : tiles) n += t.box_count;
    return n;
}

int SurveyManifest::tile_count() const {
    int n = 0;
    for (const auto& i : islands) n += static_cast<int>(i.tiles.size());
    return n;
}

int SurveyManifest::annotation_count() const {
    int n = 0;
    for (const auto& i : islands) n += i.annotation_count();
    return n;
}

const IslandRecord& SurveyManifest::island(std::string_view name) const {
    for (const auto& i : islands) {
        if (i.name == name) return i;
    }
    throw DataError("survey has no island '" + std::string(name) + "'");
}

std::string format_boxes_csv(const std::vector<GroundTruthBox>& boxes) {
    std::ostringstream os;
    os << kBoxesHeader << '\n';
    for (const auto& b : boxes) {
        os << b.box.xmin() << ',' << b.box.ymin() << ',' << b.box.xmax() << ',' << b.box.ymax() << ','
           << (b.clipped ? 1 : 0) << '\n';
    }
    return os.str();
}

std::vector<GroundTruthBox> read_boxes_csv(std::string_view csv_text, const std::string& island,
                                           const std::string& annotator, int origin_x, int origin_y,
                                           int box_size) {
    const auto lines = split_lines(strip_bom(csv_text));
    if (lines.empty() || strip_cr(lines[0]) != kBoxesHeader) {
        throw DataError("box CSV: line 1: expected header '" + std::string(kBoxesHeader) + "'");
    }
    std::vector<GroundTruthBox> boxes;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto line = strip_cr(lines[i]);
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        int v[5];
        bool ok = f.size() == 5;
        for (int k = 0; ok && k < 5; ++k) ok = parse_int(f[static_cast<std::size_t>(k)], v[k]);
        ok = ok && (v[4] == 0 || v[4] == 1) && v[0] < v[2] && v[1] < v[3];
        if (!ok) {
            throw DataError("box CSV: line " + std::to_string(i + 1) + ": malformed row '" + std::string(line) +
                            "'");
        }
        const PixelBox box(v[0], v[1], v[2], v[3]);
        const auto [px, py] = recover_point(box, box_size);
        boxes.push_back(GroundTruthBox{box, PointAnnotation{px + origin_x, py + origin_y, island, annotator},
                                       v[4] == 1});
    }
    return boxes;
}

namespace {

json config_json(const IngestConfig& cfg) {
    return json{{"pseudo_box_size", cfg.pseudo_box_size}, {"supertile_size", cfg.supertile_size}};
}

}  // namespace

SurveyManifest write_manifest(const std::vector<AnnotatedTile>& tiles, const fs::path& dir,
                              const IngestConfig& cfg) {
    std::vector<const AnnotatedTile*> sorted;
    for (const auto& t : tiles) sorted.push_back(&t);
    std::sort(sorted.begin(), sorted.end(), [](const AnnotatedTile* a, const AnnotatedTile* b) {
        return std::tie(a->island, a->grid_row, a->grid_col) < std::tie(b->island, b->grid_row, b->grid_col);
    });

    SurveyManifest manifest;
    manifest.root = dir;
    manifest.config = cfg;
    fs::create_directories(dir);
    for (const AnnotatedTile* t : sorted) {
        if (t->boxes.empty()) throw InvariantError("refusing to write a tile with no annotations");
        if (manifest.islands.empty() || manifest.islands.back().name != t->island) {
            IslandRecord rec;
            rec.name = t->island;
            rec.annotator = t->boxes.front().source_point.annotator;
            manifest.islands.push_back(std::move(rec));
        }
        const std::string stem = tile_stem(t->island, t->grid_row, t->grid_col);
        TileRecord rec;
        rec.image_path = stem + ".png";
        rec.boxes_path = stem + ".boxes.csv";
        rec.box_count = static_cast<int>(t->boxes.size());
        rec.width = t->pixels.cols;
        rec.height = t->pixels.rows;
        rec.grid_row = t->grid_row;
        rec.grid_col = t->grid_col;
        const auto png = encode_png(t->pixels);
        rec.sha256 = sha256_hex(png);
        fs::create_directories(dir / t->island);
        write_text(dir / rec.image_path, std::string_view(reinterpret_cast<const char*>(png.data()), png.size()));
        write_text(dir / rec.boxes_path, format_boxes_csv(t->boxes));
        manifest.islands.back().tiles.push_back(std::move(rec));
    }

    json doc;
    doc["config"] = config_json(cfg);
    doc["islands"] = json::array();
    for (const auto& island : manifest.islands) {
        json tiles_json = json::array();
        for (const auto& t : island.tiles) {
            tiles_json.push_back({{"path", t.image_path},
                                  {"boxes", t.boxes_path},
                                  {"sha256", t.sha256},
                                  {"box_count", t.box_count},
                                  {"width", t.width},
                                  {"height", t.height},
                                  {"grid_row", t.grid_row},
                                  {"grid_col", t.grid_col}});
        }
        doc["islands"].push_back({{"name", island.name},
                                  {"annotator", island.annotator},
                                  {"annotation_count", island.annotation_count()},
                                  {"tiles", std::move(tiles_json)}});
    }
    doc["totals"] = {{"tiles", manifest.tile_count()}, {"annotations", manifest.annotation_count()}};
    write_text(dir / "manifest.json", doc.dump(2) + "\n");
    return manifest;
}

SurveyManifest load_manifest(const fs::path& dir) {
    const fs::path path = dir / "manifest.json";
    if (!fs::exists(path)) throw DataError("no manifest.json in " + dir.string());
    SurveyManifest manifest;
    manifest.root = dir;
    try {
        const json doc = json::parse(read_text(path));
        manifest.config.pseudo_box_size = doc.at("config").at("pseudo_box_size").get<int>();
        manifest.config.supertile_size = doc.at("config").at("supertile_size").get<int>();
        for (const auto& ij : doc.at("islands")) {
            IslandRecord island;
            island.name = ij.at("name").get<std::string>();
            island.annotator = ij.at("annotator").get<std::string>();
            for (const auto& tj : ij.at("tiles")) {
                TileRecord t;
                t.image_path = tj.at("path").get<std::string>();
                t.boxes_path = tj.at("boxes").get<std::string>();
                t.sha256 = tj.at("sha256").get<std::string>();
                t.box_count = tj.at("box_count").get<int>();
                t.width = tj.at("width").get<int>();
                t.height = tj.at("height").get<int>();
                t.grid_row = tj.at("grid_row").get<int>();
                t.grid_col = tj.at("grid_col").get<int>();
                island.tiles.push_back(std::move(t));
            }
            if (island.annotation_count() != ij.at("annotation_count").get<int>()) {
                throw DataError("manifest: annotation_count of island " + island.name +
                                " disagrees with its tiles");
            }
            manifest.islands.push_back(std::move(island));
        }
        if (manifest.annotation_count() != doc.at("totals").at("annotations").get<int>() ||
            manifest.tile_count() != doc.at("totals").at("tiles").get<int>()) {
            throw DataError("manifest: totals disagree with per-tile counts");
        }
    } catch (const json::exception& e) {
        throw DataError("manifest.json: " + std::string(e.what()));
    }

    for (const auto& island : manifest.islands) {
        for (const auto& t : island.tiles) {
            if (!fs::exists(dir / t.image_path)) throw DataError("missing tile file " + t.image_path);
            if (!fs::exists(dir / t.boxes_path)) throw DataError("missing box sidecar " + t.boxes_path);
            if (sha256_file(dir / t.image_path) != t.sha256) {
                throw DataError("checksum mismatch for tile " + t.image_path);
            }
        }
    }
    return manifest;
}

AnnotatedTile load_tile(const SurveyManifest& manifest, const IslandRecord& island, const TileRecord& t) {
    AnnotatedTile tile;
    tile.island = island.name;
    tile.grid_row = t.grid_row;
    tile.grid_col = t.grid_col;
    tile.pixels = read_png(manifest.root / t.image_path);
    if (tile.pixels.cols != t.width || tile.pixels.rows != t.height) {
        throw DataError("tile " + t.image_path + " has unexpected dimensions");
    }
    const int S = manifest.config.supertile_size;
    tile.boxes = read_boxes_csv(read_text(manifest.root / t.boxes_path), island.name, island.annotator,
                                t.grid_col * S, t.grid_row * S, manifest.config.pseudo_box_size);
    if (static_cast<int>(tile.boxes.size()) != t.box_count) {
        throw DataError("box sidecar " + t.boxes_path + " disagrees with manifest box_count");
    }
    for (const auto& b : tile.boxes) {
        if (!tile.bounds().contains(b.box)) throw DataError("box outside tile in " + t.boxes_path);
    }
    return tile;
}

}  // namespace birdcount
