#include "birdcount/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <unordered_map>

#include <opencv2/imgproc.hpp>

#include "birdcount/errors.hpp"
#include "birdcount/parallel.hpp"

namespace birdcount {

using nlohmann::json;

void ColonyConfig::validate() const {
    if (width < 1 || height < 1) throw UsageError("colony dimensions must be positive");
    if (bird_count < 0) throw UsageError("bird count must be non-negative");
    if (bird_radius_range.first < 1 || bird_radius_range.first > bird_radius_range.second) {
        throw UsageError("invalid bird radius range");
    }
    if (min_separation < 0) throw UsageError("min separation must be non-negative");
    if (bird_count > 0 && (2 * bird_radius_range.second + 1 > width || 2 * bird_radius_range.second + 1 > height)) {
        throw UsageError("colony too small for the largest bird");
    }
    if (background.rock_cell < 1 || background.shadow_width < 1 || background.shadow_bands < 0) {
        throw UsageError("invalid background parameters");
    }
}

json ColonyConfig::to_json() const {
    return json{{"width", width},
                {"height", height},
                {"bird_count", bird_count},
                {"bird_radius_range", {bird_radius_range.first, bird_radius_range.second}},
                {"min_separation", min_separation},
                {"seed", seed},
                {"island", island},
                {"background",
                 {{"base_level", background.base_level},
                  {"rock_sigma", background.rock_sigma},
                  {"rock_cell", background.rock_cell},
                  {"grain_sigma", background.grain_sigma},
                  {"shadow_bands", background.shadow_bands},
                  {"shadow_width", background.shadow_width},
                  {"shadow_depth", background.shadow_depth}}}};
}

ColonyConfig ColonyConfig::from_json(const json& j) {
    ColonyConfig c;
    try {
        c.width = j.value("width", c.width);
        c.height = j.value("height", c.height);
        c.bird_count = j.value("bird_count", c.bird_count);
        if (j.contains("bird_radius_range")) {
            c.bird_radius_range = {j["bird_radius_range"].at(0).get<int>(), j["bird_radius_range"].at(1).get<int>()};
        }
        c.min_separation = j.value("min_separation", c.min_separation);
        c.seed = j.value("seed", c.seed);
        c.island = j.value("island", c.island);
        if (j.contains("background")) {
            const auto& b = j["background"];
            c.background.base_level = b.value("base_level", c.background.base_level);
            c.background.rock_sigma = b.value("rock_sigma", c.background.rock_sigma);
            c.background.rock_cell = b.value("rock_cell", c.background.rock_cell);
            c.background.grain_sigma = b.value("grain_sigma", c.background.grain_sigma);
            c.background.shadow_bands = b.value("shadow_bands", c.background.shadow_bands);
            c.background.shadow_width = b.value("shadow_width", c.background.shadow_width);
            c.background.shadow_depth = b.value("shadow_depth", c.background.shadow_depth);
        }
    } catch (const json::exception& e) {
        throw UsageError(std::string("colony config: ") + e.what());
    }
    c.validate();
    return c;
}

std::vector<PointAnnotation> Colony::points() const {
    std::vector<PointAnnotation> out;
    out.reserve(birds.size());
    for (const auto& b : birds) out.push_back(b.source_point);
    return out;
}

namespace {

// Background brightness in [0, 150], kept well below bird brightness.
cv::Mat render_background(const ColonyConfig& cfg, std::mt19937_64& rng) {
    const auto& bg = cfg.background;
    const int cw = cfg.width / bg.rock_cell + 2;
    const int ch = cfg.height / bg.rock_cell + 2;
    cv::Mat coarse(ch, cw, CV_32F);
    std::normal_distribution<float> rock(0.0f, static_cast<float>(bg.rock_sigma));
    for (int y = 0; y < ch; ++y) {
        for (int x = 0; x < cw; ++x) coarse.at<float>(y, x) = rock(rng);
    }
    cv::Mat level;
    cv::resize(coarse, level, cv::Size(cfg.width, cfg.height), 0, 0, cv::INTER_CUBIC);

    cv::Mat grain(cfg.height, cfg.width, CV_32F);
    cv::RNG cvrng(rng());
    cvrng.fill(grain, cv::RNG::NORMAL, 0.0, bg.grain_sigma);
    level += grain + static_cast<float>(bg.base_level);

    std::uniform_real_distribution<double> angle_dist(0.0, M_PI);
    std::uniform_real_distribution<double> offset_dist(0.0, 1.0);
    for (int b = 0; b < bg.shadow_bands; ++b) {
        const double a = angle_dist(rng);
        const double nx = std::cos(a), ny = std::sin(a);
        const double span = std::abs(nx) * cfg.width + std::abs(ny) * cfg.height;
        const double lo = std::min(0.0, nx * cfg.width) + std::min(0.0, ny * cfg.height);
        const double center = lo + offset_dist(rng) * span;
        const double half = bg.shadow_width / 2.0;
        const auto depth = static_cast<float>(bg.shadow_depth);
        level.forEach<float>([&](float& v, const int* pos) {
            const double d = std::abs(pos[1] * nx + pos[0] * ny - center);
            if (d < half) v *= 1.0f - depth * static_cast<float>(1.0 - d / half);
        });
    }
    cv::min(level, 150.0, level);
    cv::max(level, 0.0, level);

    // Brownish rock: scale the grey level per channel (BGR).
    cv::Mat b, g, r;
    level.convertTo(b, CV_8U, 0.80);
    level.convertTo(g, CV_8U, 0.95);
    level.convertTo(r, CV_8U, 1.10);
    cv::Mat out;
    cv::merge(std::vector<cv::Mat>{b, g, r}, out);
    return out;
}

}  // namespace

Colony generate_colony(const ColonyConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    Colony colony;
    colony.pixels = render_background(cfg, rng);

    const int sep = cfg.min_separation;
    const int cell = std::max(sep, 1);
    std::unordered_map<std::int64_t, std::vector<std::pair<int, int>>> grid;
    auto key = [](int cx, int cy) { return (static_cast<std::int64_t>(cy) << 32) ^ static_cast<std::uint32_t>(cx); };
    auto too_close = [&](int x, int y) {
        if (sep == 0) return false;
        const int gx = x / cell, gy = y / cell;
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                const auto it = grid.find(key(gx + dx, gy + dy));
                if (it == grid.end()) continue;
                for (const auto& [px, py] : it->second) {
                    const std::int64_t ddx = px - x, ddy = py - y;
                    if (ddx * ddx + ddy * ddy < static_cast<std::int64_t>(sep) * sep) return true;
                }
            }
        }
        return false;
    };

    std::uniform_int_distribution<int> radius(cfg.bird_radius_range.first, cfg.bird_radius_range.second);
    const long max_attempts = 1000L + 400L * cfg.bird_count;
    long attempts = 0;
    while (static_cast<int>(colony.birds.size()) < cfg.bird_count) {
        if (++attempts > max_attempts) {
            throw DataError("could only place " + std::to_string(colony.birds.size()) + " of " +
                            std::to_string(cfg.bird_count) + " birds at separation " + std::to_string(sep) +
                            "; lower the density or the separation");
        }
        const int rx = radius(rng);
        const int ry = radius(rng);
        const int cx = std::uniform_int_distribution<int>(rx, cfg.width - 1 - rx)(rng);
        const int cy = std::uniform_int_distribution<int>(ry, cfg.height - 1 - ry)(rng);
        if (too_close(cx, cy)) continue;
        grid[key(cx / cell, cy / cell)].emplace_back(cx, cy);

        const std::int64_t rx2 = static_cast<std::int64_t>(rx) * rx;
        const std::int64_t ry2 = static_cast<std::int64_t>(ry) * ry;
        for (int dy = -ry; dy <= ry; ++dy) {
            auto* row = colony.pixels.ptr<cv::Vec3b>(cy + dy);
            for (int dx = -rx; dx <= rx; ++dx) {
                const std::int64_t lhs = dx * dx * ry2 + dy * dy * rx2;
                if (lhs > rx2 * ry2) continue;
                const double r2 = static_cast<double>(lhs) / static_cast<double>(rx2 * ry2);
                const auto v = static_cast<std::uint8_t>(225.0 + 28.0 * (1.0 - r2));
                row[cx + dx] = cv::Vec3b(v, v, static_cast<std::uint8_t>(v - 6));
            }
        }
        colony.birds.push_back(GroundTruthBox{PixelBox(cx - rx, cy - ry, cx + rx + 1, cy + ry + 1),
                                              PointAnnotation{cx, cy, cfg.island, "synth"}, false});
    }
    return colony;
}

// ---------------------------------------------------------------------------

void NoisyDetectorConfig::validate() const {
    if (!(fn_rate >= 0.0 && fn_rate <= 1.0)) throw UsageError("fn_rate must lie in [0,1]");
    if (!(fp_rate >= 0.0)) throw UsageError("fp_rate must be non-negative");
    if (center_jitter_px < 0) throw UsageError("center jitter must be non-negative");
    for (const auto& r : {tp_score_range, fp_score_range}) {
        if (!(r.first >= 0.0 && r.first <= r.second && r.second <= 1.0)) throw UsageError("invalid score range");
    }
}

json NoisyDetectorConfig::to_json() const {
    return json{{"fn_rate", fn_rate},
                {"fp_rate", fp_rate},
                {"center_jitter_px", center_jitter_px},
                {"tp_score_range", {tp_score_range.first, tp_score_range.second}},
                {"fp_score_range", {fp_score_range.first, fp_score_range.second}},
                {"seed", seed}};
}

NoisyDetectorConfig NoisyDetectorConfig::from_json(const json& j) {
    NoisyDetectorConfig c;
    try {
        c.fn_rate = j.value("fn_rate", c.fn_rate);
        c.fp_rate = j.value("fp_rate", c.fp_rate);
        c.center_jitter_px = j.value("center_jitter_px", c.center_jitter_px);
        if (j.contains("tp_score_range")) c.tp_score_range = {j["tp_score_range"].at(0), j["tp_score_range"].at(1)};
        if (j.contains("fp_score_range")) c.fp_score_range = {j["fp_score_range"].at(0), j["fp_score_range"].at(1)};
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
        throw UsageError(std::string("noisy detector config: ") + e.what());
    }
    c.validate();
    return c;
}

namespace {

const std::vector<PixelBox>* truth_for(const TruthMap& truth, const std::string& image_id) {
    auto it = truth.find(image_id);
    if (it == truth.end()) it = truth.find("");
    return it == truth.end() ? nullptr : &it->second;
}

bool center_in(const PixelBox& b, const PixelBox& window) {
    return window.contains(b.center_x2() / 2, b.center_y2() / 2);
}

}  // namespace

std::vector<Detection> OracleBackend::detect(const PatchRequest& request) {
    std::vector<Detection> out;
    const auto* boxes = truth_for(truth_, request.image_id);
    if (!boxes) return out;
    const PixelBox& w = request.window;
    for (const auto& b : *boxes) {
        if (!center_in(b, w)) continue;
        out.push_back(Detection{translate(*clip(b, w), -w.xmin(), -w.ymin()), 1.0, "bird"});
    }
    return out;
}

std::shared_ptr<OracleBackend> make_oracle_backend(const std::vector<GroundTruthBox>& gt) {
    std::vector<PixelBox> boxes;
    for (const auto& g : gt) boxes.push_back(g.box);
    return std::make_shared<OracleBackend>(TruthMap{{"", std::move(boxes)}});
}

std::shared_ptr<OracleBackend> make_oracle_backend(TruthMap truth) {
    return std::make_shared<OracleBackend>(std::move(truth));
}

std::vector<Detection> CoverageBackend::detect(const PatchRequest& request) {
    std::vector<Detection> out;
    const auto* boxes = truth_for(truth_, request.image_id);
    if (!boxes) return out;
    const PixelBox& w = request.window;
    for (const auto& b : *boxes) {
        const auto inside = clip(b, w);
        if (!inside) continue;
        if (static_cast<double>(inside->area()) < min_fraction_ * static_cast<double>(b.area())) continue;
        out.push_back(Detection{translate(*inside, -w.xmin(), -w.ymin()), 1.0, "bird"});
    }
    return out;
}

NoisyBackend::NoisyBackend(const TruthMap& truth, const std::map<std::string, ImageSize>& sizes,
                           const NoisyDetectorConfig& cfg) {
    cfg.validate();
    const int j = cfg.center_jitter_px;
    for (const auto& [image, boxes] : truth) {
        const auto size_it = sizes.find(image);
        if (size_it == sizes.end()) throw UsageError("noisy backend: no image size for '" + image + "'");
        const PixelBox bounds(0, 0, size_it->second.width, size_it->second.height);
        auto& out = emitted_[image];

        for (std::size_t i = 0; i < boxes.size(); ++i) {
            std::mt19937_64 rng(SeedHasher(cfg.seed).add(image).add(static_cast<std::uint64_t>(i)).value());
            const bool dropped = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < cfg.fn_rate;
            const int dx = std::uniform_int_distribution<int>(-j, j)(rng);
            const int dy = std::uniform_int_distribution<int>(-j, j)(rng);
            const double score = std::uniform_real_distribution<double>(cfg.tp_score_range.first, cfg.tp_score_range.second)(rng);
            if (dropped) {
                ++dropped_total_;
                continue;
            }
            const auto moved = clip(translate(boxes[i], dx, dy), bounds);
            if (moved) out.push_back(Detection{*moved, score, "bird"});
        }

        // Background false positives, clear of every bird (allowing for jitter)
        // and of each other so merging cannot swallow them.
        std::mt19937_64 rng(SeedHasher(cfg.seed).add(image).add("false-positives").value());
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::vector<PixelBox> occupied;
        for (const auto& b : boxes) {
            occupied.emplace_back(b.xmin() - j, b.ymin() - j, b.xmax() + j, b.ymax() + j);
        }
        const double whole = std::floor(cfg.fp_rate);
        const double frac = cfg.fp_rate - whole;
        for (std::size_t i = 0; i < boxes.size(); ++i) {
            const int n = static_cast<int>(whole) + (unit(rng) < frac ? 1 : 0);
            for (int k = 0; k < n; ++k) {
                for (int attempt = 0; attempt < 200; ++attempt) {
                    const int s = std::uniform_int_distribution<int>(36, 52)(rng);
                    if (s > bounds.width() || s > bounds.height()) break;
                    const int x0 = std::uniform_int_distribution<int>(0, bounds.width() - s)(rng);
                    const int y0 = std::uniform_int_distribution<int>(0, bounds.height() - s)(rng);
                    const PixelBox fp(x0, y0, x0 + s, y0 + s);
                    const bool clash = std::any_of(occupied.begin(), occupied.end(),
                                                   [&](const PixelBox& o) { return intersection_area(o, fp) > 0; });
                    if (clash) continue;
                    const double score =
                        std::uniform_real_distribution<double>(cfg.fp_score_range.first, cfg.fp_score_range.second)(rng);
                    out.push_back(Detection{fp, score, "bird"});
                    occupied.push_back(fp);
                    ++fp_total_;
                    break;
                }
            }
        }
    }
}

std::vector<Detection> NoisyBackend::detect(const PatchRequest& request) {
    std::vector<Detection> out;
    auto it = emitted_.find(request.image_id);
    if (it == emitted_.end()) it = emitted_.find("");
    if (it == emitted_.end()) return out;
    const PixelBox& w = request.window;
    for (const auto& d : it->second) {
        if (!center_in(d.box, w)) continue;
        out.push_back(Detection{translate(*clip(d.box, w), -w.xmin(), -w.ymin()), d.score, d.label});
    }
    return out;
}

const std::vector<Detection>& NoisyBackend::emitted(const std::string& image_id) const {
    auto it = emitted_.find(image_id);
    if (it == emitted_.end()) it = emitted_.find("");
    if (it == emitted_.end()) throw UsageError("noisy backend knows no image '" + image_id + "'");
    return it->second;
}

std::shared_ptr<NoisyBackend> make_noisy_backend(const std::vector<GroundTruthBox>& gt, ImageSize size,
                                                 const NoisyDetectorConfig& cfg) {
    std::vector<PixelBox> boxes;
    for (const auto& g : gt) boxes.push_back(g.box);
    return std::make_shared<NoisyBackend>(TruthMap{{"", std::move(boxes)}}, std::map<std::string, ImageSize>{{"", size}},
                                          cfg);
}

TruthMap survey_truth(const SurveyManifest& manifest) {
    TruthMap truth;
    for (const auto& island : manifest.islands) {
        for (const auto& t : island.tiles) {
            const auto gts = read_boxes_csv(read_text(manifest.root / t.boxes_path), island.name, island.annotator,
                                            0, 0, manifest.config.pseudo_box_size);
            auto& boxes = truth[t.image_id()];
            for (const auto& g : gts) boxes.push_back(g.box);
        }
    }
    return truth;
}

std::map<std::string, ImageSize> survey_sizes(const SurveyManifest& manifest) {
    std::map<std::string, ImageSize> sizes;
    for (const auto& island : manifest.islands) {
        for (const auto& t : island.tiles) sizes[t.image_id()] = ImageSize{t.width, t.height};
    }
    return sizes;
}

}  // namespace birdcount
