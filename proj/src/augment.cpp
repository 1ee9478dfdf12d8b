#include "birdcount/augment.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <opencv2/imgproc.hpp>

#include "birdcount/errors.hpp"
#include "birdcount/parallel.hpp"

namespace birdcount {

using nlohmann::json;

PhotometricRanges PhotometricRanges::identity() {
    return PhotometricRanges{0.0, {1.0, 1.0}, 0.0, {1.0, 1.0}, {1.0, 1.0}};
}

void AugmentConfig::validate() const {
    auto prob = [](double p, const char* name) {
        if (!(p >= 0.0 && p <= 1.0)) throw UsageError(std::string(name) + " must lie in [0,1]");
    };
    prob(crop_prob, "crop_prob");
    prob(flip_prob, "flip_prob");
    prob(min_box_visibility, "min_box_visibility");
    if (crop_width_min < 1 || crop_width_min > crop_width_max) throw UsageError("invalid crop width range");
    if (!(aspect_min > 0.0) || aspect_min > aspect_max) throw UsageError("invalid aspect range");
    if (output_size < 1 || baseline_crop_size < 1) throw UsageError("output and crop sizes must be positive");
    const auto& p = photometric;
    if (p.brightness_delta < 0.0 || p.hue_delta < 0.0 || p.contrast_range.first > p.contrast_range.second ||
        p.saturation_range.first > p.saturation_range.second || p.value_range.first > p.value_range.second ||
        p.contrast_range.first < 0.0 || p.saturation_range.first < 0.0 || p.value_range.first < 0.0) {
        throw UsageError("invalid photometric ranges");
    }
}

json AugmentConfig::to_json() const {
    const auto& p = photometric;
    return json{{"recipe", recipe == Recipe::improved ? "improved" : "baseline"},
                {"crop_prob", crop_prob},
                {"crop_width_min", crop_width_min},
                {"crop_width_max", crop_width_max},
                {"aspect_min", aspect_min},
                {"aspect_max", aspect_max},
                {"output_size", output_size},
                {"flip_prob", flip_prob},
                {"min_box_visibility", min_box_visibility},
                {"baseline_crop_size", baseline_crop_size},
                {"photometric",
                 {{"brightness_delta", p.brightness_delta},
                  {"contrast_range", {p.contrast_range.first, p.contrast_range.second}},
                  {"hue_delta", p.hue_delta},
                  {"saturation_range", {p.saturation_range.first, p.saturation_range.second}},
                  {"value_range", {p.value_range.first, p.value_range.second}}}}};
}

AugmentConfig AugmentConfig::from_json(const json& j) {
    AugmentConfig c;
    try {
        const auto recipe = j.value("recipe", std::string("improved"));
        if (recipe == "improved") c.recipe = Recipe::improved;
        else if (recipe == "baseline") c.recipe = Recipe::baseline;
        else throw UsageError("unknown augmentation recipe '" + recipe + "'");
        c.crop_prob = j.value("crop_prob", c.crop_prob);
        c.crop_width_min = j.value("crop_width_min", c.crop_width_min);
        c.crop_width_max = j.value("crop_width_max", c.crop_width_max);
        c.aspect_min = j.value("aspect_min", c.aspect_min);
        c.aspect_max = j.value("aspect_max", c.aspect_max);
        c.output_size = j.value("output_size", c.output_size);
        c.flip_prob = j.value("flip_prob", c.flip_prob);
        c.min_box_visibility = j.value("min_box_visibility", c.min_box_visibility);
        c.baseline_crop_size = j.value("baseline_crop_size", c.baseline_crop_size);
        if (j.contains("photometric")) {
            const auto& p = j["photometric"];
            auto range = [&](const char* key, std::pair<double, double>& r) {
                if (p.contains(key)) r = {p[key].at(0).get<double>(), p[key].at(1).get<double>()};
            };
            c.photometric.brightness_delta = p.value("brightness_delta", c.photometric.brightness_delta);
            c.photometric.hue_delta = p.value("hue_delta", c.photometric.hue_delta);
            range("contrast_range", c.photometric.contrast_range);
            range("saturation_range", c.photometric.saturation_range);
            range("value_range", c.photometric.value_range);
        }
    } catch (const json::exception& e) {
        throw UsageError(std::string("augment config: ") + e.what());
    }
    c.validate();
    return c;
}

bool PhotometricParams::is_identity() const {
    return brightness == 0.0 && contrast == 1.0 && hue == 0.0 && saturation == 1.0 && value == 1.0;
}

Sample apply_flip(const Sample& s, bool horizontal) {
    Sample out;
    cv::flip(s.pixels, out.pixels, horizontal ? 1 : 0);
    const int W = s.pixels.cols;
    const int H = s.pixels.rows;
    out.boxes.reserve(s.boxes.size());
    for (const auto& gt : s.boxes) {
        GroundTruthBox b = gt;
        const auto& r = gt.box;
        b.box = horizontal ? PixelBox(W - r.xmax(), r.ymin(), W - r.xmin(), r.ymax())
                           : PixelBox(r.xmin(), H - r.ymax(), r.xmax(), H - r.ymin());
        out.boxes.push_back(std::move(b));
    }
    return out;
}

Sample apply_photometric(const Sample& s, const PhotometricParams& params) {
    Sample out{s.pixels.clone(), s.boxes};
    if (params.brightness != 0.0 || params.contrast != 1.0) {
        cv::Mat lut(1, 256, CV_8U);
        for (int v = 0; v < 256; ++v) {
            lut.at<std::uint8_t>(v) =
                cv::saturate_cast<std::uint8_t>((v - 128.0) * params.contrast + 128.0 + params.brightness);
        }
        cv::LUT(out.pixels, lut, out.pixels);
    }
    if (params.hue != 0.0 || params.saturation != 1.0 || params.value != 1.0) {
        cv::Mat hsv;
        out.pixels.convertTo(hsv, CV_32FC3, 1.0 / 255.0);
        cv::cvtColor(hsv, hsv, cv::COLOR_BGR2HSV);  // H in [0,360), S and V in [0,1]
        const auto hue = static_cast<float>(params.hue);
        const auto sat = static_cast<float>(params.saturation);
        const auto val = static_cast<float>(params.value);
        hsv.forEach<cv::Vec3f>([&](cv::Vec3f& px, const int*) {
            float h = std::fmod(px[0] + hue, 360.0f);
            if (h < 0.0f) h += 360.0f;
            px[0] = h;
            px[1] = std::clamp(px[1] * sat, 0.0f, 1.0f);
            px[2] = std::clamp(px[2] * val, 0.0f, 1.0f);
        });
        cv::cvtColor(hsv, hsv, cv::COLOR_HSV2BGR);
        hsv.convertTo(out.pixels, CV_8UC3, 255.0);
    }
    return out;
}

PixelBox anchored_window(int image_width, int image_height, const PixelBox& anchor, const CropDraws& draws) {
    const int w = std::min(draws.width, image_width);
    // Height rounds toward the width, so the realised aspect lies between
    // the drawn aspect and 1.
    const double exact_h = draws.width / draws.aspect;
    const double rounded_h = draws.aspect >= 1.0 ? std::ceil(exact_h - 1e-9) : std::floor(exact_h + 1e-9);
    const int h = std::min(std::max(1, static_cast<int>(rounded_h)), image_height);
    const int cx = anchor.center_x2() / 2;
    const int cy = anchor.center_y2() / 2;
    auto place = [](int center, int extent, int size, double u) {
        const int lo = std::max(0, center - size + 1);
        const int hi = std::min(center, extent - size);
        const int span = hi - lo + 1;
        return lo + std::min(span - 1, static_cast<int>(std::floor(u * span)));
    };
    const int x0 = place(cx, image_width, w, draws.place_x);
    const int y0 = place(cy, image_height, h, draws.place_y);
    return PixelBox(x0, y0, x0 + w, y0 + h);
}

namespace {

int scale_coord(int v, int out, int extent) {
    // round-half-up of v * out / extent for v >= 0, in exact integers
    const std::int64_t num = 2LL * v * out + extent;
    return static_cast<int>(num / (2LL * extent));
}

std::vector<GroundTruthBox> crop_boxes(const std::vector<GroundTruthBox>& boxes, const PixelBox& window,
                                       std::optional<std::size_t> anchor, double min_visibility, int out) {
    std::vector<GroundTruthBox> result;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        const auto& gt = boxes[i];
        const auto inside = clip(gt.box, window);
        if (!inside) continue;
        const bool is_anchor = anchor && *anchor == i;
        const double visibility = static_cast<double>(inside->area()) / static_cast<double>(gt.box.area());
        if (!is_anchor && visibility < min_visibility) continue;
        const PixelBox local = translate(*inside, -window.xmin(), -window.ymin());
        int x0 = scale_coord(local.xmin(), out, window.width());
        int x1 = scale_coord(local.xmax(), out, window.width());
        int y0 = scale_coord(local.ymin(), out, window.height());
        int y1 = scale_coord(local.ymax(), out, window.height());
        // Downscaling can collapse a sliver; keep it one pixel wide.
        if (x1 == x0) (x1 < out) ? ++x1 : --x0;
        if (y1 == y0) (y1 < out) ? ++y1 : --y0;
        GroundTruthBox b = gt;
        b.box = PixelBox(x0, y0, x1, y1);
        b.clipped = gt.clipped || !(*inside == gt.box);
        result.push_back(std::move(b));
    }
    return result;
}

Raster crop_pixels(const Raster& pixels, const PixelBox& window, int out) {
    const Raster roi = pixels(cv::Rect(window.xmin(), window.ymin(), window.width(), window.height()));
    Raster result;
    if (roi.cols == out && roi.rows == out) {
        result = roi.clone();
    } else {
        cv::resize(roi, result, cv::Size(out, out), 0, 0, cv::INTER_LINEAR);
    }
    return result;
}

}  // namespace

Sample apply_anchored_crop(const Sample& s, const CropDraws& draws, const AugmentConfig& cfg) {
    if (s.boxes.empty()) throw DataError("anchored crop needs at least one box");
    if (draws.anchor_index >= s.boxes.size()) throw UsageError("anchor index out of range");
    const PixelBox window =
        anchored_window(s.pixels.cols, s.pixels.rows, s.boxes[draws.anchor_index].box, draws);
    return Sample{crop_pixels(s.pixels, window, cfg.output_size),
                  crop_boxes(s.boxes, window, draws.anchor_index, cfg.min_box_visibility, cfg.output_size)};
}

AugmentPlan plan_augmentation(int width, int height, const std::vector<GroundTruthBox>& boxes,
                              const AugmentConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (boxes.empty()) throw DataError("cannot augment a sample without boxes");
    std::mt19937_64 rng(seed);
    auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    auto coin = [&](double p) { return uniform(0.0, 1.0) < p; };

    AugmentPlan plan;
    const auto& pr = cfg.photometric;
    PhotometricParams params;
    params.brightness = uniform(-pr.brightness_delta, pr.brightness_delta) * 255.0;
    params.contrast = uniform(pr.contrast_range.first, pr.contrast_range.second);
    if (cfg.recipe == Recipe::improved) {
        params.hue = uniform(-pr.hue_delta, pr.hue_delta);
        params.saturation = uniform(pr.saturation_range.first, pr.saturation_range.second);
        params.value = uniform(pr.value_range.first, pr.value_range.second);
    }
    if (!params.is_identity()) plan.photometric = params;
    plan.flipped = coin(cfg.flip_prob);

    if (cfg.recipe == Recipe::improved) {
        plan.cropped = coin(cfg.crop_prob);
        if (plan.cropped) {
            CropDraws d;
            d.anchor_index = std::uniform_int_distribution<std::size_t>(0, boxes.size() - 1)(rng);
            d.width = std::uniform_int_distribution<int>(cfg.crop_width_min, cfg.crop_width_max)(rng);
            d.aspect = uniform(cfg.aspect_min, cfg.aspect_max);
            d.place_x = uniform(0.0, 1.0);
            d.place_y = uniform(0.0, 1.0);
            PixelBox anchor = boxes[d.anchor_index].box;
            if (plan.flipped) anchor = PixelBox(width - anchor.xmax(), anchor.ymin(), width - anchor.xmin(), anchor.ymax());
            plan.window = anchored_window(width, height, anchor, d);
            plan.anchor = d.anchor_index;
            plan.crop = d;
        } else {
            plan.window = PixelBox(0, 0, width, height);
        }
    } else {
        plan.cropped = true;
        const int w = std::min(cfg.baseline_crop_size, width);
        const int h = std::min(cfg.baseline_crop_size, height);
        const int x0 = std::uniform_int_distribution<int>(0, width - w)(rng);
        const int y0 = std::uniform_int_distribution<int>(0, height - h)(rng);
        plan.window = PixelBox(x0, y0, x0 + w, y0 + h);
    }
    return plan;
}

std::vector<GroundTruthBox> transform_boxes(const std::vector<GroundTruthBox>& boxes, int width,
                                            const AugmentPlan& plan, const AugmentConfig& cfg) {
    std::vector<GroundTruthBox> current = boxes;
    if (plan.flipped) {
        for (auto& b : current) {
            b.box = PixelBox(width - b.box.xmax(), b.box.ymin(), width - b.box.xmin(), b.box.ymax());
        }
    }
    return crop_boxes(current, plan.window, plan.anchor, cfg.min_box_visibility, cfg.output_size);
}

Sample execute_plan(const Sample& s, const AugmentPlan& plan, const AugmentConfig& cfg) {
    // Flip and photometric jitter are per-pixel maps, so only the source
    // region that lands in the window is processed; the bytes match doing
    // both on the whole image first.
    const int W = s.pixels.cols;
    const PixelBox& w = plan.window;
    const PixelBox source = plan.flipped ? PixelBox(W - w.xmax(), w.ymin(), W - w.xmin(), w.ymax()) : w;
    Sample region{s.pixels(cv::Rect(source.xmin(), source.ymin(), source.width(), source.height())), {}};
    const bool photometric_first = cfg.recipe == Recipe::improved;
    if (photometric_first && plan.photometric) region = apply_photometric(region, *plan.photometric);
    if (plan.flipped) region = apply_flip(region, true);
    Sample current{crop_pixels(region.pixels, PixelBox(0, 0, w.width(), w.height()), cfg.output_size),
                   transform_boxes(s.boxes, W, plan, cfg)};
    if (!photometric_first && plan.photometric) current = apply_photometric(current, *plan.photometric);
    return current;
}

Sample augment_sample(const Sample& s, const AugmentConfig& cfg, std::uint64_t seed) {
    if (s.boxes.empty()) throw DataError("cannot augment a sample without boxes");
    const auto plan = plan_augmentation(s.pixels.cols, s.pixels.rows, s.boxes, cfg, seed);
    return execute_plan(s, plan, cfg);
}

std::uint64_t sample_seed(std::uint64_t run_seed, const std::string& island, int tile_row, int tile_col, int epoch,
                          int index) {
    return SeedHasher(run_seed)
        .add(island)
        .add(static_cast<std::uint64_t>(tile_row))
        .add(static_cast<std::uint64_t>(tile_col))
        .add(static_cast<std::uint64_t>(epoch))
        .add(static_cast<std::uint64_t>(index))
        .value();
}

}  // namespace birdcount
