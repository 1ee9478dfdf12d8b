#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "birdcount/geometry.hpp"
#include "birdcount/ingest.hpp"
#include "birdcount/io.hpp"

namespace birdcount {

/// Random ranges for the photometric jitter. Brightness is a fraction of
/// full scale, hue is in degrees, the rest are multiplicative factors.
struct PhotometricRanges {
    double brightness_delta = 0.2;
    std::pair<double, double> contrast_range{0.8, 1.25};
    double hue_delta = 18.0;
    std::pair<double, double> saturation_range{0.7, 1.3};
    std::pair<double, double> value_range{0.7, 1.3};

    static PhotometricRanges identity();
};

enum class Recipe { baseline, improved };

struct AugmentConfig {
    Recipe recipe = Recipe::improved;
    double crop_prob = 0.8;
    int crop_width_min = 700;
    int crop_width_max = 1200;
    double aspect_min = 0.8;
    double aspect_max = 1.2;
    int output_size = 1000;
    PhotometricRanges photometric;
    double flip_prob = 0.5;
    double min_box_visibility = 0.3;
    /// Side of the fixed random crop used by the baseline recipe.
    int baseline_crop_size = 1000;

    void validate() const;
    nlohmann::json to_json() const;
    static AugmentConfig from_json(const nlohmann::json& j);
};

struct Sample {
    Raster pixels;
    std::vector<GroundTruthBox> boxes;
};

/// Concrete photometric parameters. brightness is in pixel levels.
struct PhotometricParams {
    double brightness = 0.0;
    double contrast = 1.0;
    double hue = 0.0;
    double saturation = 1.0;
    double value = 1.0;

    bool is_identity() const;
};

/// Mirrors the sample; horizontal = false flips vertically.
Sample apply_flip(const Sample& s, bool horizontal = true);

/// Brightness/contrast in RGB, then hue/saturation/value. Boxes untouched.
Sample apply_photometric(const Sample& s, const PhotometricParams& params);

/// Random draws consumed by the anchored crop; placement fractions in [0,1).
struct CropDraws {
    std::size_t anchor_index = 0;
    int width = 0;
    double aspect = 1.0;
    double place_x = 0.0;
    double place_y = 0.0;
};

/// Window of the anchored crop for an image of the given size: clamped to
/// the image and placed so it contains the anchor box's centre pixel.
PixelBox anchored_window(int image_width, int image_height, const PixelBox& anchor, const CropDraws& draws);

/// Crops around the anchor box and rescales to cfg.output_size square.
/// Non-anchor boxes survive when at least cfg.min_box_visibility of their
/// area is inside the window; the anchor always survives.
Sample apply_anchored_crop(const Sample& s, const CropDraws& draws, const AugmentConfig& cfg);

/// Everything augment_sample decided for one sample.
struct AugmentPlan {
    std::optional<PhotometricParams> photometric;
    bool flipped = false;
    bool cropped = false;
    std::optional<CropDraws> crop;
    /// Region of the (flipped) input that is resized to the output square.
    PixelBox window{0, 0, 1, 1};
    std::optional<std::size_t> anchor;
};

AugmentPlan plan_augmentation(int width, int height, const std::vector<GroundTruthBox>& boxes,
                              const AugmentConfig& cfg, std::uint64_t seed);

/// Box side of a plan: flip, crop window, visibility filter and scaling.
std::vector<GroundTruthBox> transform_boxes(const std::vector<GroundTruthBox>& boxes, int width,
                                            const AugmentPlan& plan, const AugmentConfig& cfg);

Sample execute_plan(const Sample& s, const AugmentPlan& plan, const AugmentConfig& cfg);

/// Deterministic in (s, cfg, seed). Throws DataError for a sample with no
/// boxes.
Sample augment_sample(const Sample& s, const AugmentConfig& cfg, std::uint64_t seed);

/// Per-sample seed for dataset export.
std::uint64_t sample_seed(std::uint64_t run_seed, const std::string& island, int tile_row, int tile_col, int epoch,
                          int index);

}  // namespace birdcount
