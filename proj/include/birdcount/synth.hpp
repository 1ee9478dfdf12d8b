#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "birdcount/backend.hpp"
#include "birdcount/ingest.hpp"
#include "birdcount/io.hpp"

namespace birdcount {

struct BackgroundConfig {
    double base_level = 70.0;
    /// Standard deviation of the coarse rock texture and its cell size in px.
    double rock_sigma = 14.0;
    int rock_cell = 24;
    double grain_sigma = 5.0;
    int shadow_bands = 3;
    int shadow_width = 160;
    /// Fraction of brightness removed inside a shadow band.
    double shadow_depth = 0.45;
};

struct ColonyConfig {
    int width = 3000;
    int height = 3000;
    int bird_count = 100;
    std::pair<int, int> bird_radius_range{18, 26};
    int min_separation = 80;
    BackgroundConfig background;
    std::uint64_t seed = 1;
    std::string island = "synthetic";

    void validate() const;
    nlohmann::json to_json() const;
    static ColonyConfig from_json(const nlohmann::json& j);
};

/// Rendered colony. Each bird's box is the tight box of its ellipse;
/// source_point is the ellipse centre.
struct Colony {
    Raster pixels;
    std::vector<GroundTruthBox> birds;

    std::vector<PointAnnotation> points() const;
};

/// Bright axis-aligned ellipses over a dark textured background with
/// shadow bands. Deterministic in cfg.seed; throws DataError when the birds
/// cannot be placed at the requested separation.
Colony generate_colony(const ColonyConfig& cfg);

struct NoisyDetectorConfig {
    double fn_rate = 0.0;
    /// Expected false positives per true bird.
    double fp_rate = 0.0;
    int center_jitter_px = 0;
    std::pair<double, double> tp_score_range{0.5, 1.0};
    std::pair<double, double> fp_score_range{0.15, 0.9};
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static NoisyDetectorConfig from_json(const nlohmann::json& j);
};

/// Ground truth for one or more images, keyed by image id. The empty key
/// answers for any image.
using TruthMap = std::map<std::string, std::vector<PixelBox>>;

/// Returns, for any window, every truth box whose centre pixel lies in the
/// window, clipped to it, in window-local coordinates, score 1.
class OracleBackend : public DetectorBackend {
public:
    explicit OracleBackend(TruthMap truth) : truth_(std::move(truth)) {}
    std::vector<Detection> detect(const PatchRequest& request) override;
    std::string identity() const override { return "oracle"; }

private:
    TruthMap truth_;
};

std::shared_ptr<OracleBackend> make_oracle_backend(const std::vector<GroundTruthBox>& gt);
std::shared_ptr<OracleBackend> make_oracle_backend(TruthMap truth);

/// Emits each truth box in every window holding at least `min_fraction` of
/// its area, clipped to the window. Models a detector that sees partial
/// birds at patch borders.
class CoverageBackend : public DetectorBackend {
public:
    CoverageBackend(TruthMap truth, double min_fraction) : truth_(std::move(truth)), min_fraction_(min_fraction) {}
    std::vector<Detection> detect(const PatchRequest& request) override;
    std::string identity() const override { return "coverage"; }

private:
    TruthMap truth_;
    double min_fraction_;
};

/// Oracle degraded by misses, background false positives and centre jitter.
/// Every random decision is fixed at construction per (seed, image, bird),
/// so a bird is missed or kept consistently across overlapping windows.
class NoisyBackend : public DetectorBackend {
public:
    NoisyBackend(const TruthMap& truth, const std::map<std::string, ImageSize>& sizes, const NoisyDetectorConfig& cfg);
    std::vector<Detection> detect(const PatchRequest& request) override;
    std::string identity() const override { return "noisy"; }

    /// Emitted boxes per image before windowing, for test inspection.
    const std::vector<Detection>& emitted(const std::string& image_id) const;
    std::size_t false_positive_count() const { return fp_total_; }
    std::size_t dropped_count() const { return dropped_total_; }

private:
    std::map<std::string, std::vector<Detection>> emitted_;
    std::size_t fp_total_ = 0;
    std::size_t dropped_total_ = 0;
};

std::shared_ptr<NoisyBackend> make_noisy_backend(const std::vector<GroundTruthBox>& gt, ImageSize size,
                                                 const NoisyDetectorConfig& cfg);

/// Truth maps for every tile of a survey, keyed by tile image id.
TruthMap survey_truth(const SurveyManifest& manifest);
std::map<std::string, ImageSize> survey_sizes(const SurveyManifest& manifest);

}  // namespace birdcount
