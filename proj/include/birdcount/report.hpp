#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include "birdcount/augment.hpp"
#include "birdcount/backend.hpp"
#include "birdcount/errors.hpp"
#include "birdcount/eval.hpp"
#include "birdcount/geometry.hpp"
#include "birdcount/io.hpp"
#include "birdcount/slicer.hpp"
#include "birdcount/synth.hpp"

namespace birdcount {

/// Colours are BGR.
struct OverlayStyle {
    cv::Scalar tp_color{0, 255, 0};
    cv::Scalar fp_color{0, 0, 255};
    cv::Scalar fn_color{255, 0, 0};
    int stroke_width = 2;

    void validate() const;
};

/// Copy of `image` with every box of `m` stroked inside its own bounds in
/// its category colour. False negatives are drawn first and true positives
/// last. Throws InvariantError for a box outside the raster.
Raster render_overlay(const Raster& image, const MatchResult& m, const OverlayStyle& style = {});

// ---------------------------------------------------------------------------
// Experiments

/// Where a variant's detections come from. `live` covers the wire-protocol
/// kinds; its locator may contain "{held_out}", replaced per split by the
/// held-out island so each split can use its own fine-tuned model.
struct VariantBackend {
    enum class Kind { live, oracle, noisy };
    Kind kind = Kind::oracle;
    BackendSpec live;
    NoisyDetectorConfig noisy;

    nlohmann::json to_json() const;
    static VariantBackend from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
};

struct VariantConfig {
    std::string name;
    VariantBackend backend;
    /// Unset means one window per tile (the resize-only path).
    std::optional<SliceSpec> slice = SliceSpec{};
    GeometryConfig geometry;
    /// Training-time recipe, recorded for provenance; training itself is
    /// done by the external adapter.
    std::optional<AugmentConfig> augment;

    nlohmann::json to_json() const;
    static VariantConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
};

struct OverlayPolicy {
    /// Tiles whose F1 is below this get an overlay.
    double f1_floor = 0.5;
    std::vector<std::string> allow;  // tile image ids always rendered
};

struct ExperimentConfig {
    std::filesystem::path survey;
    std::uint64_t seed = 0;
    TrainConfig train;
    int workers = 1;
    std::vector<VariantConfig> variants;
    OverlayPolicy overlay;

    void validate() const;
    nlohmann::json to_json() const;
    /// Relative paths resolve against `base_dir`.
    static ExperimentConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
};

ExperimentConfig load_experiment_config(const std::filesystem::path& file);

struct VariantOutcome {
    std::string name;
    bool completed = false;
    std::string cause;
    ExitCode failure_code = ExitCode::ok;
    std::vector<std::string> backend_identities;
    std::vector<IslandEvaluation> islands;
};

struct ExperimentResult {
    ResultsTable table;
    std::vector<VariantOutcome> variants;

    bool all_completed() const;
};

/// Runs every variant over every leave-one-island-out split and writes
/// into `out_dir`: results.csv, results.txt, splits.json,
/// variants/<name>/<island>.json, overlays/<name>/<image id>.png and
/// run.json. A failing variant is recorded with its cause and left out of
/// the table; the others still run. Everything except the timestamps in
/// run.json is a function of the config and the survey.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace birdcount
