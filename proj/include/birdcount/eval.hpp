#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "birdcount/backend.hpp"
#include "birdcount/geometry.hpp"
#include "birdcount/ingest.hpp"
#include "birdcount/slicer.hpp"

namespace birdcount {

struct MatchPair {
    Detection detection;
    GroundTruthBox truth;
    double iou = 0.0;
};

/// Partition of detections into TP/FP and of ground truth into TP/FN.
struct MatchResult {
    std::vector<MatchPair> tp;
    std::vector<Detection> fp;
    std::vector<GroundTruthBox> fn;
    double iou_threshold = 0.1;
};

struct Metrics {
    long tp = 0;
    long fp = 0;
    long fn = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    /// Set when precision or recall had a zero denominator and took its
    /// conventional value of 1.
    bool degenerate = false;
};

/// Greedy one-to-one matching: detections in descending score order (ties
/// by input order) each take the unmatched ground-truth box of highest IoU
/// (ties by lower index) when that IoU reaches the threshold.
MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruthBox>& gts,
                             double eval_iou = 0.1);

Metrics metrics_from_counts(long tp, long fp, long fn);
Metrics compute_metrics(const MatchResult& m);

/// Rounds half away from zero to 4 decimals, the precision of reported tables.
double round4(double v);
std::string format4(double v);

// ---------------------------------------------------------------------------
// Leave-one-island-out splits

struct CrossValSplit {
    std::string held_out_island;
    std::vector<std::string> train;       // tile image ids
    std::vector<std::string> validation;  // tile image ids
    std::vector<std::string> test;        // tile image ids of the held-out island
    std::uint64_t seed = 0;
    std::vector<std::string> warnings;
};

/// round-half-up(n * fraction), at least 1 when n >= 2, 0 when n < 2.
int validation_count(int tiles, double fraction);

/// One split per island. Validation tiles are sampled per training island
/// with a seed derived from (cfg.seed, island), so an island's validation
/// subset is the same in every split that trains on it.
std::vector<CrossValSplit> loiocv_splits(const SurveyManifest& manifest, const TrainConfig& cfg);

nlohmann::json splits_to_json(const std::vector<CrossValSplit>& splits);
std::vector<CrossValSplit> splits_from_json(const nlohmann::json& doc);

// ---------------------------------------------------------------------------

struct TileEvaluation {
    std::string image_id;
    MatchResult match;
    Metrics metrics;
};

struct IslandEvaluation {
    std::string island;
    std::vector<TileEvaluation> tiles;
    Metrics metrics;  // micro-averaged over tiles
};

/// Sliced inference plus matching over every held-out tile of the split.
/// Island metrics pool TP/FP/FN counts across tiles.
IslandEvaluation evaluate_run(const SurveyManifest& manifest, const CrossValSplit& split, const Bridge& bridge,
                              const SliceSpec& spec, const GeometryConfig& cfg, int workers = 1);

nlohmann::json match_to_json(const MatchResult& m);
nlohmann::json metrics_to_json(const Metrics& m);
nlohmann::json island_evaluation_to_json(const IslandEvaluation& e);

// ---------------------------------------------------------------------------
// Results table

struct VariantScores {
    std::string name;
    std::vector<std::pair<std::string, double>> f1;  // island -> F1, in column order
};

struct ResultsRow {
    std::string model;
    std::vector<double> values;  // aligned with ResultsTable::islands
    double average = 0.0;
};

struct ResultsTable {
    std::vector<std::string> islands;
    std::vector<ResultsRow> rows;

    std::string to_csv() const;
    std::string to_text() const;
};

/// Per-island F1 plus arithmetic-mean average per variant. Every variant
/// must cover the same islands; columns follow the first variant's order.
ResultsTable aggregate(const std::vector<VariantScores>& results);

}  // namespace birdcount
