#include "birdcount/report.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <iomanip>
#include <sstream>

#include <opencv2/imgproc.hpp>

#include "birdcount/ingest.hpp"

namespace birdcount {

namespace fs = std::filesystem;
using nlohmann::json;

void OverlayStyle::validate() const {
    if (stroke_width < 1) throw UsageError("overlay stroke width must be at least 1");
    if (tp_color == fp_color || tp_color == fn_color || fp_color == fn_color) {
        throw UsageError("overlay colours must be distinct");
    }
}

namespace {

void stroke(Raster& img, const PixelBox& b, const cv::Scalar& color, int width) {
    const PixelBox bounds(0, 0, img.cols, img.rows);
    if (!bounds.contains(b)) {
        std::ostringstream os;
        os << "overlay box " << b << " lies outside the " << img.cols << "x" << img.rows << " raster";
        throw InvariantError(os.str());
    }
    // Nested 1px outlines, innermost last; stops once the box is exhausted.
    for (int k = 0; k < width; ++k) {
        const int x0 = b.xmin() + k, y0 = b.ymin() + k;
        const int x1 = b.xmax() - 1 - k, y1 = b.ymax() - 1 - k;
        if (x0 > x1 || y0 > y1) break;
        cv::rectangle(img, cv::Point(x0, y0), cv::Point(x1, y1), color, 1, cv::LINE_8);
    }
}

}  // namespace

Raster render_overlay(const Raster& image, const MatchResult& m, const OverlayStyle& style) {
    style.validate();
    if (image.empty() || image.type() != CV_8UC3) throw InvariantError("overlay needs an 8-bit BGR raster");
    Raster out = image.clone();
    for (const auto& g : m.fn) stroke(out, g.box, style.fn_color, style.stroke_width);
    for (const auto& d : m.fp) stroke(out, d.box, style.fp_color, style.stroke_width);
    for (const auto& p : m.tp) stroke(out, p.detection.box, style.tp_color, style.stroke_width);
    return out;
}

// ---------------------------------------------------------------------------

json VariantBackend::to_json() const {
    switch (kind) {
        case Kind::oracle: return json{{"kind", "oracle"}};
        case Kind::noisy: {
            json j = noisy.to_json();
            j["kind"] = "noisy";
            return j;
        }
        case Kind::live: return live.to_json();
    }
    throw InvariantError("unhandled variant backend kind");
}

VariantBackend VariantBackend::from_json(const json& j, const fs::path& base_dir) {
    VariantBackend b;
    if (!j.is_object() || !j.contains("kind")) throw UsageError("variant backend needs a 'kind'");
    const auto kind = j["kind"].get<std::string>();
    if (kind == "oracle") {
        b.kind = Kind::oracle;
    } else if (kind == "noisy") {
        b.kind = Kind::noisy;
        b.noisy = NoisyDetectorConfig::from_json(j);
    } else {
        b.kind = Kind::live;
        try {
            b.live = BackendSpec::from_json(j);
        } catch (const json::exception& e) {
            throw UsageError(std::string("variant backend: ") + e.what());
        }
        if (b.live.kind == BackendSpec::Kind::offline && fs::path(b.live.locator).is_relative()) {
            b.live.locator = (base_dir / b.live.locator).lexically_normal().string();
        }
    }
    return b;
}

json VariantConfig::to_json() const {
    json j{{"name", name},
           {"backend", backend.to_json()},
           {"geometry",
            {{"nms_iou", geometry.nms_iou}, {"score_floor", geometry.score_floor}, {"eval_iou", geometry.eval_iou}}}};
    j["slice"] = slice ? json{{"patch_size", slice->patch_size}, {"overlap_ratio", slice->overlap_ratio}} : json(nullptr);
    j["augment"] = augment ? augment->to_json() : json(nullptr);
    return j;
}

VariantConfig VariantConfig::from_json(const json& j, const fs::path& base_dir) {
    VariantConfig v;
    try {
        v.name = j.at("name").get<std::string>();
        v.backend = VariantBackend::from_json(j.at("backend"), base_dir);
        if (j.contains("slice")) {
            if (j["slice"].is_null()) {
                v.slice.reset();
            } else {
                v.slice->patch_size = j["slice"].value("patch_size", v.slice->patch_size);
                v.slice->overlap_ratio = j["slice"].value("overlap_ratio", v.slice->overlap_ratio);
            }
        }
        if (j.contains("geometry")) {
            const auto& g = j["geometry"];
            v.geometry.nms_iou = g.value("nms_iou", v.geometry.nms_iou);
            v.geometry.score_floor = g.value("score_floor", v.geometry.score_floor);
            v.geometry.eval_iou = g.value("eval_iou", v.geometry.eval_iou);
        }
        if (j.contains("augment") && !j["augment"].is_null()) v.augment = AugmentConfig::from_json(j["augment"]);
    } catch (const json::exception& e) {
        throw UsageError("variant '" + v.name + "': " + e.what());
    }
    if (v.name.empty() || v.name.find_first_of("/\\") != std::string::npos || v.name == "." || v.name == "..") {
        throw UsageError("variant name '" + v.name + "' is not usable as a directory name");
    }
    if (v.slice) v.slice->validate();
    v.geometry.validate();
    return v;
}

void ExperimentConfig::validate() const {
    if (survey.empty()) throw UsageError("experiment needs a survey directory");
    if (workers < 1) throw UsageError("workers must be at least 1");
    if (variants.empty()) throw UsageError("experiment has no variants");
    train.validate();
    std::vector<std::string> names;
    for (const auto& v : variants) names.push_back(v.name);
    std::sort(names.begin(), names.end());
    if (std::adjacent_find(names.begin(), names.end()) != names.end()) throw UsageError("variant names must be unique");
    if (!(overlay.f1_floor >= 0.0 && overlay.f1_floor <= 1.0)) throw UsageError("overlay f1_floor must lie in [0,1]");
}

json ExperimentConfig::to_json() const {
    json vs = json::array();
    for (const auto& v : variants) vs.push_back(v.to_json());
    return json{{"survey", survey.string()},
                {"seed", seed},
                {"train", train.to_json()},
                {"workers", workers},
                {"variants", vs},
                {"overlay", {{"f1_floor", overlay.f1_floor}, {"allow", overlay.allow}}}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j, const fs::path& base_dir) {
    ExperimentConfig c;
    try {
        fs::path survey = j.at("survey").get<std::string>();
        c.survey = survey.is_relative() ? (base_dir / survey).lexically_normal() : survey;
        c.seed = j.value("seed", c.seed);
        if (j.contains("train")) c.train = TrainConfig::from_json(j["train"]);
        c.train.seed = c.seed;
        c.workers = j.value("workers", c.workers);
        for (const auto& v : j.at("variants")) c.variants.push_back(VariantConfig::from_json(v, base_dir));
        if (j.contains("overlay")) {
            c.overlay.f1_floor = j["overlay"].value("f1_floor", c.overlay.f1_floor);
            c.overlay.allow = j["overlay"].value("allow", c.overlay.allow);
        }
    } catch (const json::exception& e) {
        throw UsageError(std::string("experiment config: ") + e.what());
    }
    c.validate();
    return c;
}

ExperimentConfig load_experiment_config(const fs::path& file) {
    json j;
    try {
        j = json::parse(read_text(file));
    } catch (const json::parse_error& e) {
        throw UsageError("experiment config " + file.string() + " is not valid JSON: " + e.what());
    }
    return ExperimentConfig::from_json(j, fs::absolute(file).parent_path());
}

bool ExperimentResult::all_completed() const {
    return std::all_of(variants.begin(), variants.end(), [](const VariantOutcome& v) { return v.completed; });
}

namespace {

std::string utc_now() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
    for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
        s.replace(pos, from.size(), to);
    }
    return s;
}

SliceSpec slice_for(const VariantConfig& v, const SurveyManifest& manifest) {
    if (v.slice) return *v.slice;
    int largest = 1;
    for (const auto& island : manifest.islands) {
        for (const auto& t : island.tiles) largest = std::max({largest, t.width, t.height});
    }
    return SliceSpec::whole_image(largest, largest);
}

void write_overlays(const VariantConfig& v, const IslandEvaluation& eval, const SurveyManifest& manifest,
                    const OverlayPolicy& policy, const fs::path& dir) {
    const IslandRecord& island = manifest.island(eval.island);
    for (const auto& te : eval.tiles) {
        const bool allowed = std::find(policy.allow.begin(), policy.allow.end(), te.image_id) != policy.allow.end();
        if (!allowed && !(te.metrics.f1 < policy.f1_floor)) continue;
        const auto rec = std::find_if(island.tiles.begin(), island.tiles.end(),
                                      [&](const TileRecord& t) { return t.image_id() == te.image_id; });
        const AnnotatedTile tile = load_tile(manifest, island, *rec);
        write_png(dir / "overlays" / v.name / (te.image_id + ".png"), render_overlay(tile.pixels, te.match));
    }
}

VariantOutcome run_variant(const VariantConfig& v, const ExperimentConfig& cfg, const SurveyManifest& manifest,
                           const std::vector<CrossValSplit>& splits, const fs::path& out_dir) {
    VariantOutcome outcome;
    outcome.name = v.name;
    const SliceSpec spec = slice_for(v, manifest);

    std::optional<Bridge> shared;
    if (v.backend.kind == VariantBackend::Kind::oracle) {
        shared.emplace(make_oracle_backend(survey_truth(manifest)));
    } else if (v.backend.kind == VariantBackend::Kind::noisy) {
        shared.emplace(std::make_shared<NoisyBackend>(survey_truth(manifest), survey_sizes(manifest), v.backend.noisy));
    }

    for (const auto& split : splits) {
        std::optional<Bridge> per_split;
        if (!shared) {
            BackendSpec live = v.backend.live;
            live.locator = replace_all(live.locator, "{held_out}", split.held_out_island);
            per_split.emplace(make_bridge(live));
        }
        const Bridge& bridge = shared ? *shared : *per_split;
        const std::string identity = bridge.backend().identity();
        if (std::find(outcome.backend_identities.begin(), outcome.backend_identities.end(), identity) ==
            outcome.backend_identities.end()) {
            outcome.backend_identities.push_back(identity);
        }
        IslandEvaluation eval = evaluate_run(manifest, split, bridge, spec, v.geometry, cfg.workers);
        write_text(out_dir / "variants" / v.name / (split.held_out_island + ".json"),
                   island_evaluation_to_json(eval).dump(2) + "\n");
        write_overlays(v, eval, manifest, cfg.overlay, out_dir);
        outcome.islands.push_back(std::move(eval));
    }
    outcome.completed = true;
    return outcome;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    const std::string started = utc_now();
    const SurveyManifest manifest = load_manifest(cfg.survey);
    TrainConfig train = cfg.train;
    train.seed = cfg.seed;
    const auto splits = loiocv_splits(manifest, train);

    fs::create_directories(out_dir);
    write_text(out_dir / "splits.json", splits_to_json(splits).dump(2) + "\n");

    ExperimentResult result;
    std::vector<VariantScores> scores;
    for (const auto& v : cfg.variants) {
        VariantOutcome outcome;
        try {
            outcome = run_variant(v, cfg, manifest, splits, out_dir);
        } catch (const Error& e) {
            outcome.name = v.name;
            outcome.cause = e.what();
            outcome.failure_code = e.code();
        } catch (const std::exception& e) {
            outcome.name = v.name;
            outcome.cause = e.what();
            outcome.failure_code = ExitCode::invariant;
        }
        if (outcome.completed) {
            VariantScores s{v.name, {}};
            for (const auto& island : outcome.islands) s.f1.emplace_back(island.island, island.metrics.f1);
            scores.push_back(std::move(s));
        }
        result.variants.push_back(std::move(outcome));
    }

    if (!scores.empty()) result.table = aggregate(scores);
    const std::string csv = result.table.to_csv();
    const std::string text = result.table.to_text();
    write_text(out_dir / "results.csv", csv);
    write_text(out_dir / "results.txt", text);

    json checksums = json::object();
    for (const auto& island : manifest.islands) {
        for (const auto& t : island.tiles) checksums[t.image_path] = t.sha256;
    }
    json variants = json::array();
    for (const auto& o : result.variants) {
        json island_metrics = json::object();
        for (const auto& e : o.islands) island_metrics[e.island] = metrics_to_json(e.metrics);
        json vj{{"name", o.name},
                {"status", o.completed ? "completed" : "aborted"},
                {"backend_identities", o.backend_identities},
                {"metrics", island_metrics}};
        if (!o.completed) vj["cause"] = o.cause;
        variants.push_back(std::move(vj));
    }
    const std::vector<std::uint8_t> csv_bytes(csv.begin(), csv.end());
    const json record{{"started_at", started},
                      {"finished_at", utc_now()},
                      {"config", cfg.to_json()},
                      {"seeds", {{"experiment", cfg.seed}, {"splits", train.seed}}},
                      {"survey",
                       {{"root", manifest.root.string()},
                        {"manifest_sha256", sha256_file(manifest.root / "manifest.json")},
                        {"tiles", checksums}}},
                      {"variants", variants},
                      {"outputs", {{"results.csv", sha256_hex(csv_bytes)}}}};
    write_text(out_dir / "run.json", record.dump(2) + "\n");
    return result;
}

}  // namespace birdcount
