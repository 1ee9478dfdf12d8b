// birdcount: command-line front end for the survey pipeline.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "birdcount/augment.hpp"
#include "birdcount/backend.hpp"
#include "birdcount/errors.hpp"
#include "birdcount/eval.hpp"
#include "birdcount/ingest.hpp"
#include "birdcount/io.hpp"
#include "birdcount/parallel.hpp"
#include "birdcount/report.hpp"
#include "birdcount/slicer.hpp"
#include "birdcount/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace birdcount;

namespace {

struct Globals {
    std::uint64_t seed = 0;
    int workers = 1;
    std::string config;
    std::string out;
};

json read_json(const fs::path& path, bool is_config) {
    try {
        return json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        const std::string msg = path.string() + " is not valid JSON: " + e.what();
        if (is_config) throw UsageError(msg);
        throw DataError(msg);
    }
}

fs::path require_out(const Globals& g, const char* what) {
    if (g.out.empty()) throw UsageError(std::string("--out is required for ") + what);
    return g.out;
}

const TileRecord& find_tile(const SurveyManifest& m, const std::string& image_id, const IslandRecord** island) {
    for (const auto& isl : m.islands) {
        for (const auto& t : isl.tiles) {
            if (t.image_id() == image_id) {
                *island = &isl;
                return t;
            }
        }
    }
    throw DataError("survey has no tile '" + image_id + "'");
}

// ---------------------------------------------------------------------------

struct IngestArgs {
    std::vector<std::string> mosaics;
    std::string points;
    IngestConfig cfg;
};

int cmd_ingest(const Globals& g, const IngestArgs& a) {
    const fs::path out = require_out(g, "ingest");
    std::map<std::string, fs::path> paths;
    for (const auto& m : a.mosaics) {
        const auto eq = m.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == m.size()) {
            throw UsageError("--mosaic expects island=path, got '" + m + "'");
        }
        if (!paths.emplace(m.substr(0, eq), m.substr(eq + 1)).second) {
            throw UsageError("island '" + m.substr(0, eq) + "' given twice");
        }
    }
    std::map<std::string, Raster> rasters;
    std::map<std::string, ImageSize> bounds;
    for (const auto& [island, path] : paths) {
        rasters[island] = read_png(path);
        bounds[island] = ImageSize{rasters[island].cols, rasters[island].rows};
    }
    const auto points = parse_points_file(a.points, bounds);

    std::vector<AnnotatedTile> tiles;
    for (const auto& [island, raster] : rasters) {
        std::vector<PointAnnotation> mine;
        for (const auto& p : points) {
            if (p.island == island) mine.push_back(p);
        }
        if (mine.empty()) {
            std::cerr << "warning: island " << island << " has no annotations and yields no tiles\n";
            continue;
        }
        auto t = extract_supertiles(island, raster, mine, a.cfg, g.workers);
        std::move(t.begin(), t.end(), std::back_inserter(tiles));
    }
    const auto manifest = write_manifest(tiles, out, a.cfg);
    for (const auto& isl : manifest.islands) {
        std::cout << isl.name << ": " << isl.tiles.size() << " tiles, " << isl.annotation_count() << " annotations\n";
    }
    std::cout << "total: " << manifest.tile_count() << " tiles, " << manifest.annotation_count() << " annotations\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::vector<std::string> islands;
    ColonyConfig colony;
};

int cmd_synth(const Globals& g, SynthArgs a) {
    const fs::path out = require_out(g, "synth");
    ColonyConfig base = a.colony;
    if (!g.config.empty()) base = ColonyConfig::from_json(read_json(g.config, true));
    if (a.islands.empty()) a.islands.push_back(base.island);

    std::vector<PointAnnotation> points;
    json record = json::array();
    for (const auto& island : a.islands) {
        ColonyConfig c = base;
        c.island = island;
        c.seed = SeedHasher(g.seed).add(island).value();
        const Colony colony = generate_colony(c);
        write_png(out / (island + ".png"), colony.pixels);
        const auto pts = colony.points();
        points.insert(points.end(), pts.begin(), pts.end());
        record.push_back(c.to_json());
        std::cout << island << ": " << colony.birds.size() << " birds, " << c.width << "x" << c.height << "\n";
    }
    write_text(out / "points.csv", format_points(points));
    write_text(out / "colonies.json", json{{"seed", g.seed}, {"colonies", record}}.dump(2) + "\n");
    return 0;
}

// ---------------------------------------------------------------------------

struct AugmentArgs {
    std::string manifest;
    std::string recipe = "improved";
    int epochs = 1;
};

int cmd_augment_export(const Globals& g, const AugmentArgs& a) {
    const fs::path out = require_out(g, "augment-export");
    AugmentConfig cfg;
    if (!g.config.empty()) cfg = AugmentConfig::from_json(read_json(g.config, true));
    if (a.recipe == "baseline") cfg.recipe = Recipe::baseline;
    else if (a.recipe == "improved") cfg.recipe = Recipe::improved;
    else throw UsageError("--recipe must be 'improved' or 'baseline'");
    cfg.validate();
    if (a.epochs < 1) throw UsageError("--epochs must be at least 1");

    const SurveyManifest m = load_manifest(a.manifest);
    struct Job {
        const IslandRecord* island;
        const TileRecord* tile;
        int epoch;
    };
    std::vector<Job> jobs;
    for (int e = 0; e < a.epochs; ++e) {
        for (const auto& isl : m.islands) {
            for (const auto& t : isl.tiles) jobs.push_back({&isl, &t, e});
        }
    }
    std::vector<json> samples(jobs.size());
    std::vector<std::size_t> order(jobs.size());
    std::iota(order.begin(), order.end(), 0);
    parallel_for_each(order, g.workers, [&](std::size_t k) {
        const Job& job = jobs[k];
        const AnnotatedTile tile = load_tile(m, *job.island, *job.tile);
        const auto seed = sample_seed(g.seed, job.island->name, job.tile->grid_row, job.tile->grid_col, job.epoch, 0);
        const Sample s = augment_sample(Sample{tile.pixels, tile.boxes}, cfg, seed);
        const std::string stem = "epoch_" + std::to_string(job.epoch) + "/" +
                                 tile_stem(job.island->name, job.tile->grid_row, job.tile->grid_col);
        write_png(out / (stem + ".png"), s.pixels);
        write_text(out / (stem + ".boxes.csv"), format_boxes_csv(s.boxes));
        samples[k] = json{{"source", job.tile->image_id()},
                          {"source_sha256", job.tile->sha256},
                          {"epoch", job.epoch},
                          {"seed", seed},
                          {"image", stem + ".png"},
                          {"boxes", stem + ".boxes.csv"},
                          {"box_count", s.boxes.size()}};
    });
    const json record{{"augment", cfg.to_json()},
                      {"seed", g.seed},
                      {"epochs", a.epochs},
                      {"survey", fs::absolute(a.manifest).lexically_normal().string()},
                      {"samples", samples}};
    write_text(out / "augment_record.json", record.dump(2) + "\n");
    std::cout << "exported " << jobs.size() << " samples\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct BackendArgs {
    std::string spec;
    std::optional<int> fixed_input;
    int timeout_ms = 30000;
    int max_parallel = 1;

    BackendSpec resolve() const {
        BackendSpec s = BackendSpec::parse(spec);
        s.fixed_input = fixed_input;
        s.timeout = std::chrono::milliseconds(timeout_ms);
        s.max_parallel = max_parallel;
        s.validate();
        return s;
    }
};

struct SliceArgs {
    std::string image;
    std::string image_id;
    BackendArgs backend;
    SliceSpec slice;
    bool whole_image = false;
    GeometryConfig geometry;
    std::string record;
};

int cmd_slice_infer(const Globals& g, const SliceArgs& a) {
    const fs::path out = require_out(g, "slice-infer");
    a.geometry.validate();
    if (!a.whole_image) a.slice.validate();
    const BackendSpec bs = a.backend.resolve();
    const Raster image = read_png(a.image);
    const std::string id = a.image_id.empty() ? fs::path(a.image).stem().string() : a.image_id;
    const SliceSpec spec = a.whole_image ? SliceSpec::whole_image(image.cols, image.rows) : a.slice;

    BackendPtr backend = make_backend(bs);
    std::shared_ptr<RecordingBackend> recorder;
    if (!a.record.empty()) {
        recorder = std::make_shared<RecordingBackend>(backend);
        backend = recorder;
    }
    const Bridge bridge(backend, bs.fixed_input);
    SliceRunOptions opts;
    opts.workers = std::max(g.workers, bs.max_parallel);
    const MergedResult r = run_sliced_inference(image, id, bridge, spec, a.geometry, opts);
    write_text(out, merged_result_to_json(id, image.cols, image.rows, r).dump(2) + "\n");
    if (recorder) write_text(a.record, recorder->to_json().dump(2) + "\n");
    std::cout << id << ": " << r.per_window_counts.size() << " windows, " << r.merge_stats.raw_count
              << " raw detections, " << r.merge_stats.merged_count << " after merge\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string manifest;
    std::vector<std::string> detections;
    double iou = 0.1;
};

int cmd_eval(const Globals& g, const EvalArgs& a) {
    const SurveyManifest m = load_manifest(a.manifest);
    json tiles = json::array();
    long tp = 0, fp = 0, fn = 0;
    for (const auto& file : a.detections) {
        const DetectionsFile d = detections_from_json(read_json(file, false));
        const IslandRecord* island = nullptr;
        const TileRecord& rec = find_tile(m, d.image, &island);
        if (rec.width != d.width || rec.height != d.height) {
            throw DataError(file + ": detections are for a " + std::to_string(d.width) + "x" +
                            std::to_string(d.height) + " image but tile " + d.image + " is " +
                            std::to_string(rec.width) + "x" + std::to_string(rec.height));
        }
        const AnnotatedTile tile = load_tile(m, *island, rec);
        const MatchResult match = match_detections(d.result.detections, tile.boxes, a.iou);
        const Metrics metrics = compute_metrics(match);
        tp += metrics.tp;
        fp += metrics.fp;
        fn += metrics.fn;
        tiles.push_back({{"image", d.image}, {"metrics", metrics_to_json(metrics)}, {"match", match_to_json(match)}});
        std::cout << d.image << ": P=" << format4(metrics.precision) << " R=" << format4(metrics.recall)
                  << " F1=" << format4(metrics.f1) << "\n";
    }
    const Metrics total = metrics_from_counts(tp, fp, fn);
    std::cout << "total: TP=" << tp << " FP=" << fp << " FN=" << fn << " P=" << format4(total.precision)
              << " R=" << format4(total.recall) << " F1=" << format4(total.f1) << "\n";
    if (!g.out.empty()) {
        write_text(g.out, json{{"iou_threshold", a.iou}, {"tiles", tiles}, {"metrics", metrics_to_json(total)}}.dump(2) +
                              "\n");
    }
    return 0;
}

// ---------------------------------------------------------------------------

struct LoiocvArgs {
    std::string manifest;
    double val_fraction = 0.125;
};

int cmd_loiocv(const Globals& g, const LoiocvArgs& a) {
    TrainConfig cfg;
    if (!g.config.empty()) cfg = TrainConfig::from_json(read_json(g.config, true));
    cfg.val_fraction = a.val_fraction;
    cfg.seed = g.seed;
    cfg.validate();
    const auto splits = loiocv_splits(load_manifest(a.manifest), cfg);
    for (const auto& s : splits) {
        std::cout << s.held_out_island << ": train " << s.train.size() << ", validation " << s.validation.size()
                  << ", test " << s.test.size() << "\n";
        for (const auto& w : s.warnings) std::cerr << "warning: " << w << "\n";
    }
    const json doc = splits_to_json(splits);
    if (g.out.empty()) std::cout << doc.dump(2) << "\n";
    else write_text(g.out, doc.dump(2) + "\n");
    return 0;
}

// ---------------------------------------------------------------------------

struct OverlayArgs {
    std::string manifest;
    std::string detections;
    double iou = 0.1;
    int stroke = 2;
};

int cmd_overlay(const Globals& g, const OverlayArgs& a) {
    const fs::path out = require_out(g, "overlay");
    const SurveyManifest m = load_manifest(a.manifest);
    const DetectionsFile d = detections_from_json(read_json(a.detections, false));
    const IslandRecord* island = nullptr;
    const TileRecord& rec = find_tile(m, d.image, &island);
    const AnnotatedTile tile = load_tile(m, *island, rec);
    const MatchResult match = match_detections(d.result.detections, tile.boxes, a.iou);
    OverlayStyle style;
    style.stroke_width = a.stroke;
    write_png(out, render_overlay(tile.pixels, match, style));
    std::cout << d.image << ": " << match.tp.size() << " TP, " << match.fp.size() << " FP, " << match.fn.size()
              << " FN\n";
    return 0;
}

// ---------------------------------------------------------------------------

int cmd_run_experiment(const Globals& g) {
    if (g.config.empty()) throw UsageError("run-experiment needs --config <experiment.json>");
    const fs::path out = require_out(g, "run-experiment");
    ExperimentConfig cfg = load_experiment_config(g.config);
    if (g.workers > 1) cfg.workers = g.workers;
    const ExperimentResult r = run_experiment(cfg, out);
    std::cout << r.table.to_text();
    int code = 0;
    for (const auto& v : r.variants) {
        if (v.completed) continue;
        std::cerr << "variant " << v.name << " aborted: " << v.cause << "\n";
        if (code == 0) code = static_cast<int>(v.failure_code);
    }
    return code;
}

int cmd_backend_check(const BackendArgs& a) {
    bool ok = true;
    for (const auto& c : run_conformance(a.resolve())) {
        std::cout << (c.passed ? "PASS " : "FAIL ") << c.name;
        if (!c.detail.empty()) std::cout << ": " << c.detail;
        std::cout << "\n";
        ok = ok && c.passed;
    }
    return ok ? 0 : static_cast<int>(ExitCode::backend);
}

void add_backend_options(CLI::App* cmd, BackendArgs& b) {
    cmd->add_option("--backend", b.spec, "offline:<file>, subprocess:<command> or http://host:port")->required();
    cmd->add_option("--fixed-input", b.fixed_input, "square input size the backend requires; patches are padded");
    cmd->add_option("--timeout-ms", b.timeout_ms, "per-request timeout")->capture_default_str();
    cmd->add_option("--max-parallel", b.max_parallel, "requests in flight at once")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Seabird survey pipeline: tiling, sliced inference, augmentation and evaluation"};
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    app.add_option("--seed", g.seed, "run seed")->capture_default_str();
    app.add_option("--workers", g.workers, "worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--config", g.config, "JSON configuration for the subcommand");
    app.add_option("--out", g.out, "output file or directory");

    IngestArgs ingest;
    auto* c_ingest = app.add_subcommand("ingest", "cut mosaics into annotated supertiles");
    c_ingest->add_option("--mosaic", ingest.mosaics, "island=path.png (repeatable)")->required();
    c_ingest->add_option("--points", ingest.points, "point annotations CSV (island,x,y,annotator)")->required();
    c_ingest->add_option("--box-size", ingest.cfg.pseudo_box_size, "pseudo-box side")->capture_default_str();
    c_ingest->add_option("--tile-size", ingest.cfg.supertile_size, "supertile side")->capture_default_str();

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth", "render synthetic colonies with ground-truth points");
    c_synth->add_option("--island", synth.islands, "island name (repeatable)");
    c_synth->add_option("--width", synth.colony.width)->capture_default_str();
    c_synth->add_option("--height", synth.colony.height)->capture_default_str();
    c_synth->add_option("--birds", synth.colony.bird_count)->capture_default_str();
    c_synth->add_option("--separation", synth.colony.min_separation)->capture_default_str();

    AugmentArgs aug;
    auto* c_aug = app.add_subcommand("augment-export", "write augmented training samples");
    c_aug->add_option("--manifest", aug.manifest, "survey directory")->required();
    c_aug->add_option("--recipe", aug.recipe, "improved or baseline")->capture_default_str();
    c_aug->add_option("--epochs", aug.epochs)->capture_default_str();

    SliceArgs slice;
    auto* c_slice = app.add_subcommand("slice-infer", "sliced inference over one image");
    c_slice->add_option("--image", slice.image)->required();
    c_slice->add_option("--image-id", slice.image_id, "identity sent to the backend (default: file stem)");
    add_backend_options(c_slice, slice.backend);
    c_slice->add_option("--patch", slice.slice.patch_size)->capture_default_str();
    c_slice->add_option("--overlap", slice.slice.overlap_ratio)->capture_default_str();
    c_slice->add_flag("--whole-image", slice.whole_image, "one window over the whole image");
    c_slice->add_option("--nms", slice.geometry.nms_iou)->capture_default_str();
    c_slice->add_option("--score", slice.geometry.score_floor)->capture_default_str();
    c_slice->add_option("--record", slice.record, "also write raw backend answers for offline replay");

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "match detections against survey ground truth");
    c_eval->add_option("--manifest", ev.manifest, "survey directory")->required();
    c_eval->add_option("--detections", ev.detections, "slice-infer output (repeatable)")->required();
    c_eval->add_option("--iou", ev.iou)->capture_default_str();

    LoiocvArgs lo;
    auto* c_lo = app.add_subcommand("loiocv", "leave-one-island-out splits");
    c_lo->add_option("--manifest", lo.manifest, "survey directory")->required();
    c_lo->add_option("--val-fraction", lo.val_fraction)->capture_default_str();

    OverlayArgs ov;
    auto* c_ov = app.add_subcommand("overlay", "draw TP/FP/FN boxes on a tile");
    c_ov->add_option("--manifest", ov.manifest, "survey directory")->required();
    c_ov->add_option("--detections", ov.detections, "slice-infer output for one tile")->required();
    c_ov->add_option("--iou", ov.iou)->capture_default_str();
    c_ov->add_option("--stroke", ov.stroke)->capture_default_str();

    auto* c_run = app.add_subcommand("run-experiment", "evaluate every variant of an experiment config");

    BackendArgs check;
    auto* c_check = app.add_subcommand("backend-check", "run the protocol conformance checks against a backend");
    add_backend_options(c_check, check);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : static_cast<int>(ExitCode::usage);
    }

    try {
        if (c_ingest->parsed()) return cmd_ingest(g, ingest);
        if (c_synth->parsed()) return cmd_synth(g, synth);
        if (c_aug->parsed()) return cmd_augment_export(g, aug);
        if (c_slice->parsed()) return cmd_slice_infer(g, slice);
        if (c_eval->parsed()) return cmd_eval(g, ev);
        if (c_lo->parsed()) return cmd_loiocv(g, lo);
        if (c_ov->parsed()) return cmd_overlay(g, ov);
        if (c_run->parsed()) return cmd_run_experiment(g);
        if (c_check->parsed()) return cmd_backend_check(check);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(e.code());
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return static_cast<int>(ExitCode::invariant);
    }
    return static_cast<int>(ExitCode::usage);
}
