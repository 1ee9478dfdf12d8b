#include "birdcount/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include "birdcount/errors.hpp"
#include "birdcount/parallel.hpp"

namespace birdcount {

using nlohmann::json;

namespace {

/// Uniform grid over ground-truth boxes for intersection queries.
class TruthGrid {
public:
    explicit TruthGrid(const std::vector<GroundTruthBox>& gts) {
        std::int64_t extent = 0;
        for (const auto& g : gts) extent += std::max(g.box.width(), g.box.height());
        cell_ = gts.empty() ? 64 : static_cast<int>(std::clamp<std::int64_t>(2 * extent / static_cast<std::int64_t>(gts.size()), 16, 4096));
        for (std::size_t i = 0; i < gts.size(); ++i) {
            visit_cells(gts[i].box, [&](std::int64_t key) { cells_[key].push_back(i); });
        }
    }

    /// Indices of boxes sharing a cell with `b`, ascending, without repeats.
    std::vector<std::size_t> candidates(const PixelBox& b) const {
        std::vector<std::size_t> out;
        visit_cells(b, [&](std::int64_t key) {
            const auto it = cells_.find(key);
            if (it != cells_.end()) out.insert(out.end(), it->second.begin(), it->second.end());
        });
        std::sort(out.begin(), out.end());
        out.erase(std::unique(out.begin(), out.end()), out.end());
        return out;
    }

private:
    template <typename Fn>
    void visit_cells(const PixelBox& b, Fn&& fn) const {
        auto fdiv = [this](int v) { return v >= 0 ? v / cell_ : -((-v + cell_ - 1) / cell_); };
        for (int cy = fdiv(b.ymin()); cy <= fdiv(b.ymax() - 1); ++cy) {
            for (int cx = fdiv(b.xmin()); cx <= fdiv(b.xmax() - 1); ++cx) {
                fn((static_cast<std::int64_t>(cy) << 32) ^ static_cast<std::uint32_t>(cx));
            }
        }
    }

    int cell_ = 64;
    std::unordered_map<std::int64_t, std::vector<std::size_t>> cells_;
};

}  // namespace

MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruthBox>& gts,
                             double eval_iou) {
    if (!(eval_iou > 0.0 && eval_iou <= 1.0)) throw UsageError("evaluation IoU must lie in (0,1]");
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

    const TruthGrid grid(gts);
    std::vector<bool> matched(gts.size(), false);
    MatchResult result;
    result.iou_threshold = eval_iou;
    for (std::size_t di : order) {
        const Detection& d = dets[di];
        double best = 0.0;
        std::size_t best_idx = gts.size();
        for (std::size_t gi : grid.candidates(d.box)) {
            if (matched[gi]) continue;
            const double v = iou(d.box, gts[gi].box);
            if (v > best) {
                best = v;
                best_idx = gi;
            }
        }
        if (best_idx < gts.size() && best >= eval_iou) {
            matched[best_idx] = true;
            result.tp.push_back(MatchPair{d, gts[best_idx], best});
        } else {
            result.fp.push_back(d);
        }
    }
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
        if (!matched[gi]) result.fn.push_back(gts[gi]);
    }
    return result;
}

Metrics metrics_from_counts(long tp, long fp, long fn) {
    if (tp < 0 || fp < 0 || fn < 0) throw InvariantError("negative match counts");
    Metrics m;
    m.tp = tp;
    m.fp = fp;
    m.fn = fn;
    m.degenerate = (tp + fp == 0) || (tp + fn == 0);
    m.precision = tp + fp == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    m.recall = tp + fn == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
    // 2PR/(P+R) reduces to 2tp/(2tp+fp+fn); with tp == 0 one of P, R is 0
    // unless nothing was detected or expected at all.
    if (tp > 0) {
        m.f1 = static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn);
    } else {
        m.f1 = (fp == 0 && fn == 0) ? 1.0 : 0.0;
    }
    return m;
}

Metrics compute_metrics(const MatchResult& m) {
    return metrics_from_counts(static_cast<long>(m.tp.size()), static_cast<long>(m.fp.size()),
                               static_cast<long>(m.fn.size()));
}

double round4(double v) { return std::round(v * 1e4) / 1e4; }

std::string format4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", round4(v));
    return buf;
}

// ---------------------------------------------------------------------------

int validation_count(int tiles, double fraction) {
    if (tiles < 2) return 0;
    const int k = static_cast<int>(std::floor(tiles * fraction + 0.5));
    return std::clamp(k, 1, tiles - 1);
}

std::vector<CrossValSplit> loiocv_splits(const SurveyManifest& manifest, const TrainConfig& cfg) {
    cfg.validate();
    if (manifest.islands.size() < 2) throw DataError("leave-one-island-out needs at least two islands");

    // Validation subsets depend only on (seed, island).
    std::map<std::string, std::set<std::string>> validation_of;
    std::map<std::string, std::string> warning_of;
    for (const auto& island : manifest.islands) {
        std::vector<std::string> ids;
        for (const auto& t : island.tiles) ids.push_back(t.image_id());
        const int k = validation_count(static_cast<int>(ids.size()), cfg.val_fraction);
        if (ids.size() < 2) {
            warning_of[island.name] = "island " + island.name + " has " + std::to_string(ids.size()) +
                                      " tile(s); it contributes no validation tiles";
        }
        std::mt19937_64 rng(SeedHasher(cfg.seed).add(island.name).value());
        std::shuffle(ids.begin(), ids.end(), rng);
        validation_of[island.name] = std::set<std::string>(ids.begin(), ids.begin() + k);
    }

    std::vector<CrossValSplit> splits;
    for (const auto& held : manifest.islands) {
        CrossValSplit split;
        split.held_out_island = held.name;
        split.seed = cfg.seed;
        for (const auto& island : manifest.islands) {
            for (const auto& t : island.tiles) {
                const auto id = t.image_id();
                if (island.name == held.name) split.test.push_back(id);
                else if (validation_of[island.name].count(id)) split.validation.push_back(id);
                else split.train.push_back(id);
            }
            if (island.name != held.name && warning_of.count(island.name)) {
                split.warnings.push_back(warning_of[island.name]);
            }
        }
        splits.push_back(std::move(split));
    }
    return splits;
}

json splits_to_json(const std::vector<CrossValSplit>& splits) {
    json arr = json::array();
    for (const auto& s : splits) {
        arr.push_back({{"held_out_island", s.held_out_island},
                       {"seed", s.seed},
                       {"train", s.train},
                       {"validation", s.validation},
                       {"test", s.test},
                       {"warnings", s.warnings}});
    }
    return json{{"splits", std::move(arr)}};
}

std::vector<CrossValSplit> splits_from_json(const json& doc) {
    std::vector<CrossValSplit> out;
    try {
        for (const auto& j : doc.at("splits")) {
            CrossValSplit s;
            s.held_out_island = j.at("held_out_island").get<std::string>();
            s.seed = j.at("seed").get<std::uint64_t>();
            s.train = j.at("train").get<std::vector<std::string>>();
            s.validation = j.at("validation").get<std::vector<std::string>>();
            s.test = j.at("test").get<std::vector<std::string>>();
            s.warnings = j.value("warnings", std::vector<std::string>{});
            out.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("splits document: ") + e.what());
    }
    return out;
}

// ---------------------------------------------------------------------------

IslandEvaluation evaluate_run(const SurveyManifest& manifest, const CrossValSplit& split, const Bridge& bridge,
                              const SliceSpec& spec, const GeometryConfig& cfg, int workers) {
    const IslandRecord& island = manifest.island(split.held_out_island);
    std::vector<const TileRecord*> records;
    for (const auto& id : split.test) {
        const auto it = std::find_if(island.tiles.begin(), island.tiles.end(),
                                     [&](const TileRecord& t) { return t.image_id() == id; });
        if (it == island.tiles.end()) throw DataError("split references unknown tile " + id);
        records.push_back(&*it);
    }

    IslandEvaluation result;
    result.island = island.name;
    result.tiles.resize(records.size());
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    parallel_for_each(order, workers, [&](std::size_t k) {
        const TileRecord& rec = *records[k];
        const AnnotatedTile tile = load_tile(manifest, island, rec);
        const MergedResult merged = run_sliced_inference(tile.pixels, rec.image_id(), bridge, spec, cfg);
        TileEvaluation& te = result.tiles[k];
        te.image_id = rec.image_id();
        te.match = match_detections(merged.detections, tile.boxes, cfg.eval_iou);
        te.metrics = compute_metrics(te.match);
    });

    long tp = 0, fp = 0, fn = 0;
    for (const auto& t : result.tiles) {
        tp += t.metrics.tp;
        fp += t.metrics.fp;
        fn += t.metrics.fn;
    }
    result.metrics = metrics_from_counts(tp, fp, fn);
    return result;
}

namespace {

json box_json(const PixelBox& b) { return json::array({b.xmin(), b.ymin(), b.xmax(), b.ymax()}); }

}  // namespace

json match_to_json(const MatchResult& m) {
    json tp = json::array(), fp = json::array(), fn = json::array();
    for (const auto& p : m.tp) {
        tp.push_back({{"detection", detection_to_json(p.detection)}, {"truth", box_json(p.truth.box)}, {"iou", p.iou}});
    }
    for (const auto& d : m.fp) fp.push_back(detection_to_json(d));
    for (const auto& g : m.fn) fn.push_back(box_json(g.box));
    return json{{"iou_threshold", m.iou_threshold}, {"tp", std::move(tp)}, {"fp", std::move(fp)}, {"fn", std::move(fn)}};
}

json metrics_to_json(const Metrics& m) {
    return json{{"tp", m.tp},
                {"fp", m.fp},
                {"fn", m.fn},
                {"precision", m.precision},
                {"recall", m.recall},
                {"f1", m.f1},
                {"degenerate", m.degenerate}};
}

json island_evaluation_to_json(const IslandEvaluation& e) {
    json tiles = json::array();
    for (const auto& t : e.tiles) {
        tiles.push_back({{"image_id", t.image_id}, {"metrics", metrics_to_json(t.metrics)}, {"match", match_to_json(t.match)}});
    }
    return json{{"island", e.island}, {"metrics", metrics_to_json(e.metrics)}, {"tiles", std::move(tiles)}};
}

// ---------------------------------------------------------------------------

ResultsTable aggregate(const std::vector<VariantScores>& results) {
    ResultsTable table;
    if (results.empty()) return table;
    for (const auto& [island, f1] : results.front().f1) table.islands.push_back(island);
    const std::set<std::string> expected(table.islands.begin(), table.islands.end());
    if (expected.size() != table.islands.size()) throw DataError("duplicate island in results of " + results.front().name);
    if (expected.empty()) throw DataError("results of " + results.front().name + " cover no islands");

    for (const auto& variant : results) {
        std::map<std::string, double> by_island(variant.f1.begin(), variant.f1.end());
        std::set<std::string> got;
        for (const auto& kv : by_island) got.insert(kv.first);
        if (got != expected || by_island.size() != variant.f1.size()) {
            throw DataError("variant " + variant.name + " does not cover the same islands as " + results.front().name);
        }
        ResultsRow row;
        row.model = variant.name;
        for (const auto& island : table.islands) row.values.push_back(by_island[island]);
        row.average = std::accumulate(row.values.begin(), row.values.end(), 0.0) / static_cast<double>(row.values.size());
        table.rows.push_back(std::move(row));
    }
    return table;
}

std::string ResultsTable::to_csv() const {
    std::ostringstream os;
    os << "model";
    for (const auto& i : islands) os << ',' << i;
    os << ",average\n";
    for (const auto& r : rows) {
        os << r.model;
        for (double v : r.values) os << ',' << format4(v);
        os << ',' << format4(r.average) << '\n';
    }
    return os.str();
}

std::string ResultsTable::to_text() const {
    std::vector<std::vector<std::string>> cells;
    std::vector<std::string> header{"Model"};
    header.insert(header.end(), islands.begin(), islands.end());
    header.push_back("Average");
    cells.push_back(header);
    for (const auto& r : rows) {
        std::vector<std::string> line{r.model};
        for (double v : r.values) line.push_back(format4(v));
        line.push_back(format4(r.average));
        cells.push_back(std::move(line));
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& line : cells) {
        for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
    }
    std::ostringstream os;
    for (std::size_t r = 0; r < cells.size(); ++r) {
        for (std::size_t c = 0; c < cells[r].size(); ++c) {
            const auto& s = cells[r][c];
            if (c == 0) os << s << std::string(width[c] - s.size(), ' ');
            else os << " | " << std::string(width[c] - s.size(), ' ') << s;
        }
        os << '\n';
        if (r == 0) {
            std::size_t total = width[0];
            for (std::size_t c = 1; c < width.size(); ++c) total += 3 + width[c];
            os << std::string(total, '-') << '\n';
        }
    }
    return os.str();
}

}  // namespace birdcount
