#include "birdcount/slicer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "birdcount/errors.hpp"
#include "birdcount/parallel.hpp"

namespace birdcount {

using nlohmann::json;

int SliceSpec::stride() const {
    return static_cast<int>(std::lround(patch_size * (1.0 - overlap_ratio)));
}

void SliceSpec::validate() const {
    if (patch_size < 1) throw UsageError("patch size must be at least 1");
    if (!(overlap_ratio >= 0.0 && overlap_ratio < 1.0)) throw UsageError("overlap ratio must lie in [0,1)");
    if (stride() < 1) throw UsageError("patch size and overlap give a stride below 1");
}

SliceSpec SliceSpec::whole_image(int width, int height) {
    return SliceSpec{std::max(width, height), 0.0};
}

namespace {

std::vector<int> axis_origins(int extent, int patch, int stride) {
    if (extent <= patch) return {0};
    std::vector<int> origins;
    for (int o = 0; o + patch < extent; o += stride) origins.push_back(o);
    // origins.back() + patch < extent, so the clamped origin is strictly larger.
    origins.push_back(extent - patch);
    return origins;
}

}  // namespace

SlicePlan plan_slices(int width, int height, const SliceSpec& spec) {
    spec.validate();
    if (width < 1 || height < 1) throw UsageError("cannot slice an empty image");
    SlicePlan plan{width, height, {}};
    const int pw = std::min(spec.patch_size, width);
    const int ph = std::min(spec.patch_size, height);
    const auto xs = axis_origins(width, spec.patch_size, spec.stride());
    const auto ys = axis_origins(height, spec.patch_size, spec.stride());
    plan.windows.reserve(xs.size() * ys.size());
    for (int y : ys) {
        for (int x : xs) plan.windows.emplace_back(x, y, x + pw, y + ph);
    }
    return plan;
}

std::vector<Detection> remap(const std::vector<Detection>& patch_dets, const PixelBox& window) {
    const PixelBox local(0, 0, window.width(), window.height());
    std::vector<Detection> out;
    out.reserve(patch_dets.size());
    for (const auto& d : patch_dets) {
        if (!local.contains(d.box)) {
            std::ostringstream os;
            os << "backend protocol violation: detection " << d.box << " exceeds window " << window;
            throw ProtocolError(os.str());
        }
        out.push_back(Detection{translate(d.box, window.xmin(), window.ymin()), d.score, d.label});
    }
    return out;
}

MergedResult merge(const std::vector<Detection>& all_dets, const GeometryConfig& cfg) {
    std::vector<std::size_t> order(all_dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto& da = all_dets[a];
        const auto& db = all_dets[b];
        if (da.score != db.score) return da.score > db.score;
        if (da.box.xmin() != db.box.xmin()) return da.box.xmin() < db.box.xmin();
        if (da.box.ymin() != db.box.ymin()) return da.box.ymin() < db.box.ymin();
        return a < b;
    });
    std::vector<Detection> canonical;
    canonical.reserve(all_dets.size());
    for (auto i : order) canonical.push_back(all_dets[i]);

    MergedResult result;
    result.detections = nms(canonical, cfg);
    result.merge_stats = {all_dets.size(), result.detections.size()};
    return result;
}

MergedResult run_sliced_inference(const Raster& image, const std::string& image_id, const Bridge& bridge,
                                  const SliceSpec& spec, const GeometryConfig& cfg,
                                  const SliceRunOptions& options) {
    cfg.validate();
    const SlicePlan plan = plan_slices(image.cols, image.rows, spec);
    const std::size_t n = plan.windows.size();

    std::vector<std::size_t> order = options.dispatch_order;
    if (order.empty()) {
        order.resize(n);
        std::iota(order.begin(), order.end(), 0);
    }
    {
        auto check = order;
        std::sort(check.begin(), check.end());
        std::vector<std::size_t> expect(n);
        std::iota(expect.begin(), expect.end(), 0);
        if (check != expect) throw UsageError("dispatch order is not a permutation of the slice plan");
    }

    std::vector<std::vector<Detection>> per_window(n);
    parallel_for_each(order, options.workers, [&](std::size_t w) {
        const PixelBox& window = plan.windows[w];
        const cv::Rect rect(window.xmin(), window.ymin(), window.width(), window.height());
        PatchRequest request{image_id, window, image(rect)};
        try {
            per_window[w] = remap(bridge.detect(request), window);
        } catch (const BackendTimeout& e) {
            throw BackendTimeout(window_key(image_id, window) + ": " + e.what());
        } catch (const ProtocolError& e) {
            throw ProtocolError(window_key(image_id, window) + ": " + e.what());
        } catch (const BackendError& e) {
            throw BackendError(window_key(image_id, window) + ": " + e.what());
        }
    });

    std::vector<Detection> all;
    std::vector<int> counts;
    for (auto& dets : per_window) {
        counts.push_back(static_cast<int>(dets.size()));
        all.insert(all.end(), std::make_move_iterator(dets.begin()), std::make_move_iterator(dets.end()));
    }
    MergedResult result = merge(all, cfg);
    result.per_window_counts = std::move(counts);
    return result;
}

json merged_result_to_json(const std::string& image, int width, int height, const MergedResult& r) {
    json dets = json::array();
    for (const auto& d : r.detections) dets.push_back(detection_to_json(d));
    return json{{"image", image},
                {"width", width},
                {"height", height},
                {"detections", std::move(dets)},
                {"per_window_counts", r.per_window_counts},
                {"merge_stats",
                 {{"raw_count", r.merge_stats.raw_count}, {"merged_count", r.merge_stats.merged_count}}}};
}

DetectionsFile detections_from_json(const json& doc) {
    DetectionsFile f;
    try {
        f.image = doc.at("image").get<std::string>();
        f.width = doc.at("width").get<int>();
        f.height = doc.at("height").get<int>();
        for (const auto& d : doc.at("detections")) f.result.detections.push_back(detection_from_json(d, f.width, f.height));
        if (doc.contains("per_window_counts")) f.result.per_window_counts = doc["per_window_counts"].get<std::vector<int>>();
        if (doc.contains("merge_stats")) {
            f.result.merge_stats.raw_count = doc["merge_stats"].at("raw_count").get<std::size_t>();
            f.result.merge_stats.merged_count = doc["merge_stats"].at("merged_count").get<std::size_t>();
        } else {
            f.result.merge_stats = {f.result.detections.size(), f.result.detections.size()};
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("detections document: ") + e.what());
    } catch (const ProtocolError& e) {
        throw DataError(std::string("detections document: ") + e.what());
    }
    return f;
}

}  // namespace birdcount
