#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "birdcount/backend.hpp"
#include "birdcount/geometry.hpp"
#include "birdcount/io.hpp"

namespace birdcount {

struct SliceSpec {
    int patch_size = 1000;
    double overlap_ratio = 0.2;

    /// round(patch_size * (1 - overlap_ratio)).
    int stride() const;
    void validate() const;

    /// A single window spanning the whole image: the resize-only path.
    static SliceSpec whole_image(int width, int height);
};

/// Overlapping inference windows over one image, row-major.
struct SlicePlan {
    int image_width = 0;
    int image_height = 0;
    std::vector<PixelBox> windows;
};

struct MergeStats {
    std::size_t raw_count = 0;
    std::size_t merged_count = 0;
};

struct MergedResult {
    std::vector<Detection> detections;  // image coordinates
    std::vector<int> per_window_counts;
    MergeStats merge_stats;
};

/// Window origins step by the stride; the last window along each axis is
/// shifted back so it ends exactly on the image edge. A dimension smaller
/// than the patch gets one window spanning it.
SlicePlan plan_slices(int width, int height, const SliceSpec& spec);

/// Patch-local -> image coordinates. Throws ProtocolError for a box that
/// does not fit in the window.
std::vector<Detection> remap(const std::vector<Detection>& patch_dets, const PixelBox& window);

/// Canonical sort (score desc, xmin, ymin, input index) followed by NMS.
MergedResult merge(const std::vector<Detection>& all_dets, const GeometryConfig& cfg);

struct SliceRunOptions {
    int workers = 1;
    /// Window dispatch order; empty means plan order. Must be a permutation.
    std::vector<std::size_t> dispatch_order;
};

/// Crops every planned window, asks the bridge for detections, remaps and
/// merges them. The result does not depend on dispatch order or worker
/// count. Any window failure aborts the whole run.
MergedResult run_sliced_inference(const Raster& image, const std::string& image_id, const Bridge& bridge,
                                  const SliceSpec& spec, const GeometryConfig& cfg,
                                  const SliceRunOptions& options = {});

nlohmann::json merged_result_to_json(const std::string& image, int width, int height, const MergedResult& r);

struct DetectionsFile {
    std::string image;
    int width = 0;
    int height = 0;
    MergedResult result;
};

/// Reads the slice-infer output document back.
DetectionsFile detections_from_json(const nlohmann::json& doc);

}  // namespace birdcount
