#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include <opencv2/core.hpp>

#include "birdcount/geometry.hpp"

namespace test_support {

inline bool same_pixels(const cv::Mat& a, const cv::Mat& b) {
    return a.size() == b.size() && a.type() == b.type() && (a.empty() || cv::norm(a, b, cv::NORM_INF) == 0.0);
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("birdcount_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

inline birdcount::PixelBox random_box(std::mt19937_64& rng, int extent, int max_side) {
    std::uniform_int_distribution<int> side(1, max_side);
    const int w = side(rng), h = side(rng);
    const int x = std::uniform_int_distribution<int>(0, extent - w)(rng);
    const int y = std::uniform_int_distribution<int>(0, extent - h)(rng);
    return birdcount::PixelBox(x, y, x + w, y + h);
}

/// IoU from raw coordinates in floating point, independent of the library.
inline double reference_iou(const birdcount::PixelBox& a, const birdcount::PixelBox& b) {
    const double iw = std::max(0, std::min(a.xmax(), b.xmax()) - std::max(a.xmin(), b.xmin()));
    const double ih = std::max(0, std::min(a.ymax(), b.ymax()) - std::max(a.ymin(), b.ymin()));
    const double inter = iw * ih;
    const double ua = double(a.width()) * a.height() + double(b.width()) * b.height() - inter;
    return inter / ua;
}

/// Quadratic textbook NMS: drop below floor, visit by (score desc, index),
/// keep a box unless it overlaps a kept one above the threshold.
inline std::vector<birdcount::Detection> reference_nms(const std::vector<birdcount::Detection>& dets,
                                                       double iou_thr, double floor) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < dets.size(); ++i) {
        if (!(dets[i].score < floor)) idx.push_back(i);
    }
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
        return a < b;
    });
    std::vector<birdcount::Detection> kept;
    for (auto i : idx) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (reference_iou(k.box, dets[i].box) > iou_thr) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(dets[i]);
    }
    return kept;
}

/// Maximum-cardinality one-to-one matching with IoU >= thr, by exhaustive
/// search. Only for small inputs.
inline int optimal_match_count(const std::vector<birdcount::PixelBox>& dets,
                               const std::vector<birdcount::PixelBox>& gts, double thr) {
    int best = 0;
    std::vector<bool> used(gts.size(), false);
    auto rec = [&](auto&& self, std::size_t d, int count) -> void {
        if (count + static_cast<int>(dets.size() - d) <= best) return;
        if (d == dets.size()) {
            best = std::max(best, count);
            return;
        }
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (!used[g] && reference_iou(dets[d], gts[g]) >= thr) {
                used[g] = true;
                self(self, d + 1, count + 1);
                used[g] = false;
            }
        }
        self(self, d + 1, count);
    };
    rec(rec, 0, 0);
    return best;
}

}  // namespace test_support
