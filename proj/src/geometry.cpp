#include "birdcount/geometry.hpp"

#include <algorithm>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_map>

#include "birdcount/errors.hpp"

namespace birdcount {

PixelBox::PixelBox(int xmin, int ymin, int xmax, int ymax)
    : xmin_(xmin), ymin_(ymin), xmax_(xmax), ymax_(ymax) {
    if (xmin >= xmax || ymin >= ymax) {
        std::ostringstream os;
        os << "empty box (" << xmin << "," << ymin << "," << xmax << "," << ymax << ")";
        throw InvariantError(os.str());
    }
}

std::ostream& operator<<(std::ostream& os, const PixelBox& b) {
    return os << "(" << b.xmin() << "," << b.ymin() << "," << b.xmax() << "," << b.ymax() << ")";
}

Detection make_detection(const PixelBox& box, double score, std::string label) {
    if (!(score >= 0.0 && score <= 1.0)) {
        throw InvariantError("detection score " + std::to_string(score) + " outside [0,1]");
    }
    return Detection{box, score, std::move(label)};
}

void GeometryConfig::validate() const {
    auto check = [](double v, const char* name) {
        if (!(v > 0.0 && v < 1.0)) {
            throw UsageError(std::string(name) + " must lie in (0,1), got " + std::to_string(v));
        }
    };
    check(nms_iou, "nms_iou");
    check(score_floor, "score_floor");
    check(eval_iou, "eval_iou");
}

std::int64_t intersection_area(const PixelBox& a, const PixelBox& b) noexcept {
    const std::int64_t w = std::min(a.xmax(), b.xmax()) - std::max(a.xmin(), b.xmin());
    const std::int64_t h = std::min(a.ymax(), b.ymax()) - std::max(a.ymin(), b.ymin());
    if (w <= 0 || h <= 0) return 0;
    return w * h;
}

double iou(const PixelBox& a, const PixelBox& b) noexcept {
    const std::int64_t inter = intersection_area(a, b);
    if (inter == 0) return 0.0;
    const std::int64_t uni = a.area() + b.area() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

std::optional<PixelBox> clip(const PixelBox& b, const PixelBox& bounds) noexcept {
    const int x0 = std::max(b.xmin(), bounds.xmin());
    const int y0 = std::max(b.ymin(), bounds.ymin());
    const int x1 = std::min(b.xmax(), bounds.xmax());
    const int y1 = std::min(b.ymax(), bounds.ymax());
    if (x0 >= x1 || y0 >= y1) return std::nullopt;
    return PixelBox(x0, y0, x1, y1);
}

PixelBox translate(const PixelBox& b, int dx, int dy) noexcept {
    return PixelBox(b.xmin() + dx, b.ymin() + dy, b.xmax() + dx, b.ymax() + dy);
}

namespace {

// Buckets kept boxes by the grid cells they touch, so a candidate is only
// compared against kept boxes it can intersect.
class KeptIndex {
public:
    explicit KeptIndex(int cell) : cell_(cell) {}

    template <typename Fn>
    bool any_overlapping(const PixelBox& b, Fn&& fn) {
        ++stamp_;
        for (int cy = floor_div(b.ymin()); cy <= floor_div(b.ymax() - 1); ++cy) {
            for (int cx = floor_div(b.xmin()); cx <= floor_div(b.xmax() - 1); ++cx) {
                auto it = cells_.find(key(cx, cy));
                if (it == cells_.end()) continue;
                for (std::size_t k : it->second) {
                    if (seen_[k] == stamp_) continue;
                    seen_[k] = stamp_;
                    if (fn(k)) return true;
                }
            }
        }
        return false;
    }

    void insert(const PixelBox& b, std::size_t k) {
        seen_.push_back(0);
        for (int cy = floor_div(b.ymin()); cy <= floor_div(b.ymax() - 1); ++cy) {
            for (int cx = floor_div(b.xmin()); cx <= floor_div(b.xmax() - 1); ++cx) {
                cells_[key(cx, cy)].push_back(k);
            }
        }
    }

private:
    int floor_div(int v) const noexcept { return v >= 0 ? v / cell_ : -((-v + cell_ - 1) / cell_); }
    static std::int64_t key(int cx, int cy) noexcept {
        return (static_cast<std::int64_t>(cy) << 32) ^ static_cast<std::uint32_t>(cx);
    }

    int cell_;
    std::unordered_map<std::int64_t, std::vector<std::size_t>> cells_;
    std::vector<std::uint64_t> seen_;
    std::uint64_t stamp_ = 0;
};

}  // namespace

std::vector<Detection> nms(const std::vector<Detection>& dets, const GeometryConfig& cfg) {
    std::vector<std::size_t> order;
    order.reserve(dets.size());
    std::int64_t extent_sum = 0;
    for (std::size_t i = 0; i < dets.size(); ++i) {
        if (dets[i].score >= cfg.score_floor) {
            order.push_back(i);
            extent_sum += std::max(dets[i].box.width(), dets[i].box.height());
        }
    }
    if (order.empty()) return {};
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

    const auto mean_extent = extent_sum / static_cast<std::int64_t>(order.size());
    KeptIndex index(static_cast<int>(std::clamp<std::int64_t>(2 * mean_extent, 16, 4096)));

    std::vector<Detection> kept;
    for (std::size_t idx : order) {
        const PixelBox& candidate = dets[idx].box;
        const bool suppressed = index.any_overlapping(
            candidate, [&](std::size_t k) { return iou(kept[k].box, candidate) > cfg.nms_iou; });
        if (suppressed) continue;
        index.insert(candidate, kept.size());
        kept.push_back(dets[idx]);
    }
    return kept;
}

}  // namespace birdcount
