#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace birdcount {

/// Axis-aligned box in image pixel coordinates, half-open:
/// [xmin, xmax) x [ymin, ymax), origin top-left, y pointing down.
///
/// A PixelBox is never empty. Operations that could produce an empty box
/// (clip) return std::optional instead.
class PixelBox {
public:
    PixelBox(int xmin, int ymin, int xmax, int ymax);

    int xmin() const noexcept { return xmin_; }
    int ymin() const noexcept { return ymin_; }
    int xmax() const noexcept { return xmax_; }
    int ymax() const noexcept { return ymax_; }
    int width() const noexcept { return xmax_ - xmin_; }
    int height() const noexcept { return ymax_ - ymin_; }
    std::int64_t area() const noexcept {
        return static_cast<std::int64_t>(width()) * static_cast<std::int64_t>(height());
    }

    /// Twice the centre coordinate; exact for odd extents.
    int center_x2() const noexcept { return xmin_ + xmax_; }
    int center_y2() const noexcept { return ymin_ + ymax_; }

    /// True when pixel (x, y) lies inside the box.
    bool contains(int x, int y) const noexcept {
        return x >= xmin_ && x < xmax_ && y >= ymin_ && y < ymax_;
    }
    /// True when `other` lies entirely inside this box.
    bool contains(const PixelBox& other) const noexcept {
        return other.xmin_ >= xmin_ && other.xmax_ <= xmax_ && other.ymin_ >= ymin_ &&
               other.ymax_ <= ymax_;
    }

    friend bool operator==(const PixelBox&, const PixelBox&) = default;

private:
    int xmin_, ymin_, xmax_, ymax_;
};

std::ostream& operator<<(std::ostream& os, const PixelBox& b);

/// Detector output: a box, a confidence in [0, 1] and a class label.
struct Detection {
    PixelBox box;
    double score;
    std::string label = "bird";

    friend bool operator==(const Detection&, const Detection&) = default;
};

/// Throws InvariantError when the score lies outside [0, 1].
Detection make_detection(const PixelBox& box, double score, std::string label = "bird");

struct GeometryConfig {
    double nms_iou = 0.05;
    double score_floor = 0.1;
    double eval_iou = 0.1;

    /// Throws UsageError unless every threshold is in (0, 1).
    void validate() const;
};

std::int64_t intersection_area(const PixelBox& a, const PixelBox& b) noexcept;

/// Intersection over union. Areas are exact integers; the single division
/// happens at the end.
double iou(const PixelBox& a, const PixelBox& b) noexcept;

std::optional<PixelBox> clip(const PixelBox& b, const PixelBox& bounds) noexcept;

PixelBox translate(const PixelBox& b, int dx, int dy) noexcept;

/// Greedy class-agnostic non-maximum suppression.
///
/// Detections scoring below cfg.score_floor are dropped first. The rest are
/// visited in descending score order (equal scores keep input order) and a
/// detection is suppressed when its IoU with an already kept detection
/// exceeds cfg.nms_iou. The result is in visiting order.
std::vector<Detection> nms(const std::vector<Detection>& dets, const GeometryConfig& cfg);

}  // namespace birdcount
