#pragma once

// Detector logic shared by the mock subprocess backend and the in-process
// HTTP fixture: bright blobs (grey > 180) become boxes.

#include <string>

#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>

#include "birdcount/io.hpp"

namespace mock {

inline nlohmann::json detect_blobs(const birdcount::Raster& img) {
    cv::Mat grey, mask, labels, stats, centroids;
    cv::cvtColor(img, grey, cv::COLOR_BGR2GRAY);
    cv::threshold(grey, mask, 180, 255, cv::THRESH_BINARY);
    const int n = cv::connectedComponentsWithStats(mask, labels, stats, centroids, 8);
    nlohmann::json dets = nlohmann::json::array();
    for (int i = 1; i < n; ++i) {
        const int x = stats.at<int>(i, cv::CC_STAT_LEFT), y = stats.at<int>(i, cv::CC_STAT_TOP);
        const int w = stats.at<int>(i, cv::CC_STAT_WIDTH), h = stats.at<int>(i, cv::CC_STAT_HEIGHT);
        dets.push_back({{"xmin", x}, {"ymin", y}, {"xmax", x + w}, {"ymax", y + h}, {"score", 0.9}, {"label", "bird"}});
    }
    return dets;
}

/// Answers one request document. `mode` alters the answer for failure tests.
inline nlohmann::json answer(const nlohmann::json& req, const std::string& mode) {
    const std::string id = req.at("request_id").get<std::string>();
    if (mode == "badid") return {{"request_id", id + "-wrong"}, {"detections", nlohmann::json::array()}};
    if (mode == "error") return {{"request_id", id}, {"error", "model exploded"}};
    if (mode == "empty") return {{"request_id", id}, {"detections", nlohmann::json::array()}};
    const int w = req.at("width").get<int>(), h = req.at("height").get<int>();
    if (mode == "oob") {
        return {{"request_id", id},
                {"detections", {{{"xmin", 0}, {"ymin", 0}, {"xmax", w + 5}, {"ymax", h}, {"score", 0.5}}}}};
    }
    if (mode == "schema") {
        return {{"request_id", id}, {"detections", {{{"xmin", "zero"}, {"ymin", 0}, {"xmax", 1}, {"ymax", 1}}}}};
    }
    const auto bytes = birdcount::base64_decode(req.at("image").get<std::string>());
    const birdcount::Raster img = birdcount::decode_png(bytes);
    return {{"request_id", id}, {"detections", detect_blobs(img)}};
}

}  // namespace mock
