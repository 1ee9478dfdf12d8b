#include "birdcount/backend.hpp"

#include <atomic>
#include <future>
#include <sstream>

#include <opencv2/imgproc.hpp>

#include "birdcount/errors.hpp"
#include "transport.hpp"

namespace birdcount {

using nlohmann::json;

std::string_view to_string(BackendSpec::Kind kind) {
    switch (kind) {
        case BackendSpec::Kind::offline: return "offline";
        case BackendSpec::Kind::subprocess: return "subprocess";
        case BackendSpec::Kind::http: return "http";
    }
    return "unknown";
}

void BackendSpec::validate() const {
    if (locator.empty()) throw UsageError("backend locator is empty");
    if (timeout.count() <= 0) throw UsageError("backend timeout must be positive");
    if (max_parallel < 1) throw UsageError("backend max_parallel must be at least 1");
    if (fixed_input && *fixed_input < 1) throw UsageError("backend fixed_input must be positive");
}

BackendSpec BackendSpec::parse(std::string_view text) {
    BackendSpec spec;
    if (text.starts_with("http://") || text.starts_with("https://")) {
        spec.kind = Kind::http;
        spec.locator = std::string(text);
    } else if (text.starts_with("offline:")) {
        spec.kind = Kind::offline;
        spec.locator = std::string(text.substr(8));
    } else if (text.starts_with("subprocess:")) {
        spec.kind = Kind::subprocess;
        spec.locator = std::string(text.substr(11));
    } else {
        throw UsageError("unrecognised backend '" + std::string(text) +
                         "' (expected offline:<file>, subprocess:<command> or http://host:port)");
    }
    spec.validate();
    return spec;
}

json BackendSpec::to_json() const {
    json j{{"kind", to_string(kind)},
           {"locator", locator},
           {"timeout_ms", timeout.count()},
           {"max_parallel", max_parallel}};
    j["fixed_input"] = fixed_input ? json(*fixed_input) : json(nullptr);
    return j;
}

BackendSpec BackendSpec::from_json(const json& j) {
    BackendSpec spec;
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "offline") spec.kind = Kind::offline;
    else if (kind == "subprocess") spec.kind = Kind::subprocess;
    else if (kind == "http") spec.kind = Kind::http;
    else throw UsageError("unknown backend kind '" + kind + "'");
    spec.locator = j.at("locator").get<std::string>();
    spec.timeout = std::chrono::milliseconds(j.value("timeout_ms", 30000));
    spec.max_parallel = j.value("max_parallel", 1);
    if (j.contains("fixed_input") && !j["fixed_input"].is_null()) spec.fixed_input = j["fixed_input"].get<int>();
    spec.validate();
    return spec;
}

void TrainConfig::validate() const {
    if (epochs < 1) throw UsageError("epochs must be at least 1");
    if (!(learning_rate > 0.0)) throw UsageError("learning_rate must be positive");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw UsageError("val_fraction must lie in (0,1)");
}

json TrainConfig::to_json() const {
    return json{{"epochs", epochs}, {"learning_rate", learning_rate}, {"val_fraction", val_fraction}, {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig cfg;
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.val_fraction = j.value("val_fraction", cfg.val_fraction);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------

Bridge::Bridge(BackendPtr backend, std::optional<int> fixed_input)
    : backend_(std::move(backend)), fixed_input_(fixed_input) {
    if (!backend_) throw InvariantError("bridge constructed without a backend");
}

std::vector<Detection> Bridge::detect(const PatchRequest& request) const {
    const int real_w = request.pixels.cols;
    const int real_h = request.pixels.rows;
    if (real_w < 1 || real_h < 1) throw InvariantError("empty patch for " + window_key(request.image_id, request.window));

    bool padded = false;
    PatchRequest forwarded{request.image_id, request.window, request.pixels};
    if (fixed_input_ && (real_w != *fixed_input_ || real_h != *fixed_input_)) {
        if (real_w > *fixed_input_ || real_h > *fixed_input_) {
            throw UsageError("patch " + std::to_string(real_w) + "x" + std::to_string(real_h) +
                             " exceeds the backend's fixed input " + std::to_string(*fixed_input_));
        }
        cv::copyMakeBorder(request.pixels, forwarded.pixels, 0, *fixed_input_ - real_h, 0, *fixed_input_ - real_w,
                           cv::BORDER_CONSTANT, cv::Scalar(0, 0, 0));
        padded = true;
    }

    const PixelBox sent(0, 0, forwarded.pixels.cols, forwarded.pixels.rows);
    const PixelBox real(0, 0, real_w, real_h);
    auto raw = backend_->detect(forwarded);

    std::vector<Detection> out;
    out.reserve(raw.size());
    for (auto& d : raw) {
        if (!sent.contains(d.box) || !(d.score >= 0.0 && d.score <= 1.0)) {
            std::ostringstream os;
            os << "backend " << backend_->identity() << " returned box " << d.box << " score " << d.score
               << " outside patch " << sent << " for " << window_key(request.image_id, request.window);
            throw ProtocolError(os.str());
        }
        if (padded) {
            if (d.box.center_x2() >= 2 * real_w || d.box.center_y2() >= 2 * real_h) continue;
            d.box = *clip(d.box, real);
        }
        out.push_back(std::move(d));
    }
    return out;
}

BackendPtr make_backend(const BackendSpec& spec) {
    spec.validate();
    switch (spec.kind) {
        case BackendSpec::Kind::offline: return load_offline(spec.locator);
        case BackendSpec::Kind::subprocess:
            return std::make_shared<SubprocessBackend>(spec.locator, spec.timeout, spec.max_parallel);
        case BackendSpec::Kind::http:
            return std::make_shared<HttpBackend>(spec.locator, spec.timeout, spec.max_parallel);
    }
    throw InvariantError("unhandled backend kind");
}

Bridge make_bridge(const BackendSpec& spec) { return Bridge(make_backend(spec), spec.fixed_input); }

// ---------------------------------------------------------------------------

std::string window_key(std::string_view image_id, const PixelBox& window) {
    return std::string(image_id) + ":" + std::to_string(window.xmin()) + ":" + std::to_string(window.ymin()) +
           ":" + std::to_string(window.xmax()) + ":" + std::to_string(window.ymax());
}

json detection_to_json(const Detection& d) {
    return json{{"xmin", d.box.xmin()}, {"ymin", d.box.ymin()}, {"xmax", d.box.xmax()},
                {"ymax", d.box.ymax()}, {"score", d.score},      {"label", d.label}};
}

namespace {

std::string excerpt(std::string_view payload) {
    constexpr std::size_t kMax = 160;
    if (payload.size() <= kMax) return std::string(payload);
    return std::string(payload.substr(0, kMax)) + "...";
}

}  // namespace

Detection detection_from_json(const json& j, int width, int height) {
    if (!j.is_object()) throw ProtocolError("detection is not an object: " + excerpt(j.dump()));
    for (const char* k : {"xmin", "ymin", "xmax", "ymax"}) {
        if (!j.contains(k) || !j[k].is_number_integer()) {
            throw ProtocolError(std::string("detection field '") + k + "' missing or not an integer: " +
                                excerpt(j.dump()));
        }
    }
    if (!j.contains("score") || !j["score"].is_number()) {
        throw ProtocolError("detection score missing or not a number: " + excerpt(j.dump()));
    }
    const int x0 = j["xmin"].get<int>(), y0 = j["ymin"].get<int>();
    const int x1 = j["xmax"].get<int>(), y1 = j["ymax"].get<int>();
    const double score = j["score"].get<double>();
    if (x0 >= x1 || y0 >= y1) throw ProtocolError("degenerate detection box: " + excerpt(j.dump()));
    if (x0 < 0 || y0 < 0 || x1 > width || y1 > height) {
        throw ProtocolError("detection outside " + std::to_string(width) + "x" + std::to_string(height) +
                            " patch: " + excerpt(j.dump()));
    }
    if (!(score >= 0.0 && score <= 1.0)) throw ProtocolError("detection score outside [0,1]: " + excerpt(j.dump()));
    std::string label = "bird";
    if (j.contains("label")) {
        if (!j["label"].is_string()) throw ProtocolError("detection label is not a string: " + excerpt(j.dump()));
        label = j["label"].get<std::string>();
    }
    return Detection{PixelBox(x0, y0, x1, y1), score, std::move(label)};
}

std::string encode_request(const std::string& request_id, const Raster& pixels) {
    json j{{"request_id", request_id},
           {"image", base64_encode(encode_png(pixels))},
           {"width", pixels.cols},
           {"height", pixels.rows}};
    return j.dump();
}

std::vector<Detection> decode_response(std::string_view payload, const std::string& expected_id, int width,
                                       int height) {
    json j;
    try {
        j = json::parse(payload);
    } catch (const json::exception&) {
        throw ProtocolError("unparseable response: " + excerpt(payload));
    }
    if (!j.is_object() || !j.contains("request_id") || !j["request_id"].is_string()) {
        throw ProtocolError("response without string request_id: " + excerpt(payload));
    }
    if (j["request_id"].get<std::string>() != expected_id) {
        throw ProtocolError("response request_id '" + j["request_id"].get<std::string>() + "' does not match '" +
                            expected_id + "'");
    }
    if (j.contains("error") && !j["error"].is_null()) {
        throw BackendError("backend reported an error for " + expected_id + ": " + excerpt(j["error"].dump()));
    }
    if (!j.contains("detections") || !j["detections"].is_array()) {
        throw ProtocolError("response without detections array: " + excerpt(payload));
    }
    std::vector<Detection> out;
    for (const auto& d : j["detections"]) out.push_back(detection_from_json(d, width, height));
    return out;
}

// ---------------------------------------------------------------------------

OfflineBackend::OfflineBackend(std::map<std::string, std::vector<Detection>> windows, std::string source)
    : windows_(std::move(windows)), source_(std::move(source)) {}

std::vector<Detection> OfflineBackend::detect(const PatchRequest& request) {
    const auto key = window_key(request.image_id, request.window);
    const auto it = windows_.find(key);
    if (it == windows_.end()) throw BackendError("offline detections have no entry for window " + key);
    return it->second;
}

std::shared_ptr<OfflineBackend> offline_from_json(const json& doc, std::string source) {
    std::map<std::string, std::vector<Detection>> windows;
    try {
        for (const auto& [key, dets] : doc.at("windows").items()) {
            // key is "<image>:<xmin>:<ymin>:<xmax>:<ymax>"; the image part may itself contain ':'.
            std::vector<int> coords;
            std::size_t end = key.size();
            for (int k = 0; k < 4; ++k) {
                const auto pos = key.rfind(':', end - 1);
                int v = 0;
                if (pos == std::string::npos || !parse_int(std::string_view(key).substr(pos + 1, end - pos - 1), v)) {
                    throw DataError("offline detections: malformed window key '" + key + "'");
                }
                coords.insert(coords.begin(), v);
                end = pos;
            }
            if (coords[0] >= coords[2] || coords[1] >= coords[3]) {
                throw DataError("offline detections: empty window in key '" + key + "'");
            }
            std::vector<Detection> list;
            for (const auto& d : dets) list.push_back(detection_from_json(d, coords[2] - coords[0], coords[3] - coords[1]));
            windows.emplace(key, std::move(list));
        }
    } catch (const json::exception& e) {
        throw DataError("offline detections: " + std::string(e.what()));
    } catch (const ProtocolError& e) {
        throw DataError(std::string("offline detections: ") + e.what());
    }
    return std::make_shared<OfflineBackend>(std::move(windows), std::move(source));
}

std::shared_ptr<OfflineBackend> load_offline(const std::filesystem::path& file) {
    json doc;
    try {
        doc = json::parse(read_text(file));
    } catch (const json::exception& e) {
        throw DataError(file.string() + ": " + e.what());
    }
    return offline_from_json(doc, file.string());
}

std::vector<Detection> RecordingBackend::detect(const PatchRequest& request) {
    auto dets = inner_->detect(request);
    std::lock_guard lock(mutex_);
    recorded_[window_key(request.image_id, request.window)] = dets;
    return dets;
}

json RecordingBackend::to_json() const {
    std::lock_guard lock(mutex_);
    json windows = json::object();
    for (const auto& [key, dets] : recorded_) {
        json list = json::array();
        for (const auto& d : dets) list.push_back(detection_to_json(d));
        windows[key] = std::move(list);
    }
    return json{{"windows", std::move(windows)}};
}

// ---------------------------------------------------------------------------

std::string_view to_string(HealthReport::Status s) {
    switch (s) {
        case HealthReport::Status::up: return "up";
        case HealthReport::Status::down: return "down";
        case HealthReport::Status::protocol_error: return "protocol_error";
    }
    return "unknown";
}

HealthReport health_check(DetectorBackend& backend) {
    HealthReport report;
    const auto start = std::chrono::steady_clock::now();
    try {
        PatchRequest probe{"__health__", PixelBox(0, 0, 2, 2), Raster(2, 2, CV_8UC3, cv::Scalar(0, 0, 0))};
        const auto dets = backend.detect(probe);
        report.latency_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        if (dets.empty()) {
            report.status = HealthReport::Status::up;
        } else {
            report.status = HealthReport::Status::protocol_error;
            report.cause = "black probe patch produced " + std::to_string(dets.size()) + " detections";
        }
    } catch (const ProtocolError& e) {
        report.status = HealthReport::Status::protocol_error;
        report.cause = e.what();
    } catch (const Error& e) {
        report.status = HealthReport::Status::down;
        report.cause = e.what();
    }
    return report;
}

HealthReport health_check(const BackendSpec& spec) {
    BackendPtr backend;
    try {
        backend = make_backend(spec);
    } catch (const Error& e) {
        return HealthReport{HealthReport::Status::down, e.what(), 0.0};
    }
    if (spec.kind == BackendSpec::Kind::offline) {
        return HealthReport{HealthReport::Status::up, {}, 0.0};
    }
    if (spec.kind == BackendSpec::Kind::http) {
        auto report = static_cast<HttpBackend&>(*backend).ping();
        if (report.status != HealthReport::Status::up) return report;
    }
    return health_check(*backend);
}

std::vector<ConformanceCheck> run_conformance(const BackendSpec& spec) {
    std::vector<ConformanceCheck> checks;
    const auto health = health_check(spec);
    checks.push_back({"health", health.status == HealthReport::Status::up,
                      std::string(to_string(health.status)) + (health.cause.empty() ? "" : ": " + health.cause)});
    if (health.status != HealthReport::Status::up) return checks;

    BackendPtr backend = make_backend(spec);

    // A patch with a few bright squares exercises a non-empty response.
    auto make_patch = [](int size, int offset) {
        Raster patch(size, size, CV_8UC3, cv::Scalar(40, 50, 60));
        for (int k = 0; k < 3; ++k) {
            const int x = 20 + offset + 70 * k;
            cv::rectangle(patch, cv::Rect(x, 30 + 40 * k, 40, 40), cv::Scalar(240, 240, 240), cv::FILLED);
        }
        return patch;
    };

    // Concurrent distinct requests: every answer must carry its own id and
    // in-bounds, schema-valid boxes (decode_response enforces both).
    const int n = std::max(4, 2 * spec.max_parallel);
    std::vector<std::future<std::vector<Detection>>> futures;
    for (int i = 0; i < n; ++i) {
        futures.push_back(std::async(std::launch::async, [&, i] {
            const int size = 200 + 16 * i;
            PatchRequest req{"__conformance__", PixelBox(0, 0, size, size), make_patch(size, i)};
            return backend->detect(req);
        }));
    }
    std::string failure;
    std::size_t total = 0;
    for (auto& f : futures) {
        try {
            total += f.get().size();
        } catch (const std::exception& e) {
            if (failure.empty()) failure = e.what();
        }
    }
    checks.push_back({"request_id_matching", failure.empty(),
                      failure.empty() ? std::to_string(n) + " concurrent requests answered" : failure});
    checks.push_back({"schema_and_bounds", failure.empty(),
                      failure.empty() ? std::to_string(total) + " detections validated" : failure});
    return checks;
}

}  // namespace birdcount
