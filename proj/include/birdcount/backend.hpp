#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "birdcount/geometry.hpp"
#include "birdcount/io.hpp"

namespace birdcount {

/// A single patch handed to a detector. `window` locates the patch in the
/// source image identified by `image_id`; `pixels` has the window's size
/// unless the bridge padded it.
struct PatchRequest {
    std::string image_id;
    PixelBox window;
    Raster pixels;
};

/// Anything that can find birds in a patch. Implementations must be safe to
/// call concurrently and return boxes in patch-local coordinates.
class DetectorBackend {
public:
    virtual ~DetectorBackend() = default;
    virtual std::vector<Detection> detect(const PatchRequest& request) = 0;
    /// Short human-readable identity recorded in run manifests.
    virtual std::string identity() const = 0;
};

using BackendPtr = std::shared_ptr<DetectorBackend>;

struct BackendSpec {
    enum class Kind { offline, subprocess, http };

    Kind kind = Kind::offline;
    std::string locator;
    std::optional<int> fixed_input;
    std::chrono::milliseconds timeout{30000};
    int max_parallel = 1;

    void validate() const;

    /// "offline:<path>", "subprocess:<command line>", "http://host:port".
    static BackendSpec parse(std::string_view text);
    nlohmann::json to_json() const;
    static BackendSpec from_json(const nlohmann::json& j);
};

std::string_view to_string(BackendSpec::Kind kind);

/// Training hyperparameters consumed by the external fine-tuning adapter.
/// Kept here so run records carry them.
struct TrainConfig {
    int epochs = 30;
    double learning_rate = 0.0001;
    double val_fraction = 0.125;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

/// Validating front for a backend. Pads undersized patches when the backend
/// needs a fixed square input, checks every returned box against the patch
/// it was asked about, and drops detections centred in padding.
class Bridge {
public:
    explicit Bridge(BackendPtr backend, std::optional<int> fixed_input = std::nullopt);

    std::vector<Detection> detect(const PatchRequest& request) const;
    const DetectorBackend& backend() const { return *backend_; }
    std::optional<int> fixed_input() const { return fixed_input_; }

private:
    BackendPtr backend_;
    std::optional<int> fixed_input_;
};

/// Builds the transport named by the spec (without the padding layer).
BackendPtr make_backend(const BackendSpec& spec);
Bridge make_bridge(const BackendSpec& spec);

// ---------------------------------------------------------------------------
// Wire format

std::string window_key(std::string_view image_id, const PixelBox& window);

nlohmann::json detection_to_json(const Detection& d);
/// Validates schema, score range and bounds within (width, height).
/// Throws ProtocolError.
Detection detection_from_json(const nlohmann::json& j, int width, int height);

std::string encode_request(const std::string& request_id, const Raster& pixels);
/// Parses one DetectResponse line. Throws ProtocolError with an excerpt of
/// the payload on any schema violation, a mismatched id, or an
/// out-of-bounds box; BackendError when the backend reports an error.
std::vector<Detection> decode_response(std::string_view payload, const std::string& expected_id, int width,
                                       int height);

// ---------------------------------------------------------------------------
// Offline and recording backends

/// Answers detect() by exact lookup of "<image>:<xmin>:<ymin>:<xmax>:<ymax>".
class OfflineBackend : public DetectorBackend {
public:
    explicit OfflineBackend(std::map<std::string, std::vector<Detection>> windows, std::string source = {});

    std::vector<Detection> detect(const PatchRequest& request) override;
    std::string identity() const override { return "offline:" + source_; }
    std::size_t size() const { return windows_.size(); }

private:
    std::map<std::string, std::vector<Detection>> windows_;
    std::string source_;
};

std::shared_ptr<OfflineBackend> load_offline(const std::filesystem::path& file);
std::shared_ptr<OfflineBackend> offline_from_json(const nlohmann::json& doc, std::string source = {});

/// Pass-through that remembers every answer, for later offline replay.
class RecordingBackend : public DetectorBackend {
public:
    explicit RecordingBackend(BackendPtr inner) : inner_(std::move(inner)) {}

    std::vector<Detection> detect(const PatchRequest& request) override;
    std::string identity() const override { return inner_->identity(); }
    nlohmann::json to_json() const;

private:
    BackendPtr inner_;
    mutable std::mutex mutex_;
    std::map<std::string, std::vector<Detection>> recorded_;
};

// ---------------------------------------------------------------------------
// Health and conformance

struct HealthReport {
    enum class Status { up, down, protocol_error };
    Status status = Status::down;
    std::string cause;
    double latency_ms = 0.0;
};

std::string_view to_string(HealthReport::Status s);

/// Sends a 2x2 black patch and expects no detections within the timeout.
HealthReport health_check(const BackendSpec& spec);
HealthReport health_check(DetectorBackend& backend);

struct ConformanceCheck {
    std::string name;
    bool passed = false;
    std::string detail;
};

/// Protocol checks every live backend must pass: health, request id
/// matching under concurrent load, schema and bounds of responses to
/// non-trivial patches.
std::vector<ConformanceCheck> run_conformance(const BackendSpec& spec);

}  // namespace birdcount
