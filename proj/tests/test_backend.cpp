#include <doctest.h>

#include <future>
#include <thread>

#include <httplib.h>
#include <opencv2/imgproc.hpp>

#include "birdcount/backend.hpp"
#include "birdcount/errors.hpp"
#include "birdcount/slicer.hpp"
#include "birdcount/synth.hpp"
#include "mock_detector.hpp"
#include "support.hpp"

using namespace birdcount;
using nlohmann::json;
using namespace std::chrono_literals;

namespace {

BackendSpec subprocess_spec(const std::string& mode, int max_parallel = 1, int timeout_ms = 5000) {
    BackendSpec s;
    s.kind = BackendSpec::Kind::subprocess;
    s.locator = std::string(MOCK_BACKEND_PATH) + " " + mode;
    s.max_parallel = max_parallel;
    s.timeout = std::chrono::milliseconds(timeout_ms);
    return s;
}

Raster patch_with_squares(int w, int h, const std::vector<cv::Rect>& squares) {
    Raster r(h, w, CV_8UC3, cv::Scalar(20, 20, 20));
    for (const auto& s : squares) cv::rectangle(r, s, cv::Scalar(240, 240, 240), cv::FILLED);
    return r;
}

/// In-process HTTP detector on an ephemeral port.
class HttpFixture {
public:
    explicit HttpFixture(std::string mode) : mode_(std::move(mode)) {
        server_.Get("/health", [](const httplib::Request&, httplib::Response& res) {
            res.set_content(R"({"status":"ok"})", "application/json");
        });
        server_.Post("/detect", [this](const httplib::Request& req, httplib::Response& res) {
            if (mode_ == "slow") std::this_thread::sleep_for(1500ms);
            if (mode_ == "http500") {
                res.status = 500;
                res.set_content("kaput", "text/plain");
                return;
            }
            const std::string inner = mode_ == "slow" ? "blobs" : mode_;
            res.set_content(mock::answer(json::parse(req.body), inner).dump(), "application/json");
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~HttpFixture() {
        server_.stop();
        thread_.join();
    }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
    BackendSpec spec(int timeout_ms = 5000) const {
        BackendSpec s = BackendSpec::parse(url());
        s.timeout = std::chrono::milliseconds(timeout_ms);
        s.max_parallel = 4;
        return s;
    }

private:
    std::string mode_;
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

class FixedBackend : public DetectorBackend {
public:
    explicit FixedBackend(std::vector<Detection> dets) : dets_(std::move(dets)) {}
    std::vector<Detection> detect(const PatchRequest& r) override {
        last_size = r.pixels.size();
        return dets_;
    }
    std::string identity() const override { return "fixed"; }
    cv::Size last_size;

private:
    std::vector<Detection> dets_;
};

}  // namespace

TEST_CASE("backend spec parsing") {
    auto s = BackendSpec::parse("offline:/tmp/x.json");
    CHECK(s.kind == BackendSpec::Kind::offline);
    CHECK(s.locator == "/tmp/x.json");
    s = BackendSpec::parse("subprocess:python serve.py --flag");
    CHECK(s.kind == BackendSpec::Kind::subprocess);
    CHECK(s.locator == "python serve.py --flag");
    s = BackendSpec::parse("http://localhost:8080");
    CHECK(s.kind == BackendSpec::Kind::http);
    CHECK_THROWS_AS(BackendSpec::parse("grpc://x"), UsageError);
    CHECK_THROWS_AS(BackendSpec::parse("offline:"), UsageError);
    s.fixed_input = 800;
    s.max_parallel = 3;
    const auto back = BackendSpec::from_json(s.to_json());
    CHECK(back.to_json() == s.to_json());
    s.max_parallel = 0;
    CHECK_THROWS_AS(s.validate(), UsageError);
}

TEST_CASE("train config defaults") {
    const TrainConfig c;
    CHECK(c.epochs == 30);
    CHECK(c.learning_rate == 0.0001);
    CHECK(c.val_fraction == 0.125);
    CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
    CHECK_THROWS_AS(TrainConfig::from_json(json{{"epochs", 0}}), UsageError);
}

TEST_CASE("detections are validated strictly") {
    const json good{{"xmin", 1}, {"ymin", 2}, {"xmax", 10}, {"ymax", 12}, {"score", 0.5}, {"label", "bird"}};
    CHECK(detection_from_json(good, 10, 12) == Detection{PixelBox(1, 2, 10, 12), 0.5, "bird"});
    CHECK(detection_to_json(detection_from_json(good, 10, 12)) == good);
    auto bad = good;
    bad["xmax"] = 11;
    CHECK_THROWS_AS(detection_from_json(bad, 10, 12), ProtocolError);
    bad = good;
    bad["score"] = 1.5;
    CHECK_THROWS_AS(detection_from_json(bad, 10, 12), ProtocolError);
    bad = good;
    bad["xmin"] = 1.5;
    CHECK_THROWS_AS(detection_from_json(bad, 10, 12), ProtocolError);
    bad = good;
    bad.erase("ymin");
    CHECK_THROWS_AS(detection_from_json(bad, 10, 12), ProtocolError);
    bad = good;
    bad["xmin"] = 10;
    CHECK_THROWS_AS(detection_from_json(bad, 10, 12), ProtocolError);
    CHECK_THROWS_AS(detection_from_json(json::array(), 10, 12), ProtocolError);
}

TEST_CASE("responses are matched to their request id") {
    const std::string ok = R"({"request_id":"r1","detections":[{"xmin":0,"ymin":0,"xmax":2,"ymax":2,"score":0.4}]})";
    CHECK(decode_response(ok, "r1", 4, 4).size() == 1);
    CHECK_THROWS_AS(decode_response(ok, "r2", 4, 4), ProtocolError);
    CHECK_THROWS_AS(decode_response(ok, "r1", 1, 1), ProtocolError);
    CHECK_THROWS_AS(decode_response("not json", "r1", 4, 4), ProtocolError);
    CHECK_THROWS_AS(decode_response(R"({"request_id":"r1"})", "r1", 4, 4), ProtocolError);
    try {
        decode_response(R"({"request_id":"r1","error":"oom"})", "r1", 4, 4);
        FAIL("expected an error");
    } catch (const ProtocolError&) {
        FAIL("a reported error is not a protocol violation");
    } catch (const BackendError& e) {
        CHECK(std::string(e.what()).find("oom") != std::string::npos);
    }
}

TEST_CASE("request encoding carries the exact pixels") {
    const Raster px = patch_with_squares(37, 23, {{3, 4, 5, 6}});
    const auto j = json::parse(encode_request("abc", px));
    CHECK(j["request_id"] == "abc");
    CHECK(j["width"] == 37);
    CHECK(j["height"] == 23);
    CHECK(test_support::same_pixels(decode_png(base64_decode(j["image"].get<std::string>())), px));
}

TEST_CASE("bridge pads small patches and discards detections in the padding") {
    auto backend = std::make_shared<FixedBackend>(std::vector<Detection>{
        {PixelBox(0, 0, 10, 10), 0.9, "bird"},    // inside the real area
        {PixelBox(55, 30, 75, 50), 0.8, "bird"},  // centre x 65 >= 60: in padding
        {PixelBox(50, 0, 66, 10), 0.7, "bird"},   // centre x 58: kept, clipped to 60
        {PixelBox(90, 90, 100, 100), 0.6, "bird"},
    });
    const Bridge bridge(backend, 100);
    const PatchRequest req{"img", PixelBox(0, 0, 60, 40), Raster(40, 60, CV_8UC3, cv::Scalar(1, 2, 3))};
    const auto out = bridge.detect(req);
    CHECK(backend->last_size == cv::Size(100, 100));
    REQUIRE(out.size() == 2);
    CHECK(out[0].box == PixelBox(0, 0, 10, 10));
    CHECK(out[1].box == PixelBox(50, 0, 60, 10));

    const Bridge strict(std::make_shared<FixedBackend>(std::vector<Detection>{{PixelBox(0, 0, 101, 10), 0.5, "bird"}}), 100);
    CHECK_THROWS_AS(strict.detect(req), ProtocolError);
    const Bridge unpadded(std::make_shared<FixedBackend>(std::vector<Detection>{{PixelBox(0, 0, 61, 10), 0.5, "bird"}}));
    CHECK_THROWS_AS(unpadded.detect(req), ProtocolError);
    const Bridge small(backend, 50);
    CHECK_THROWS_AS(small.detect(req), UsageError);
}

TEST_CASE("offline backend replays recorded answers exactly") {
    std::vector<GroundTruthBox> gt;
    for (int i = 0; i < 40; ++i) {
        const int x = 30 + 61 * (i % 10) + 7 * (i / 10), y = 40 + 270 * (i / 10);
        gt.push_back({PixelBox(x - 25, y - 25, x + 25, y + 25), {x, y, "A", "a"}, false});
    }
    auto recorder = std::make_shared<RecordingBackend>(make_oracle_backend(gt));
    const Raster img(1100, 700, CV_8UC3, cv::Scalar(0, 0, 0));
    const SliceSpec spec{400, 0.2};
    const auto live = run_sliced_inference(img, "A:tile", Bridge(recorder), spec, GeometryConfig{});

    test_support::TempDir dir("offline");
    write_text(dir / "rec.json", recorder->to_json().dump());
    const auto offline = load_offline(dir / "rec.json");
    CHECK(offline->size() == plan_slices(700, 1100, spec).windows.size());
    const auto replay = run_sliced_inference(img, "A:tile", Bridge(offline), spec, GeometryConfig{});
    CHECK(replay.detections == live.detections);
    CHECK(replay.per_window_counts == live.per_window_counts);
    CHECK(offline->identity().find("rec.json") != std::string::npos);

    try {
        run_sliced_inference(img, "other", Bridge(offline), spec, GeometryConfig{});
        FAIL("expected an error");
    } catch (const BackendError& e) {
        CHECK(std::string(e.what()).find("other:0:0:400:400") != std::string::npos);
    }
    CHECK_THROWS_AS(offline_from_json(json{{"windows", {{"img:0:0:10", json::array()}}}}), DataError);
    CHECK_THROWS_AS(offline_from_json(json{{"windows", {{"img:0:0:10:10", {{{"xmin", 0}}}}}}}), DataError);
    CHECK_THROWS_AS(load_offline(dir / "missing.json"), DataError);
}

TEST_CASE("subprocess backend detects through the NDJSON protocol") {
    auto backend = make_backend(subprocess_spec("blobs"));
    const Raster px = patch_with_squares(200, 150, {{10, 20, 30, 40}, {150, 100, 20, 20}});
    const auto dets = backend->detect({"img", PixelBox(0, 0, 200, 150), px});
    REQUIRE(dets.size() == 2);
    CHECK(dets[0].box == PixelBox(10, 20, 40, 60));
    CHECK(dets[1].box == PixelBox(150, 100, 170, 120));
    CHECK(health_check(*backend).status == HealthReport::Status::up);
}

TEST_CASE("subprocess answers arriving out of order are routed by id") {
    auto backend = make_backend(subprocess_spec("reverse", 2));
    const Raster a = patch_with_squares(100, 100, {{10, 10, 10, 10}});
    const Raster b = patch_with_squares(100, 100, {{50, 50, 20, 20}, {0, 0, 5, 5}});
    for (int round = 0; round < 5; ++round) {
        auto fa = std::async(std::launch::async, [&] { return backend->detect({"a", PixelBox(0, 0, 100, 100), a}); });
        auto fb = std::async(std::launch::async, [&] { return backend->detect({"b", PixelBox(0, 0, 100, 100), b}); });
        CHECK(fa.get().size() == 1);
        CHECK(fb.get().size() == 2);
    }
}

TEST_CASE("subprocess failures map to backend errors") {
    const PatchRequest req{"img", PixelBox(0, 0, 50, 50), patch_with_squares(50, 50, {})};
    SUBCASE("mismatched id") { CHECK_THROWS_AS(make_backend(subprocess_spec("badid"))->detect(req), ProtocolError); }
    SUBCASE("reported error") {
        auto b = make_backend(subprocess_spec("error"));
        CHECK_THROWS_WITH_AS(b->detect(req), doctest::Contains("model exploded"), BackendError);
    }
    SUBCASE("out of bounds") { CHECK_THROWS_AS(make_backend(subprocess_spec("oob"))->detect(req), ProtocolError); }
    SUBCASE("schema") { CHECK_THROWS_AS(make_backend(subprocess_spec("schema"))->detect(req), ProtocolError); }
    SUBCASE("process exit") {
        auto b = make_backend(subprocess_spec("exit"));
        CHECK_THROWS_WITH_AS(b->detect(req), doctest::Contains("process-exit"), BackendError);
        CHECK_THROWS_WITH_AS(b->detect(req), doctest::Contains("process-exit"), BackendError);
    }
    SUBCASE("timeout") {
        auto b = make_backend(subprocess_spec("slow", 1, 200));
        CHECK_THROWS_AS(b->detect(req), BackendTimeout);
    }
    SUBCASE("missing executable") {
        BackendSpec s = subprocess_spec("x");
        s.locator = "/nonexistent/detector";
        const auto h = health_check(s);
        CHECK(h.status == HealthReport::Status::down);
    }
}

TEST_CASE("a late answer to a timed-out request does not disturb later requests") {
    auto b = make_backend(subprocess_spec("lag", 1, 400));
    const PatchRequest req{"img", PixelBox(0, 0, 50, 50), patch_with_squares(50, 50, {{5, 5, 10, 10}})};
    CHECK_THROWS_AS(b->detect(req), BackendTimeout);
    const auto dets = b->detect(req);
    CHECK(dets.size() == 1);
}

TEST_CASE("conformance suite over the subprocess transport") {
    const auto checks = run_conformance(subprocess_spec("blobs", 3));
    REQUIRE(checks.size() >= 3);
    for (const auto& c : checks) CHECK_MESSAGE(c.passed, c.name << ": " << c.detail);

    bool any_failed = false;
    for (const auto& c : run_conformance(subprocess_spec("badid", 2, 1000))) any_failed = any_failed || !c.passed;
    CHECK(any_failed);
    any_failed = false;
    for (const auto& c : run_conformance(subprocess_spec("oob", 2, 1000))) any_failed = any_failed || !c.passed;
    CHECK(any_failed);
}

TEST_CASE("http backend: detection, health and conformance") {
    HttpFixture server("blobs");
    const auto spec = server.spec();
    auto backend = make_backend(spec);
    const Raster px = patch_with_squares(120, 80, {{10, 10, 15, 15}});
    const auto dets = backend->detect({"img", PixelBox(0, 0, 120, 80), px});
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].box == PixelBox(10, 10, 25, 25));
    CHECK(health_check(spec).status == HealthReport::Status::up);
    for (const auto& c : run_conformance(spec)) CHECK_MESSAGE(c.passed, c.name << ": " << c.detail);
}

TEST_CASE("http failures") {
    const PatchRequest req{"img", PixelBox(0, 0, 50, 50), patch_with_squares(50, 50, {})};
    SUBCASE("timeout") {
        HttpFixture server("slow");
        CHECK_THROWS_AS(make_backend(server.spec(300))->detect(req), BackendTimeout);
    }
    SUBCASE("server error") {
        HttpFixture server("http500");
        CHECK_THROWS_WITH_AS(make_backend(server.spec())->detect(req), doctest::Contains("500"), BackendError);
    }
    SUBCASE("mismatched id") {
        HttpFixture server("badid");
        CHECK_THROWS_AS(make_backend(server.spec())->detect(req), ProtocolError);
    }
    SUBCASE("unreachable") {
        std::string url;
        {
            HttpFixture server("blobs");
            url = server.url();
        }
        BackendSpec s = BackendSpec::parse(url);
        s.timeout = 500ms;
        CHECK(health_check(s).status == HealthReport::Status::down);
        try {
            make_backend(s)->detect(req);
            FAIL("expected an error");
        } catch (const BackendTimeout&) {
            FAIL("a refused connection is not a timeout");
        } catch (const BackendError& e) {
            CHECK(std::string(e.what()).find("unreachable") != std::string::npos);
        }
    }
}

TEST_CASE("sliced inference through a live transport matches in-process detection") {
    Raster img(900, 1300, CV_8UC3, cv::Scalar(30, 30, 30));
    for (int k = 0; k < 30; ++k) {
        cv::circle(img, cv::Point(40 + (k * 97) % 1220, 40 + (k * 53) % 820), 12, cv::Scalar(250, 250, 250), cv::FILLED);
    }
    class InProcess : public DetectorBackend {
    public:
        std::vector<Detection> detect(const PatchRequest& r) override {
            std::vector<Detection> out;
            for (const auto& d : mock::detect_blobs(r.pixels)) out.push_back(detection_from_json(d, r.pixels.cols, r.pixels.rows));
            return out;
        }
        std::string identity() const override { return "in-process"; }
    };
    const SliceSpec spec{500, 0.2};
    const auto local = run_sliced_inference(img, "img", Bridge(std::make_shared<InProcess>()), spec, GeometryConfig{});
    const auto remote = run_sliced_inference(img, "img", make_bridge(subprocess_spec("blobs", 2)), spec, GeometryConfig{},
                                             SliceRunOptions{2, {}});
    CHECK(remote.detections == local.detections);
    CHECK(local.detections.size() >= 30);
}
