#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>

#include <nlohmann/json.hpp>

#include "birdcount/io.hpp"
#include "support.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

/// Runs the CLI from `cwd`, output discarded to a log; returns its exit code.
int run(const fs::path& cwd, const std::string& args) {
    const std::string cmd = "cd '" + cwd.string() + "' && '" BIRDCOUNT_CLI_PATH "' " + args + " >>cli.log 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

const std::string kMock = MOCK_BACKEND_PATH;

}  // namespace

TEST_CASE("usage errors exit 1, data errors exit 2") {
    test_support::TempDir dir("cli-usage");
    CHECK(run(dir.path(), "") == 1);
    CHECK(run(dir.path(), "--help") == 0);
    CHECK(run(dir.path(), "eval --manifest x") == 1);
    CHECK(run(dir.path(), "--workers 0 loiocv --manifest x") == 1);
    CHECK(run(dir.path(), "eval --manifest nowhere --detections d.json") == 2);
    CHECK(run(dir.path(), "synth --island A") == 1);  // no --out
    CHECK(run(dir.path(), "--out o slice-infer --image missing.png --backend grpc://x") == 1);
}

TEST_CASE("pipeline: synth, ingest, infer, replay, eval, overlay, splits, augment") {
    test_support::TempDir dir("cli-pipeline");
    const fs::path d = dir.path();
    REQUIRE(run(d, "--seed 3 --out syn synth --island A --island B --width 1200 --height 1200 --birds 30") == 0);
    CHECK(fs::exists(d / "syn" / "A.png"));
    CHECK(fs::exists(d / "syn" / "points.csv"));
    REQUIRE(run(d, "--out survey ingest --mosaic A=syn/A.png --mosaic B=syn/B.png --points syn/points.csv "
                   "--tile-size 600") == 0);
    CHECK(fs::exists(d / "survey" / "manifest.json"));
    CHECK(run(d, "--out bad ingest --mosaic A=syn/A.png --points syn/points.csv") == 2);  // island B unknown

    const std::string tile = "--image survey/A/tile_0_0.png --image-id A/tile_0_0 --patch 400";
    REQUIRE(run(d, "--out det.json slice-infer " + tile + " --backend 'subprocess:" + kMock +
                       " blobs' --record rec.json") == 0);
    REQUIRE(run(d, "--out replay.json slice-infer " + tile + " --backend offline:rec.json") == 0);
    CHECK(birdcount::read_text(d / "det.json") == birdcount::read_text(d / "replay.json"));
    CHECK(run(d, "--out x.json slice-infer " + tile + " --backend 'subprocess:" + kMock + " error'") == 3);

    REQUIRE(run(d, "--out eval.json eval --manifest survey --detections det.json") == 0);
    const auto ev = json::parse(birdcount::read_text(d / "eval.json"));
    CHECK(ev["metrics"]["f1"] == 1.0);
    CHECK(ev["metrics"]["tp"].get<int>() > 0);

    REQUIRE(run(d, "--out overlay.png overlay --manifest survey --detections det.json") == 0);
    CHECK(birdcount::read_png(d / "overlay.png").cols == 600);

    REQUIRE(run(d, "--seed 9 --out splits.json loiocv --manifest survey") == 0);
    REQUIRE(run(d, "--seed 9 --workers 2 --out splits2.json loiocv --manifest survey") == 0);
    CHECK(birdcount::read_text(d / "splits.json") == birdcount::read_text(d / "splits2.json"));
    CHECK(json::parse(birdcount::read_text(d / "splits.json"))["splits"].size() == 2);

    REQUIRE(run(d, "--seed 4 --out aug augment-export --manifest survey --epochs 1") == 0);
    REQUIRE(run(d, "--seed 4 --workers 3 --out aug2 augment-export --manifest survey --epochs 1") == 0);
    CHECK(fs::exists(d / "aug" / "augment_record.json"));
    const auto sample = fs::path("epoch_0") / "B" / "tile_1_1.png";
    CHECK(birdcount::read_png(d / "aug" / sample).cols == 1000);
    CHECK(test_support::same_pixels(birdcount::read_png(d / "aug" / sample), birdcount::read_png(d / "aug2" / sample)));
}

TEST_CASE("backend-check reports conformance through the exit code") {
    test_support::TempDir dir("cli-check");
    CHECK(run(dir.path(), "backend-check --backend 'subprocess:" + kMock + " blobs'") == 0);
    CHECK(run(dir.path(), "backend-check --timeout-ms 1000 --backend 'subprocess:" + kMock + " badid'") == 3);
    const auto log = birdcount::read_text(dir.path() / "cli.log");
    CHECK(log.find("PASS health") != std::string::npos);
    CHECK(log.find("FAIL health") != std::string::npos);
}

TEST_CASE("run-experiment writes the results table and fails with the variant's code") {
    test_support::TempDir dir("cli-experiment");
    const fs::path d = dir.path();
    REQUIRE(run(d, "--seed 2 --out syn synth --island A --island B --width 1000 --height 1000 --birds 20") == 0);
    REQUIRE(run(d, "--out survey ingest --mosaic A=syn/A.png --mosaic B=syn/B.png --points syn/points.csv") == 0);
    birdcount::write_text(d / "exp.json", json{{"survey", "survey"},
                                               {"variants", {{{"name", "oracle"}, {"backend", {{"kind", "oracle"}}}}}}}
                                              .dump());
    REQUIRE(run(d, "--config exp.json --out run1 run-experiment") == 0);
    const auto csv = birdcount::read_text(d / "run1" / "results.csv");
    CHECK(csv.find("oracle,1.0000,1.0000,1.0000") != std::string::npos);

    birdcount::write_text(
        d / "bad.json",
        json{{"survey", "survey"},
             {"variants",
              {{{"name", "oracle"}, {"backend", {{"kind", "oracle"}}}},
               {{"name", "gone"}, {"backend", {{"kind", "offline"}, {"locator", "nothing.json"}}}}}}}
            .dump());
    CHECK(run(d, "--config bad.json --out run2 run-experiment") == 2);
    CHECK(fs::exists(d / "run2" / "results.csv"));
    CHECK(run(d, "--out run3 run-experiment") == 1);
}
