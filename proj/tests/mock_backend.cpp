// NDJSON detector speaking the subprocess protocol, for transport tests.
// Usage: mock_backend [mode]; modes: blobs (default), empty, badid, error,
// oob, schema, exit (quits on the first request), slow (never answers),
// reverse (answers requests in reverse pairs), lag (first answer arrives
// 600 ms late).

#include <chrono>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include "mock_detector.hpp"

int main(int argc, char** argv) {
    const std::string mode = argc > 1 ? argv[1] : "blobs";
    std::ios::sync_with_stdio(false);
    std::string line;
    std::vector<std::string> held;
    int answered = 0;
    while (std::getline(std::cin, line)) {
        if (line.empty()) continue;
        if (mode == "exit") return 0;
        if (mode == "slow") continue;
        const auto req = nlohmann::json::parse(line);
        const std::string inner = (mode == "reverse" || mode == "lag") ? "blobs" : mode;
        if (mode == "lag" && answered == 0) std::this_thread::sleep_for(std::chrono::milliseconds(600));
        ++answered;
        std::string reply = mock::answer(req, inner).dump();
        if (mode == "reverse") {
            held.push_back(std::move(reply));
            if (held.size() < 2) continue;
            std::cout << held[1] << "\n" << held[0] << "\n" << std::flush;
            held.clear();
            continue;
        }
        std::cout << reply << "\n" << std::flush;
    }
    for (const auto& r : held) std::cout << r << "\n";
    return 0;
}
