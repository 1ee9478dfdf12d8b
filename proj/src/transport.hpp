#pragma once

#include <chrono>
#include <condition_variable>
#include <future>
#include <map>
#include <mutex>
#include <semaphore>
#include <set>
#include <string>
#include <thread>

#include <sys/types.h>

#include "birdcount/backend.hpp"

namespace birdcount {

/// Child process speaking newline-delimited JSON on stdin/stdout. Up to
/// `max_parallel` requests may be in flight; answers are routed back by
/// request_id and may arrive in any order.
class SubprocessBackend : public DetectorBackend {
public:
    SubprocessBackend(std::string command, std::chrono::milliseconds timeout, int max_parallel);
    ~SubprocessBackend() override;

    SubprocessBackend(const SubprocessBackend&) = delete;
    SubprocessBackend& operator=(const SubprocessBackend&) = delete;

    std::vector<Detection> detect(const PatchRequest& request) override;
    std::string identity() const override { return "subprocess:" + command_; }

private:
    void read_loop();
    void fail_all(const std::string& cause, bool protocol);

    struct Pending {
        std::promise<std::string> reply;
    };

    std::string command_;
    std::chrono::milliseconds timeout_;
    std::counting_semaphore<> slots_;
    pid_t pid_ = -1;
    int to_child_ = -1;
    int from_child_ = -1;

    std::mutex write_mutex_;
    std::mutex state_mutex_;
    std::map<std::string, Pending> pending_;
    std::set<std::string> abandoned_;  // timed out; late answers are dropped
    std::string dead_cause_;
    bool dead_protocol_ = false;
    std::uint64_t next_id_ = 0;
    std::thread reader_;
};

/// POST /detect and GET /health against an HTTP detector service.
class HttpBackend : public DetectorBackend {
public:
    HttpBackend(std::string url, std::chrono::milliseconds timeout, int max_parallel);

    std::vector<Detection> detect(const PatchRequest& request) override;
    std::string identity() const override { return url_; }
    HealthReport ping() const;

private:
    std::string url_;
    std::chrono::milliseconds timeout_;
    std::counting_semaphore<> slots_;
    std::atomic<std::uint64_t> next_id_{0};
};

}  // namespace birdcount
