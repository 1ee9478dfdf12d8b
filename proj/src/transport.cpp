#include "transport.hpp"

#include <cerrno>
#include <csignal>
#include <cstring>

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "birdcount/errors.hpp"

namespace birdcount {

using nlohmann::json;

namespace {

void write_all(int fd, std::string_view data) {
    while (!data.empty()) {
        const ssize_t n = ::write(fd, data.data(), data.size());
        if (n < 0) {
            if (errno == EINTR) continue;
            throw BackendError(std::string("backend process-exit: write failed: ") + std::strerror(errno));
        }
        data.remove_prefix(static_cast<std::size_t>(n));
    }
}

}  // namespace

SubprocessBackend::SubprocessBackend(std::string command, std::chrono::milliseconds timeout, int max_parallel)
    : command_(std::move(command)), timeout_(timeout), slots_(max_parallel) {
    // A dead child must surface as EPIPE, not kill the pipeline.
    std::signal(SIGPIPE, SIG_IGN);

    int in_pipe[2], out_pipe[2];
    if (::pipe2(in_pipe, O_CLOEXEC) != 0) throw BackendError("pipe failed");
    if (::pipe2(out_pipe, O_CLOEXEC) != 0) {
        ::close(in_pipe[0]);
        ::close(in_pipe[1]);
        throw BackendError("pipe failed");
    }
    pid_ = ::fork();
    if (pid_ < 0) throw BackendError("fork failed");
    if (pid_ == 0) {
        ::dup2(in_pipe[0], STDIN_FILENO);
        ::dup2(out_pipe[1], STDOUT_FILENO);
        ::execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];
    reader_ = std::thread([this] { read_loop(); });
}

SubprocessBackend::~SubprocessBackend() {
    if (to_child_ >= 0) ::close(to_child_);
    // Give the child a moment to exit on EOF, then insist.
    int status = 0;
    bool reaped = false;
    for (int i = 0; i < 50 && !reaped; ++i) {
        if (::waitpid(pid_, &status, WNOHANG) == pid_) reaped = true;
        else std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    if (!reaped) {
        ::kill(pid_, SIGKILL);
        ::waitpid(pid_, &status, 0);
    }
    if (reader_.joinable()) reader_.join();
    if (from_child_ >= 0) ::close(from_child_);
}

void SubprocessBackend::fail_all(const std::string& cause, bool protocol) {
    std::lock_guard lock(state_mutex_);
    for (auto& [id, p] : pending_) {
        if (protocol) p.reply.set_exception(std::make_exception_ptr(ProtocolError(cause)));
        else p.reply.set_exception(std::make_exception_ptr(BackendError(cause)));
    }
    pending_.clear();
}

void SubprocessBackend::read_loop() {
    std::string buffer;
    char chunk[65536];
    while (true) {
        const ssize_t n = ::read(from_child_, chunk, sizeof chunk);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) break;
        buffer.append(chunk, static_cast<std::size_t>(n));
        std::size_t pos;
        while ((pos = buffer.find('\n')) != std::string::npos) {
            std::string line = buffer.substr(0, pos);
            buffer.erase(0, pos + 1);
            if (line.empty()) continue;
            std::string id;
            try {
                const auto j = json::parse(line);
                if (j.is_object() && j.contains("request_id") && j["request_id"].is_string()) {
                    id = j["request_id"].get<std::string>();
                }
            } catch (const json::exception&) {
            }
            std::unique_lock lock(state_mutex_);
            if (abandoned_.erase(id) > 0) continue;
            const auto it = pending_.find(id);
            if (it == pending_.end()) {
                lock.unlock();
                // The answer cannot be routed; every waiter is suspect.
                fail_all("backend sent a response with unknown request_id: " + line.substr(0, 160), true);
                continue;
            }
            it->second.reply.set_value(std::move(line));
            pending_.erase(it);
        }
    }
    {
        std::lock_guard lock(state_mutex_);
        dead_cause_ = "process-exit";
    }
    fail_all("backend process-exit", false);
}

std::vector<Detection> SubprocessBackend::detect(const PatchRequest& request) {
    slots_.acquire();
    struct Release {
        std::counting_semaphore<>& s;
        ~Release() { s.release(); }
    } release{slots_};

    std::string id;
    std::future<std::string> reply;
    {
        std::lock_guard lock(state_mutex_);
        if (!dead_cause_.empty()) throw BackendError("backend " + dead_cause_);
        id = "r" + std::to_string(next_id_++);
        reply = pending_[id].reply.get_future();
    }
    const std::string line = encode_request(id, request.pixels) + "\n";
    try {
        std::lock_guard lock(write_mutex_);
        write_all(to_child_, line);
    } catch (...) {
        std::lock_guard lock(state_mutex_);
        pending_.erase(id);
        throw;
    }
    if (reply.wait_for(timeout_) != std::future_status::ready) {
        std::lock_guard lock(state_mutex_);
        pending_.erase(id);
        abandoned_.insert(id);
        throw BackendTimeout("backend timed out after " + std::to_string(timeout_.count()) + " ms on " +
                             window_key(request.image_id, request.window));
    }
    return decode_response(reply.get(), id, request.pixels.cols, request.pixels.rows);
}

// ---------------------------------------------------------------------------

HttpBackend::HttpBackend(std::string url, std::chrono::milliseconds timeout, int max_parallel)
    : url_(std::move(url)), timeout_(timeout), slots_(max_parallel) {
    while (!url_.empty() && url_.back() == '/') url_.pop_back();
}

namespace {

httplib::Client make_client(const std::string& url, std::chrono::milliseconds timeout) {
    httplib::Client client(url);
    const auto secs = static_cast<time_t>(timeout.count() / 1000);
    const auto usecs = static_cast<time_t>((timeout.count() % 1000) * 1000);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    return client;
}

[[noreturn]] void throw_http_error(httplib::Error err, const std::string& what) {
    if (err == httplib::Error::Read || err == httplib::Error::ConnectionTimeout) {
        throw BackendTimeout(what + ": " + httplib::to_string(err));
    }
    throw BackendError(what + ": unreachable (" + httplib::to_string(err) + ")");
}

}  // namespace

std::vector<Detection> HttpBackend::detect(const PatchRequest& request) {
    slots_.acquire();
    struct Release {
        std::counting_semaphore<>& s;
        ~Release() { s.release(); }
    } release{slots_};

    const std::string id = "h" + std::to_string(next_id_++);
    auto client = make_client(url_, timeout_);
    const auto res = client.Post("/detect", encode_request(id, request.pixels), "application/json");
    if (!res) throw_http_error(res.error(), "POST " + url_ + "/detect");
    if (res->status != 200) {
        throw BackendError("POST " + url_ + "/detect returned HTTP " + std::to_string(res->status) + ": " +
                           res->body.substr(0, 160));
    }
    return decode_response(res->body, id, request.pixels.cols, request.pixels.rows);
}

HealthReport HttpBackend::ping() const {
    HealthReport report;
    const auto start = std::chrono::steady_clock::now();
    auto client = make_client(url_, timeout_);
    const auto res = client.Get("/health");
    report.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    if (!res) {
        report.status = HealthReport::Status::down;
        report.cause = "unreachable: " + httplib::to_string(res.error());
        return report;
    }
    try {
        const auto j = json::parse(res->body);
        const auto status = j.value("status", "");
        if (res->status == 200 && (status == "ok" || status == "up")) {
            report.status = HealthReport::Status::up;
            return report;
        }
        report.status = HealthReport::Status::down;
        report.cause = "health endpoint reports " + res->body.substr(0, 160);
    } catch (const json::exception&) {
        report.status = HealthReport::Status::protocol_error;
        report.cause = "unparseable /health body: " + res->body.substr(0, 160);
    }
    return report;
}

}  // namespace birdcount
