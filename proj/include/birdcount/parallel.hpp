#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <mutex>
#include <string_view>
#include <thread>
#include <vector>

namespace birdcount {

/// Runs fn(order[k]) for every k using up to `workers` threads. Work items
/// are claimed in `order`; every item runs even if another throws, and the
/// exception from the earliest item in `order` is rethrown after all
/// threads join.
template <typename Fn>
void parallel_for_each(const std::vector<std::size_t>& order, int workers, Fn&& fn) {
    const std::size_t n = order.size();
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t k = next++; k < n; k = next++) {
            try {
                fn(order[k]);
            } catch (...) {
                errors[k] = std::current_exception();
            }
        }
    };
    const auto threads = static_cast<std::size_t>(std::max(1, workers));
    if (threads == 1 || n <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < std::min(threads, n); ++t) pool.emplace_back(worker);
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

/// Stable 64-bit mixing used to derive per-item seeds.
inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_string(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Order-sensitive combination of seed components.
class SeedHasher {
public:
    explicit SeedHasher(std::uint64_t base) : state_(splitmix64(base)) {}
    SeedHasher& add(std::uint64_t v) noexcept {
        state_ = splitmix64(state_ ^ splitmix64(v));
        return *this;
    }
    SeedHasher& add(std::string_view s) noexcept { return add(hash_string(s)); }
    std::uint64_t value() const noexcept { return state_; }

private:
    std::uint64_t state_;
};

}  // namespace birdcount
