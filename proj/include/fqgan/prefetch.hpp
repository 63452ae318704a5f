#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <utility>

namespace fqgan {

/// Produces `make(step)` for step = first, first+1, ... on a worker thread, keeping at most
/// `capacity` items ready. Items arrive in step order; the consumer pulls with next().
template <typename T>
class Prefetcher {
public:
    Prefetcher(std::function<T(std::int64_t)> make, std::int64_t first, std::size_t capacity = 2)
        : make_(std::move(make)), next_step_(first), capacity_(capacity) {
        worker_ = std::thread([this] { run(); });
    }

    ~Prefetcher() {
        {
            std::lock_guard lock(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        worker_.join();
    }

    Prefetcher(const Prefetcher&) = delete;
    Prefetcher& operator=(const Prefetcher&) = delete;

    T next() {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [this] { return !queue_.empty() || error_; });
        if (queue_.empty() && error_) std::rethrow_exception(error_);
        T item = std::move(queue_.front());
        queue_.pop_front();
        cv_.notify_all();
        return item;
    }

private:
    void run() {
        for (;;) {
            std::int64_t step;
            {
                std::unique_lock lock(mu_);
                cv_.wait(lock, [this] { return stop_ || queue_.size() < capacity_; });
                if (stop_) return;
                step = next_step_++;
            }
            try {
                T item = make_(step);
                std::lock_guard lock(mu_);
                queue_.push_back(std::move(item));
            } catch (...) {
                std::lock_guard lock(mu_);
                error_ = std::current_exception();
                cv_.notify_all();
                return;
            }
            cv_.notify_all();
        }
    }

    std::function<T(std::int64_t)> make_;
    std::int64_t next_step_;
    std::size_t capacity_;
    std::deque<T> queue_;
    std::mutex mu_;
    std::condition_variable cv_;
    bool stop_ = false;
    std::exception_ptr error_;
    std::thread worker_;
};

}  // namespace fqgan
