#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace gldr {

// Fixed-size worker pool. parallel_for splits [0, count) into contiguous
// chunks, one per worker; each index is processed by exactly one worker,
// so kernels that write disjoint outputs give the same bits as a serial run.
class ThreadPool {
 public:
  explicit ThreadPool(std::size_t threads = 1) { resize(threads); }
  ~ThreadPool() { stop(); }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  std::size_t size() const { return threads_; }

  void resize(std::size_t threads) {
    threads = std::max<std::size_t>(1, threads);
    if (threads == threads_ && (threads == 1 || !workers_.empty())) return;
    stop();
    threads_ = threads;
    shutdown_ = false;
    for (std::size_t i = 1; i < threads_; ++i)
      workers_.emplace_back([this, i, g = generation_] { worker_loop(i, g); });
  }

  void parallel_for(std::size_t count,
                    const std::function<void(std::size_t, std::size_t)>& fn) {
    if (count == 0) return;
    if (threads_ == 1 || count == 1) {
      fn(0, count);
      return;
    }
    std::unique_lock lock(mutex_);
    job_ = &fn;
    job_count_ = count;
    pending_ = threads_ - 1;
    error_ = nullptr;
    ++generation_;
    lock.unlock();
    wake_.notify_all();

    run_chunk(0);

    lock.lock();
    done_.wait(lock, [this] { return pending_ == 0; });
    job_ = nullptr;
    if (error_) std::rethrow_exception(std::exchange(error_, nullptr));
  }

 private:
  void run_chunk(std::size_t worker) {
    const std::size_t chunk = (job_count_ + threads_ - 1) / threads_;
    const std::size_t begin = std::min(job_count_, worker * chunk);
    const std::size_t end = std::min(job_count_, begin + chunk);
    if (begin >= end) return;
    try {
      (*job_)(begin, end);
    } catch (...) {
      std::lock_guard guard(error_mutex_);
      if (!error_) error_ = std::current_exception();
    }
  }

  // `seen` starts at the generation current at spawn so a new worker never
  // picks up a job that finished before it existed.
  void worker_loop(std::size_t index, std::size_t seen) {
    for (;;) {
      std::unique_lock lock(mutex_);
      wake_.wait(lock, [&] { return shutdown_ || generation_ != seen; });
      if (shutdown_) return;
      seen = generation_;
      lock.unlock();
      run_chunk(index);
      lock.lock();
      if (--pending_ == 0) done_.notify_one();
    }
  }

  void stop() {
    {
      std::lock_guard guard(mutex_);
      shutdown_ = true;
    }
    wake_.notify_all();
    for (auto& w : workers_) w.join();
    workers_.clear();
  }

  std::size_t threads_ = 0;
  std::vector<std::thread> workers_;
  std::mutex mutex_;
  std::mutex error_mutex_;
  std::condition_variable wake_;
  std::condition_variable done_;
  const std::function<void(std::size_t, std::size_t)>* job_ = nullptr;
  std::size_t job_count_ = 0;
  std::size_t pending_ = 0;
  std::size_t generation_ = 0;
  bool shutdown_ = false;
  std::exception_ptr error_;
};

// Thread count from READER_THREADS, falling back to 1.
inline std::size_t default_thread_count() {
  if (const char* env = std::getenv("READER_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (...) {
    }
  }
  return 1;
}

inline ThreadPool& global_pool() {
  static ThreadPool pool(default_thread_count());
  return pool;
}

inline void set_num_threads(std::size_t threads) {
  global_pool().resize(threads);
}

inline std::size_t num_threads() { return global_pool().size(); }

template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  global_pool().parallel_for(
      count, [&fn](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) fn(i);
      });
}

}  // namespace gldr
