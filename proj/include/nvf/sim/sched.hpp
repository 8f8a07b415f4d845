#pragma once

#include <cstdint>
#include <exception>
#include <functional>
#include <memory>
#include <queue>
#include <semaphore>
#include <string>
#include <thread>
#include <vector>

namespace nvf::sim {

using SimTime = uint64_t;  // simulated nanoseconds

// Cooperative single-clock scheduler. Exactly one task runs at any moment;
// control transfers only inside sleep(), so all simulation state is mutated
// race-free and every run with the same seed interleaves identically.
//
// Tasks are OS threads parked on per-task semaphores. A task that calls
// sleep(d) enqueues its wakeup, hands control to the earliest pending wakeup,
// and blocks until some other task pops its entry. The fast path (single
// live task) just advances the clock.
//
// Daemon tasks (back-end service loops, lease renewers) are woken and expected
// to exit once every non-daemon task has finished; their loops must check
// stop_requested().
class Scheduler {
 public:
  Scheduler() = default;
  ~Scheduler();
  Scheduler(const Scheduler&) = delete;
  Scheduler& operator=(const Scheduler&) = delete;

  SimTime now() const { return now_; }

  // Must be called from the currently running task.
  void sleep(SimTime ns);

  // Spawn a task; runnable at the current simulated time. Callable from the
  // running task (or before run()).
  void spawn(std::string name, std::function<void()> fn, bool daemon = false);

  // Run `main_fn` as the first task; returns when all non-daemon tasks have
  // finished. Rethrows the first uncaught task exception, if any.
  void run(std::function<void()> main_fn);

  bool stop_requested() const { return stopping_; }

 private:
  struct Task {
    std::string name;
    std::function<void()> fn;
    bool daemon = false;
    bool finished = false;
    std::binary_semaphore sem{0};
    std::thread thread;
  };

  struct Wakeup {
    SimTime t;
    uint64_t seq;
    Task* task;
    bool operator>(const Wakeup& o) const {
      return t != o.t ? t > o.t : seq > o.seq;
    }
  };

  void task_body(Task* t);
  void finish_current(Task* t);
  void dispatch_next_locked();  // pops next wakeup, advances clock, releases

  SimTime now_ = 0;
  uint64_t seq_ = 0;
  bool stopping_ = false;
  int live_nondaemon_ = 0;
  std::priority_queue<Wakeup, std::vector<Wakeup>, std::greater<>> heap_;
  std::vector<std::unique_ptr<Task>> tasks_;
  std::binary_semaphore driver_sem_{0};
  std::exception_ptr error_;
};

}  // namespace nvf::sim
