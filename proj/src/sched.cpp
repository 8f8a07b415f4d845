#include "nvf/sim/sched.hpp"

#include <cassert>

namespace nvf::sim {

namespace detail {
// Task is private to Scheduler, so the running task is stashed untyped.
thread_local void* current_task = nullptr;
}  // namespace detail

Scheduler::~Scheduler() {
  for (auto& t : tasks_)
    if (t->thread.joinable()) t->thread.join();
}

void Scheduler::spawn(std::string name, std::function<void()> fn, bool daemon) {
  auto t = std::make_unique<Task>();
  t->name = std::move(name);
  t->fn = std::move(fn);
  t->daemon = daemon;
  if (!daemon) live_nondaemon_++;
  Task* raw = t.get();
  heap_.push(Wakeup{now_, seq_++, raw});
  raw->thread = std::thread([this, raw] { task_body(raw); });
  tasks_.push_back(std::move(t));
}

void Scheduler::task_body(Task* t) {
  t->sem.acquire();
  detail::current_task = t;
  try {
    t->fn();
  } catch (...) {
    if (!error_) error_ = std::current_exception();
  }
  finish_current(t);
}

void Scheduler::finish_current(Task* t) {
  t->finished = true;
  if (!t->daemon) {
    live_nondaemon_--;
    if (live_nondaemon_ == 0) stopping_ = true;
  }
  if (!heap_.empty()) {
    dispatch_next_locked();
  } else {
    driver_sem_.release();
  }
}

void Scheduler::dispatch_next_locked() {
  assert(!heap_.empty());
  Wakeup w = heap_.top();
  heap_.pop();
  assert(!w.task->finished);
  now_ = w.t;
  w.task->sem.release();
}

void Scheduler::sleep(SimTime ns) {
  Task* self = static_cast<Task*>(detail::current_task);
  assert(self != nullptr && "sleep() called outside a task");
  heap_.push(Wakeup{now_ + ns, seq_++, self});
  Wakeup w = heap_.top();
  if (w.task == self) {
    heap_.pop();
    now_ = w.t;
    return;
  }
  dispatch_next_locked();
  self->sem.acquire();
}

void Scheduler::run(std::function<void()> main_fn) {
  spawn("main", std::move(main_fn), /*daemon=*/false);
  dispatch_next_locked();
  driver_sem_.acquire();
  for (auto& t : tasks_)
    if (t->thread.joinable()) t->thread.join();
  if (error_) std::rethrow_exception(error_);
}

}  // namespace nvf::sim
