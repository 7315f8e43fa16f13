#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <mutex>
#include <optional>
#include <stdexcept>

#include "stepsim/events.hpp"

namespace stepsim {

// Supervisor <-> controller event mailbox. The supervisor posts one event
// per VM exit and blocks until the controller acknowledges it; the VM is
// not resumed in between. Polling is non-blocking and idempotent.
//
// The real thing spins on shared memory; in process we hand off through a
// mutex and condition variables, which preserves the observable contract
// (blocking, exactly-once, in-order).
class EventChannel {
 public:
  explicit EventChannel(std::size_t depth = 1) : depth_(depth) {
    if (depth_ == 0) throw std::invalid_argument("channel depth must be >= 1");
  }

  enum class SendResult { acked, closed };

  // Blocks until the event has been delivered and acknowledged (or the
  // channel is closed, in which case the VM stays paused).
  SendResult send_event(EventKind kind, StepEvent step) {
    std::unique_lock<std::mutex> lk(m_);
    std::uint64_t seq = next_seq_++;
    space_cv_.wait(lk, [&] { return queue_.size() < depth_ || closed_; });
    if (closed_) return SendResult::closed;
    queue_.push_back(Event{seq, kind, std::move(step)});
    event_cv_.notify_all();
    ack_cv_.wait(lk, [&] { return last_acked_ >= seq || closed_; });
    return last_acked_ >= seq ? SendResult::acked : SendResult::closed;
  }

  // Non-blocking; returns the oldest unacknowledged event until it is acked.
  std::optional<Event> poll_event() {
    std::lock_guard<std::mutex> lk(m_);
    if (queue_.empty()) return std::nullopt;
    return queue_.front();
  }

  // Blocks until an event is available or the channel closes.
  std::optional<Event> wait_event() {
    std::unique_lock<std::mutex> lk(m_);
    event_cv_.wait(lk, [&] { return !queue_.empty() || closed_; });
    if (queue_.empty()) return std::nullopt;
    return queue_.front();
  }

  // Acknowledges the pending event; the sequence must match.
  void ack_event(std::uint64_t sequence) {
    std::lock_guard<std::mutex> lk(m_);
    if (queue_.empty())
      throw std::invalid_argument("ack with no pending event");
    if (queue_.front().sequence != sequence)
      throw std::invalid_argument("ack sequence mismatch");
    queue_.pop_front();
    last_acked_ = sequence;
    ack_cv_.notify_all();
    space_cv_.notify_all();
  }

  // Queues a configuration change; it takes effect at the next VM resume.
  void submit_config(const ConfigPatch& patch) {
    std::lock_guard<std::mutex> lk(m_);
    pending_config_.merge(patch);
  }

  // Supervisor side: atomically takes the queued configuration.
  std::optional<ConfigPatch> take_config() {
    std::lock_guard<std::mutex> lk(m_);
    if (pending_config_.empty()) return std::nullopt;
    ConfigPatch out = std::move(pending_config_);
    pending_config_ = {};
    return out;
  }

  void close() {
    std::lock_guard<std::mutex> lk(m_);
    closed_ = true;
    event_cv_.notify_all();
    ack_cv_.notify_all();
    space_cv_.notify_all();
  }

  bool closed() const {
    std::lock_guard<std::mutex> lk(m_);
    return closed_;
  }

 private:
  mutable std::mutex m_;
  std::condition_variable event_cv_, ack_cv_, space_cv_;
  std::deque<Event> queue_;
  std::size_t depth_;
  std::uint64_t next_seq_ = 1;
  std::uint64_t last_acked_ = 0;
  ConfigPatch pending_config_;
  bool closed_ = false;
};

}  // namespace stepsim
