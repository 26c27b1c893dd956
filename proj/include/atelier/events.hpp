#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "atelier/job_model.hpp"

namespace atelier {

/// In-memory fan-out of job changes to live subscribers. The store stays the
/// source of truth; the hub only wakes listeners and remembers the sequence
/// of states so a slow subscriber still sees every transition.
class EventHub {
 public:
  struct Cursor {
    std::uint64_t seq = 0;
    std::size_t state_index = 0;
  };

  struct Update {
    Cursor cursor;
    std::vector<RenderJob> new_states;  // one snapshot per state change
    std::optional<RenderJob> latest;
  };

  void publish(const RenderJob& job);

  /// Position just past everything published so far for the job.
  Cursor cursor(const std::string& job_id) const;

  /// Blocks until the job changes past `from`, the timeout passes, or the hub
  /// shuts down.
  Update wait(const std::string& job_id, Cursor from, std::chrono::milliseconds timeout) const;

  /// Wakes every waiter; later waits return immediately.
  void shutdown();
  bool is_shut_down() const;

 private:
  struct Entry {
    std::uint64_t seq = 0;
    std::vector<RenderJob> states;
    RenderJob latest;
  };

  void prune_locked();

  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::map<std::string, Entry> entries_;
  bool shut_down_ = false;
};

}  // namespace atelier
