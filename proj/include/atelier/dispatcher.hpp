#pragma once

#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <stop_token>
#include <string>
#include <thread>
#include <vector>

#include "atelier/backend.hpp"
#include "atelier/events.hpp"
#include "atelier/store.hpp"

namespace atelier {

/// Applies `change` to the stored job under compare-and-set, retrying on
/// conflicts, then publishes the result. `change` returns nullopt to leave
/// the job untouched. Returns the committed job, or nullopt if skipped.
std::optional<RenderJob> update_job(ProjectStore& store, EventHub& hub, const std::string& job_id,
                                    const std::function<std::optional<RenderJob>(const RenderJob&)>& change);

/// Convenience wrapper: transition() under update_job. Throws InvalidTransition.
RenderJob apply_event(ProjectStore& store, EventHub& hub, const std::string& job_id,
                      const JobEvent& ev);

/// Inputs for one backend call, assembled from a stored job. Writes the
/// control maps it computes into the store.
BackendRequest prepare_request(ProjectStore& store, const RenderJob& job, const CannySettings& canny,
                               const DepthSettings& depth_settings);

struct DispatcherConfig {
  int workers = 1;
  CannySettings canny;
  DepthSettings depth;
  /// Minimum spacing between persisted progress updates.
  std::chrono::milliseconds progress_save_interval{100};
};

/// Drains the job queue. Workers prepare jobs in parallel, but only one
/// backend call is in flight at a time.
class Dispatcher {
 public:
  Dispatcher(ProjectStore& store, Backend& backend, EventHub& hub, DispatcherConfig config = {});
  ~Dispatcher();

  Dispatcher(const Dispatcher&) = delete;
  Dispatcher& operator=(const Dispatcher&) = delete;

  /// Requeues Queued jobs and fails jobs a previous process left running.
  void recover();
  void start();
  void stop();

  void enqueue(const std::string& job_id);
  /// Interrupts the backend call of a running job. The caller records the
  /// Canceled state first.
  void interrupt(const std::string& job_id);

  std::size_t queued() const;

 private:
  void worker_loop(std::stop_token stop);
  void run_job(const std::string& job_id);

  ProjectStore& store_;
  Backend& backend_;
  EventHub& hub_;
  DispatcherConfig config_;

  mutable std::mutex mu_;
  std::condition_variable_any cv_;
  std::deque<std::string> queue_;
  std::map<std::string, std::stop_source> running_;
  std::mutex backend_mu_;
  std::vector<std::jthread> workers_;
};

}  // namespace atelier
