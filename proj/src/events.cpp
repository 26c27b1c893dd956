#include "atelier/events.hpp"

namespace atelier {

namespace {
constexpr std::size_t kMaxEntries = 4096;
}

void EventHub::publish(const RenderJob& job) {
  {
    std::lock_guard lock(mu_);
    auto& e = entries_[job.id];
    ++e.seq;
    if (e.states.empty() || e.states.back().state != job.state) e.states.push_back(job);
    e.latest = job;
    if (entries_.size() > kMaxEntries) prune_locked();
  }
  cv_.notify_all();
}

void EventHub::prune_locked() {
  // Forget finished jobs; late subscribers fall back to the store snapshot.
  for (auto it = entries_.begin(); it != entries_.end();) {
    if (is_terminal(it->second.latest.state)) {
      it = entries_.erase(it);
    } else {
      ++it;
    }
  }
}

EventHub::Cursor EventHub::cursor(const std::string& job_id) const {
  std::lock_guard lock(mu_);
  const auto it = entries_.find(job_id);
  if (it == entries_.end()) return {};
  return {it->second.seq, it->second.states.size()};
}

EventHub::Update EventHub::wait(const std::string& job_id, Cursor from,
                                std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mu_);
  auto changed = [&] {
    if (shut_down_) return true;
    const auto it = entries_.find(job_id);
    return it != entries_.end() && it->second.seq != from.seq;
  };
  cv_.wait_for(lock, timeout, changed);

  Update up;
  up.cursor = from;
  const auto it = entries_.find(job_id);
  if (it == entries_.end()) return up;
  const Entry& e = it->second;
  // A pruned and re-created entry restarts its state list.
  const std::size_t start = from.state_index <= e.states.size() ? from.state_index : 0;
  up.new_states.assign(e.states.begin() + static_cast<std::ptrdiff_t>(start), e.states.end());
  up.latest = e.latest;
  up.cursor = {e.seq, e.states.size()};
  return up;
}

void EventHub::shutdown() {
  {
    std::lock_guard lock(mu_);
    shut_down_ = true;
  }
  cv_.notify_all();
}

bool EventHub::is_shut_down() const {
  std::lock_guard lock(mu_);
  return shut_down_;
}

}  // namespace atelier
