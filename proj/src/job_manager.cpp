#include "qhyb/job_manager.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace qhyb {

std::string_view to_string(SchedulingMode m) noexcept {
  return m == SchedulingMode::Fifo ? "fifo" : "priority";
}

SchedulingMode parse_scheduling_mode(std::string_view s) {
  if (s == "fifo") return SchedulingMode::Fifo;
  if (s == "priority") return SchedulingMode::Priority;
  throw std::invalid_argument("unknown scheduling mode '" + std::string(s) + "'");
}

void to_json(Json& j, const QueueSnapshotEntry& e) {
  j = Json{{"job_id", e.job_id},
           {"origin", e.origin},
           {"priority", e.priority},
           {"submitted_at", e.submitted_at},
           {"position", e.position}};
}

void from_json(const Json& j, QueueSnapshotEntry& e) {
  j.at("job_id").get_to(e.job_id);
  j.at("origin").get_to(e.origin);
  j.at("priority").get_to(e.priority);
  j.at("submitted_at").get_to(e.submitted_at);
  j.at("position").get_to(e.position);
}

Scheduler::Scheduler(SchedulerPolicy policy) : policy_(std::move(policy)) {}

void Scheduler::add(QueueEntry entry) {
  entry.seq = next_seq_++;
  queue_.push_back(std::move(entry));
}

bool Scheduler::remove(const std::string& job_id) {
  const auto it = std::find_if(queue_.begin(), queue_.end(), [&](const auto& e) { return e.job_id == job_id; });
  if (it == queue_.end()) return false;
  queue_.erase(it);
  return true;
}

bool Scheduler::contains(const std::string& job_id) const {
  return std::any_of(queue_.begin(), queue_.end(), [&](const auto& e) { return e.job_id == job_id; });
}

bool Scheduler::before(const QueueEntry& a, const QueueEntry& b) const {
  if (policy_.mode == SchedulingMode::Fifo) {
    if (a.submitted_at != b.submitted_at) return a.submitted_at < b.submitted_at;
    return a.seq < b.seq;
  }
  const auto boost = [&](const QueueEntry& e) { return e.skips >= policy_.starvation_skips ? 1 : 0; };
  const auto pa = a.priority + boost(a);
  const auto pb = b.priority + boost(b);
  if (pa != pb) return pa > pb;
  if (a.submitted_at != b.submitted_at) return a.submitted_at < b.submitted_at;
  return a.job_id < b.job_id;
}

bool Scheduler::eligible(const QueueEntry& e, const std::optional<Reservation>& r) const {
  if (!r) return true;
  return e.origin == r->holder || (e.reservation_id && *e.reservation_id == r->id);
}

std::optional<QueueEntry> Scheduler::select(const std::optional<Reservation>& reservation) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < queue_.size(); ++i)
    if (eligible(queue_[i], reservation)) candidates.push_back(i);
  if (candidates.empty()) return std::nullopt;
  std::sort(candidates.begin(), candidates.end(),
            [&](std::size_t a, std::size_t b) { return before(queue_[a], queue_[b]); });

  std::size_t chosen = candidates.front();
  const int window = std::max(1, policy_.fair_use_window);
  if (policy_.fair_use_cap) {
    std::set<std::string> clusters;
    for (auto i : candidates) clusters.insert(queue_[i].origin.cluster);
    if (clusters.size() >= 2) {
      const auto limit = static_cast<int>(std::ceil(*policy_.fair_use_cap * window - 1e-9));
      std::map<std::string, int> recent;
      const auto lookback = std::min<std::size_t>(history_.size(), static_cast<std::size_t>(window - 1));
      for (auto it = history_.end() - static_cast<std::ptrdiff_t>(lookback); it != history_.end(); ++it)
        ++recent[*it];
      std::vector<std::size_t> skipped;
      std::optional<std::size_t> pick;
      for (auto i : candidates) {
        if (recent[queue_[i].origin.cluster] + 1 <= limit) {
          pick = i;
          break;
        }
        skipped.push_back(i);
      }
      // With every candidate over its share, fall back to the head so the
      // queue keeps moving.
      if (pick) {
        for (auto i : skipped) ++queue_[i].skips;
        chosen = *pick;
      }
    }
  }

  QueueEntry e = std::move(queue_[chosen]);
  queue_.erase(queue_.begin() + static_cast<std::ptrdiff_t>(chosen));
  history_.push_back(e.origin.cluster);
  while (history_.size() > static_cast<std::size_t>(window)) history_.pop_front();
  return e;
}

std::vector<QueueEntry> Scheduler::order(const std::optional<Reservation>& reservation) const {
  Scheduler sim = *this;
  std::vector<QueueEntry> out;
  while (auto e = sim.select(reservation)) out.push_back(std::move(*e));
  while (auto e = sim.select(std::nullopt)) out.push_back(std::move(*e));
  return out;
}

JobManager::JobManager(std::string backend, SchedulerPolicy policy)
    : backend_(std::move(backend)), scheduler_(std::move(policy)) {}

SchedulerPolicy JobManager::policy() const {
  std::lock_guard lock(mu_);
  return scheduler_.policy();
}

QueueEntry JobManager::entry_for(const Job& job) const {
  QueueEntry e;
  e.job_id = job.id;
  e.origin = job.origin;
  e.priority = job.priority;
  e.submitted_at = job.submitted_at;
  e.reservation_id = job.reservation_id;
  return e;
}

std::int64_t JobManager::enqueue(Job job) {
  if (job.state != JobState::Queued) throw std::invalid_argument("only Queued jobs can be enqueued");
  const std::string id = job.id;
  {
    std::lock_guard lock(mu_);
    if (jobs_.count(id)) throw JobManagerError(JobManagerError::Kind::DuplicateId, "duplicate job id " + id);
    scheduler_.add(entry_for(job));
    jobs_.emplace(id, std::move(job));
  }
  return queue_position(id).value_or(0);
}

void JobManager::restore(Job job) {
  std::lock_guard lock(mu_);
  if (job.state == JobState::Queued && !scheduler_.contains(job.id)) scheduler_.add(entry_for(job));
  jobs_[job.id] = std::move(job);
}

std::optional<Reservation> JobManager::active_reservation(TimestampMs now) const {
  std::lock_guard lock(mu_);
  return reservation_at(now);
}

std::optional<Reservation> JobManager::reservation_at(TimestampMs now) const {
  if (!scheduler_.policy().reservations_enabled) return std::nullopt;
  for (const auto& r : reservations_)
    if (r.backend == backend_ && r.active_at(now)) return r;
  return std::nullopt;
}

std::optional<Job> JobManager::next_dispatch(TimestampMs now, BackendStatus status) {
  if (status != BackendStatus::Idle) return std::nullopt;
  std::lock_guard lock(mu_);
  const auto reservation = reservation_at(now);
  const auto entry = scheduler_.select(reservation);
  if (!entry) return std::nullopt;
  Job& job = jobs_.at(entry->job_id);
  job = advance_state(std::move(job), LifecycleEvent::Dispatch, now);
  running_[job.id] = std::stop_source();
  return job;
}

std::optional<std::int64_t> JobManager::queue_position(const std::string& job_id) const {
  return queue_position(job_id, now_ms());
}

std::optional<std::int64_t> JobManager::queue_position(const std::string& job_id, TimestampMs now) const {
  std::lock_guard lock(mu_);
  const auto reservation = reservation_at(now);
  if (!jobs_.count(job_id)) throw JobManagerError(JobManagerError::Kind::UnknownJob, "unknown job " + job_id);
  if (!scheduler_.contains(job_id)) return std::nullopt;
  const auto order = scheduler_.order(reservation);
  for (std::size_t i = 0; i < order.size(); ++i)
    if (order[i].job_id == job_id) return static_cast<std::int64_t>(i);
  return std::nullopt;
}

QueueSnapshot JobManager::snapshot(TimestampMs now) const {
  std::lock_guard lock(mu_);
  const auto reservation = reservation_at(now);
  QueueSnapshot out;
  for (const auto& e : scheduler_.order(reservation)) {
    out.push_back({e.job_id, e.origin, e.priority, e.submitted_at, static_cast<std::int64_t>(out.size())});
  }
  return out;
}

std::size_t JobManager::queued() const {
  std::lock_guard lock(mu_);
  return scheduler_.size();
}

void JobManager::add_reservation(Reservation r) {
  using Kind = JobManagerError::Kind;
  std::lock_guard lock(mu_);
  if (!scheduler_.policy().reservations_enabled) throw JobManagerError(Kind::Disabled, "reservations are disabled");
  if (r.end <= r.start) throw JobManagerError(Kind::InvalidReservation, "reservation must end after it starts");
  if (r.backend.empty()) r.backend = backend_;
  if (r.id.empty()) r.id = make_uuid();
  for (const auto& other : reservations_) {
    if (other.id == r.id) throw JobManagerError(Kind::InvalidReservation, "duplicate reservation id " + r.id);
    if (other.backend == r.backend && r.start < other.end && other.start < r.end)
      throw JobManagerError(Kind::Overlap, "reservation overlaps " + other.id);
  }
  reservations_.push_back(std::move(r));
}

std::vector<Reservation> JobManager::reservations() const {
  std::lock_guard lock(mu_);
  return reservations_;
}

CancelOutcome JobManager::cancel(const std::string& job_id) {
  using Kind = JobManagerError::Kind;
  std::lock_guard lock(mu_);
  const auto it = jobs_.find(job_id);
  if (it == jobs_.end()) throw JobManagerError(Kind::UnknownJob, "unknown job " + job_id);
  Job& job = it->second;
  if (is_terminal(job.state)) throw JobManagerError(Kind::AlreadyTerminal, "job is already " + std::string(to_string(job.state)));
  if (job.state == JobState::Queued) {
    job = advance_state(std::move(job), LifecycleEvent::Cancel, now_ms());
    scheduler_.remove(job_id);
    return CancelOutcome::Cancelled;
  }
  if (const auto r = running_.find(job_id); r != running_.end()) r->second.request_stop();
  return CancelOutcome::Signalled;
}

std::stop_token JobManager::stop_token(const std::string& job_id) const {
  std::lock_guard lock(mu_);
  const auto it = running_.find(job_id);
  return it == running_.end() ? std::stop_token() : it->second.get_token();
}

void JobManager::set_backend_status(const std::string& backend, BackendStatus status) {
  std::lock_guard lock(mu_);
  if (backend == backend_) status_ = status;
}

BackendStatus JobManager::backend_status() const {
  std::lock_guard lock(mu_);
  return status_;
}

std::optional<Job> JobManager::get(const std::string& job_id) const {
  std::lock_guard lock(mu_);
  const auto it = jobs_.find(job_id);
  if (it == jobs_.end()) return std::nullopt;
  return it->second;
}

std::vector<Job> JobManager::jobs() const {
  std::lock_guard lock(mu_);
  std::vector<Job> out;
  for (const auto& [id, j] : jobs_) out.push_back(j);
  return out;
}

void JobManager::update(const Job& job) {
  std::lock_guard lock(mu_);
  jobs_[job.id] = job;
  if (is_terminal(job.state)) running_.erase(job.id);
}

std::size_t JobManager::active() const {
  std::lock_guard lock(mu_);
  std::size_t n = 0;
  for (const auto& [id, j] : jobs_)
    if (j.state != JobState::Queued && !is_terminal(j.state)) ++n;
  return n;
}

}  // namespace qhyb
