#pragma once

// Queueing and scheduling: admits jobs, orders them by policy, respects
// backend status and reservations, enforces fair use across clusters.

#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <stop_token>
#include <string>
#include <vector>

#include "qhyb/core_model.hpp"

namespace qhyb {

enum class SchedulingMode { Fifo, Priority };

std::string_view to_string(SchedulingMode m) noexcept;
SchedulingMode parse_scheduling_mode(std::string_view s);

struct SchedulerPolicy {
  SchedulingMode mode = SchedulingMode::Fifo;
  // Max share of the last `fair_use_window` dispatches one cluster may take.
  std::optional<double> fair_use_cap;
  int fair_use_window = 20;
  bool reservations_enabled = false;
  // Consecutive fair-use skips after which a job gains one priority step.
  int starvation_skips = 3;
};

struct QueueEntry {
  std::string job_id;
  Origin origin;
  std::int64_t priority = 0;
  TimestampMs submitted_at = 0;
  std::optional<std::string> reservation_id;
  std::uint64_t seq = 0;  // admission order
  int skips = 0;          // consecutive fair-use skips
};

struct QueueSnapshotEntry {
  std::string job_id;
  Origin origin;
  std::int64_t priority = 0;
  TimestampMs submitted_at = 0;
  std::int64_t position = 0;
};

using QueueSnapshot = std::vector<QueueSnapshotEntry>;

void to_json(Json& j, const QueueSnapshotEntry& e);
void from_json(const Json& j, QueueSnapshotEntry& e);

/// Pure scheduling state: the queue plus the recent dispatch history.
/// Copyable so positions can be computed by simulating future selections.
class Scheduler {
 public:
  explicit Scheduler(SchedulerPolicy policy = {});

  const SchedulerPolicy& policy() const noexcept { return policy_; }
  void set_policy(SchedulerPolicy policy) { policy_ = std::move(policy); }

  void add(QueueEntry entry);
  bool remove(const std::string& job_id);
  bool contains(const std::string& job_id) const;
  std::size_t size() const noexcept { return queue_.size(); }
  const std::vector<QueueEntry>& entries() const noexcept { return queue_; }
  const std::deque<std::string>& history() const noexcept { return history_; }

  /// Picks and removes the next job. `reservation` is the one active now, if any.
  std::optional<QueueEntry> select(const std::optional<Reservation>& reservation);

  /// Dispatch order of every queued job if the backend stayed Idle at the
  /// given reservation state; jobs the reservation blocks come last.
  std::vector<QueueEntry> order(const std::optional<Reservation>& reservation) const;

 private:
  bool before(const QueueEntry& a, const QueueEntry& b) const;
  bool eligible(const QueueEntry& e, const std::optional<Reservation>& r) const;

  SchedulerPolicy policy_;
  std::vector<QueueEntry> queue_;
  std::deque<std::string> history_;  // clusters of recent dispatches, newest last
  std::uint64_t next_seq_ = 0;
};

class JobManagerError : public std::runtime_error {
 public:
  enum class Kind { DuplicateId, UnknownJob, AlreadyTerminal, Overlap, Disabled, InvalidReservation };

  JobManagerError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

enum class CancelOutcome { Cancelled, Signalled };

/// Thread-safe job table, queue, reservations and backend status for one
/// backend. next_dispatch selects and transitions in one critical section.
class JobManager {
 public:
  explicit JobManager(std::string backend, SchedulerPolicy policy = {});

  const std::string& backend() const noexcept { return backend_; }
  SchedulerPolicy policy() const;

  /// Admits a Queued job whatever the backend status; returns its position.
  std::int64_t enqueue(Job job);
  /// Reloads a persisted job in any state; Queued jobs rejoin the queue.
  void restore(Job job);

  std::optional<Job> next_dispatch(TimestampMs now, BackendStatus status);

  std::optional<std::int64_t> queue_position(const std::string& job_id) const;
  std::optional<std::int64_t> queue_position(const std::string& job_id, TimestampMs now) const;
  QueueSnapshot snapshot(TimestampMs now) const;
  std::size_t queued() const;

  void add_reservation(Reservation r);
  std::vector<Reservation> reservations() const;
  std::optional<Reservation> active_reservation(TimestampMs now) const;

  CancelOutcome cancel(const std::string& job_id);
  /// Cancellation signal for a dispatched job.
  std::stop_token stop_token(const std::string& job_id) const;

  /// Administrative status; Executing is layered on top by the service.
  void set_backend_status(const std::string& backend, BackendStatus status);
  BackendStatus backend_status() const;

  std::optional<Job> get(const std::string& job_id) const;
  std::vector<Job> jobs() const;
  /// Stores a newer version of a known job (state changes from a run).
  void update(const Job& job);
  /// Number of jobs dispatched and not yet terminal.
  std::size_t active() const;

 private:
  QueueEntry entry_for(const Job& job) const;
  std::optional<Reservation> reservation_at(TimestampMs now) const;  // caller holds mu_

  std::string backend_;
  mutable std::mutex mu_;
  Scheduler scheduler_;
  std::map<std::string, Job> jobs_;
  std::vector<Reservation> reservations_;
  std::map<std::string, std::stop_source> running_;
  BackendStatus status_ = BackendStatus::Idle;
};

}  // namespace qhyb
