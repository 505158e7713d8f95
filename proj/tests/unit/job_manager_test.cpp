#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <set>
#include <thread>

#include "generators.hpp"
#include "qhyb/job_manager.hpp"

using namespace qhyb;

namespace {

constexpr TimestampMs kHour = 3'600'000;
constexpr TimestampMs kTen = 10 * kHour;  // 10:00 on day zero

Job queued_job(std::string id, std::string cluster = "c1", std::int64_t priority = 0, TimestampMs submitted = 0) {
  Job j;
  j.id = std::move(id);
  j.origin = {std::move(cluster), "user"};
  j.priority = priority;
  j.submitted_at = submitted;
  j.payload = CircuitText{"version 1.0; qubits 1; measure_all"};
  j.kind = JobKind::PureQuantum;
  return j;
}

JobManagerError::Kind error_kind(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const JobManagerError& e) {
    return e.kind();
  }
  FAIL("expected JobManagerError");
  return JobManagerError::Kind::UnknownJob;
}

SchedulerPolicy priority_policy() {
  SchedulerPolicy p;
  p.mode = SchedulingMode::Priority;
  return p;
}

}  // namespace

TEST_CASE("enqueue examples") {
  JobManager m("emulator-1");
  CHECK(m.enqueue(queued_job("a", "c1", 0, 1)) == 0);
  CHECK(m.enqueue(queued_job("b", "c1", 0, 2)) == 1);
  CHECK(m.enqueue(queued_job("c", "c1", 0, 3)) == 2);
  CHECK(error_kind([&] { m.enqueue(queued_job("a")); }) == JobManagerError::Kind::DuplicateId);

  JobManager offline("emulator-1");
  offline.set_backend_status("emulator-1", BackendStatus::Offline);
  CHECK(offline.enqueue(queued_job("x")) == 0);
  CHECK(offline.queued() == 1);
}

TEST_CASE("next_dispatch respects backend status") {
  JobManager m("emulator-1");
  m.enqueue(queued_job("a"));
  CHECK_FALSE(m.next_dispatch(0, BackendStatus::Calibrating).has_value());
  CHECK_FALSE(m.next_dispatch(0, BackendStatus::Offline).has_value());
  CHECK_FALSE(m.next_dispatch(0, BackendStatus::Executing).has_value());
  const auto j = m.next_dispatch(5, BackendStatus::Idle);
  REQUIRE(j.has_value());
  CHECK(j->id == "a");
  CHECK(j->state == JobState::Dispatched);
  CHECK(j->started_at == 5);
  CHECK(m.get("a")->state == JobState::Dispatched);
  CHECK_FALSE(m.queue_position("a").has_value());
  CHECK_FALSE(m.next_dispatch(6, BackendStatus::Idle).has_value());
}

TEST_CASE("backend status gates dispatch until Idle") {
  JobManager m("emulator-1");
  m.set_backend_status("emulator-1", BackendStatus::Offline);
  m.enqueue(queued_job("a"));
  CHECK_FALSE(m.next_dispatch(0, m.backend_status()).has_value());
  m.set_backend_status("emulator-1", BackendStatus::Calibrating);
  CHECK_FALSE(m.next_dispatch(0, m.backend_status()).has_value());
  m.set_backend_status("other-backend", BackendStatus::Idle);
  CHECK(m.backend_status() == BackendStatus::Calibrating);
  m.set_backend_status("emulator-1", BackendStatus::Idle);
  CHECK(m.next_dispatch(0, m.backend_status())->id == "a");
}

TEST_CASE("priority mode picks the highest priority") {
  JobManager m("emulator-1", priority_policy());
  m.enqueue(queued_job("a", "c1", 0, 1));
  m.enqueue(queued_job("b", "c1", 5, 2));
  CHECK(m.queue_position("b") == 0);
  CHECK(m.queue_position("a") == 1);
  CHECK(m.next_dispatch(10, BackendStatus::Idle)->id == "b");

  // Ties: submitted_at, then id.
  JobManager t("emulator-1", priority_policy());
  t.enqueue(queued_job("z", "c1", 1, 5));
  t.enqueue(queued_job("y", "c1", 1, 5));
  t.enqueue(queued_job("x", "c1", 1, 6));
  CHECK(t.next_dispatch(10, BackendStatus::Idle)->id == "y");
  CHECK(t.next_dispatch(10, BackendStatus::Idle)->id == "z");
  CHECK(t.next_dispatch(10, BackendStatus::Idle)->id == "x");
}

TEST_CASE("fifo ignores priority") {
  JobManager m("emulator-1");
  m.enqueue(queued_job("a", "c1", 0, 1));
  m.enqueue(queued_job("b", "c1", 9, 2));
  CHECK(m.next_dispatch(10, BackendStatus::Idle)->id == "a");
}

TEST_CASE("reservations") {
  SchedulerPolicy p;
  p.reservations_enabled = true;
  SUBCASE("half-open windows may touch") {
    JobManager m("emulator-1", p);
    m.add_reservation({"r1", {"X", "u"}, "emulator-1", kTen, kTen + kHour});
    m.add_reservation({"r2", {"X", "u"}, "emulator-1", kTen + kHour, kTen + 2 * kHour});
    CHECK(m.reservations().size() == 2);
  }
  SUBCASE("overlap is rejected") {
    JobManager m("emulator-1", p);
    m.add_reservation({"r1", {"X", "u"}, "emulator-1", kTen, kTen + kHour});
    CHECK(error_kind([&] {
            m.add_reservation({"r2", {"X", "u"}, "emulator-1", kTen + kHour / 2, kTen + 3 * kHour / 2});
          }) == JobManagerError::Kind::Overlap);
    // Another backend does not conflict.
    m.add_reservation({"r3", {"X", "u"}, "emulator-2", kTen, kTen + kHour});
  }
  SUBCASE("disabled") {
    JobManager m("emulator-1");
    CHECK(error_kind([&] { m.add_reservation({"r1", {"X", "u"}, "emulator-1", kTen, kTen + kHour}); }) ==
          JobManagerError::Kind::Disabled);
  }
  SUBCASE("empty window") {
    JobManager m("emulator-1", p);
    CHECK(error_kind([&] { m.add_reservation({"r1", {"X", "u"}, "emulator-1", kTen, kTen}); }) ==
          JobManagerError::Kind::InvalidReservation);
  }
  SUBCASE("holder jobs jump ahead inside the window") {
    JobManager m("emulator-1", p);
    m.add_reservation({"r1", {"X", "u"}, "emulator-1", kTen, kTen + kHour});
    Job y = queued_job("y", "Y", 0, 1);
    Job x = queued_job("x", "X", 0, 2);
    x.origin.user = "u";
    m.enqueue(y);
    m.enqueue(x);
    CHECK(m.queue_position("x", kTen) == 0);
    CHECK(m.queue_position("y", kTen) == 1);
    CHECK(m.queue_position("y", kTen - 1) == 0);
    CHECK(m.next_dispatch(kTen, BackendStatus::Idle)->id == "x");
    CHECK_FALSE(m.next_dispatch(kTen + 1, BackendStatus::Idle).has_value());  // Y waits
    CHECK(m.get("y")->state == JobState::Queued);
    CHECK(m.next_dispatch(kTen + kHour, BackendStatus::Idle)->id == "y");  // end is exclusive
  }
  SUBCASE("jobs carrying the reservation id are eligible") {
    JobManager m("emulator-1", p);
    m.add_reservation({"r1", {"X", "u"}, "emulator-1", kTen, kTen + kHour});
    Job other = queued_job("o", "Z", 0, 1);
    other.reservation_id = "r1";
    m.enqueue(other);
    CHECK(m.next_dispatch(kTen, BackendStatus::Idle)->id == "o");
  }
}

TEST_CASE("cancel") {
  JobManager m("emulator-1");
  m.enqueue(queued_job("a", "c1", 0, 1));
  m.enqueue(queued_job("b", "c1", 0, 2));
  CHECK(m.cancel("a") == CancelOutcome::Cancelled);
  CHECK(m.get("a")->state == JobState::Cancelled);
  CHECK(m.get("a")->finished_at.has_value());
  CHECK(m.queue_position("b") == 0);
  CHECK(error_kind([&] { m.cancel("a"); }) == JobManagerError::Kind::AlreadyTerminal);
  CHECK(error_kind([&] { m.cancel("nope"); }) == JobManagerError::Kind::UnknownJob);
  CHECK(error_kind([&] { m.queue_position("nope"); }) == JobManagerError::Kind::UnknownJob);

  auto running = m.next_dispatch(3, BackendStatus::Idle);
  REQUIRE(running);
  const auto token = m.stop_token("b");
  CHECK_FALSE(token.stop_requested());
  CHECK(m.cancel("b") == CancelOutcome::Signalled);
  CHECK(token.stop_requested());

  Job done = *m.get("b");
  done = advance_state(done, LifecycleEvent::Fail, 4);
  m.update(done);
  CHECK(error_kind([&] { m.cancel("b"); }) == JobManagerError::Kind::AlreadyTerminal);
  CHECK(m.active() == 0);
}

TEST_CASE("FIFO order preservation over random jobs and poll timings") {
  testing::Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    JobManager m("emulator-1");
    std::vector<std::string> submitted;
    std::vector<std::string> dispatched;
    TimestampMs clock = 0;
    int next = 0;
    while (dispatched.size() < 100) {
      const bool submit = next < 100 && (testing::uniform_int(rng, 0, 2) > 0 || m.queued() == 0);
      if (submit) {
        clock += testing::uniform_int(rng, 0, 2);  // ties are common
        const std::string id = "j" + std::to_string(1000 - next);  // ids sort opposite to submission
        Job j = queued_job(id, "c" + std::to_string(testing::uniform_int(rng, 0, 3)),
                           testing::uniform_int(rng, -5, 5), clock);
        m.enqueue(j);
        submitted.push_back(id);
        ++next;
      } else {
        const auto status = testing::uniform_int(rng, 0, 3) == 0 ? BackendStatus::Calibrating : BackendStatus::Idle;
        if (auto j = m.next_dispatch(clock, status)) dispatched.push_back(j->id);
      }
    }
    REQUIRE(dispatched == submitted);
  }
}

TEST_CASE("queue positions in FIFO equal submission rank") {
  testing::Rng rng(23);
  JobManager m("emulator-1");
  std::vector<Job> jobs;
  for (int i = 0; i < 100; ++i) {
    jobs.push_back(queued_job(testing::random_word(rng, 8) + std::to_string(i), "c", 0,
                              static_cast<TimestampMs>(testing::uniform_int(rng, 0, 50))));
  }
  // Oracle: stable sort by submitted_at of the admission order.
  std::vector<Job> oracle = jobs;
  std::stable_sort(oracle.begin(), oracle.end(),
                   [](const Job& a, const Job& b) { return a.submitted_at < b.submitted_at; });
  for (const auto& j : jobs) m.enqueue(j);
  const auto snap = m.snapshot(0);
  REQUIRE(snap.size() == 100);
  for (std::size_t k = 0; k < oracle.size(); ++k) {
    CHECK(m.queue_position(oracle[k].id, 0) == static_cast<std::int64_t>(k));
    CHECK(snap[k].job_id == oracle[k].id);
    CHECK(snap[k].position == static_cast<std::int64_t>(k));
  }
}

TEST_CASE("priority dominance with deterministic tie-break") {
  testing::Rng rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    JobManager m("emulator-1", priority_policy());
    std::map<std::string, Job> pending;  // oracle's view of the queue
    TimestampMs clock = 0;
    int next = 0, dispatched = 0;
    while (dispatched < 100) {
      if (next < 100 && (testing::uniform_int(rng, 0, 1) == 0 || pending.empty())) {
        clock += testing::uniform_int(rng, 0, 1);
        Job j = queued_job(testing::random_word(rng, 6) + "-" + std::to_string(next), "c",
                           testing::uniform_int(rng, 0, 4), clock);
        pending[j.id] = j;
        m.enqueue(j);
        ++next;
        continue;
      }
      const auto got = m.next_dispatch(clock, BackendStatus::Idle);
      REQUIRE(got.has_value());
      const Job* best = nullptr;
      for (const auto& [id, j] : pending) {
        if (!best || j.priority > best->priority ||
            (j.priority == best->priority &&
             (j.submitted_at < best->submitted_at || (j.submitted_at == best->submitted_at && j.id < best->id))))
          best = &j;
      }
      REQUIRE(got->id == best->id);
      pending.erase(got->id);
      ++dispatched;
    }
  }
}

TEST_CASE("reservation safety over randomized windows") {
  testing::Rng rng(41);
  SchedulerPolicy p;
  p.reservations_enabled = true;
  const std::vector<Origin> origins = {{"X", "u1"}, {"X", "u2"}, {"Y", "u1"}, {"Z", "u3"}};
  int dispatched_inside = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    JobManager m("emulator-1", p);
    std::vector<Reservation> windows;
    TimestampMs t = 0;
    for (int r = 0; r < 3; ++r) {
      const TimestampMs start = t + testing::uniform_int(rng, 0, 20);
      const TimestampMs end = start + testing::uniform_int(rng, 1, 20);
      Reservation res{"r" + std::to_string(r), origins[testing::uniform_int(rng, 0, 3)], "emulator-1", start, end};
      m.add_reservation(res);
      windows.push_back(res);
      t = end;
    }
    std::map<std::string, Job> jobs;
    for (int i = 0; i < 12; ++i) {
      Job j = queued_job("j" + std::to_string(i), "", testing::uniform_int(rng, 0, 3), i);
      j.origin = origins[testing::uniform_int(rng, 0, 3)];
      if (testing::uniform_int(rng, 0, 5) == 0) j.reservation_id = "r" + std::to_string(testing::uniform_int(rng, 0, 2));
      jobs[j.id] = j;
      m.enqueue(j);
    }
    for (TimestampMs now = 0; now <= t + 1; now += testing::uniform_int(rng, 1, 4)) {
      const auto got = m.next_dispatch(now, BackendStatus::Idle);
      const Reservation* active = nullptr;
      for (const auto& w : windows)
        if (w.start <= now && now < w.end) active = &w;
      if (!got) {
        // Nothing dispatched: inside a window no eligible job may remain.
        if (!active) REQUIRE(m.queued() == 0);
        continue;
      }
      if (active) {
        ++dispatched_inside;
        const Job& j = jobs.at(got->id);
        REQUIRE((j.origin == active->holder || j.reservation_id == active->id));
      }
    }
  }
  CHECK(dispatched_inside > 100);
}

TEST_CASE("fair-use window bound with two flooding clusters") {
  SchedulerPolicy p;
  p.mode = SchedulingMode::Priority;
  p.fair_use_cap = 0.5;
  p.fair_use_window = 20;
  testing::Rng rng(53);
  JobManager m("emulator-1", p);
  int seq = 0;
  auto refill = [&](const std::string& cluster, int n, int priority) {
    for (int i = 0; i < n; ++i) {
      m.enqueue(queued_job(cluster + std::to_string(seq), cluster, priority, seq));
      ++seq;
    }
  };
  // A floods at higher priority, so without the cap it would take everything.
  refill("A", 30, 5);
  refill("B", 30, 0);
  std::vector<std::string> order;
  for (int d = 0; d < 400; ++d) {
    const auto j = m.next_dispatch(d, BackendStatus::Idle);
    REQUIRE(j.has_value());
    order.push_back(j->origin.cluster);
    // Keep both clusters continuously queued.
    if (testing::uniform_int(rng, 0, 1)) refill("A", 1, 5);
    else refill("B", 1, 0);
    refill(j->origin.cluster, 1, j->origin.cluster == "A" ? 5 : 0);
  }
  for (std::size_t start = 0; start + 20 <= order.size(); ++start) {
    const auto a = std::count(order.begin() + start, order.begin() + start + 20, std::string("A"));
    REQUIRE(a <= 10);
    REQUIRE(20 - a <= 10);
  }

  // Without the cap the high-priority flood takes every slot.
  p.fair_use_cap.reset();
  JobManager uncapped("emulator-1", p);
  for (int i = 0; i < 10; ++i) {
    uncapped.enqueue(queued_job("A" + std::to_string(i), "A", 5, i));
    uncapped.enqueue(queued_job("B" + std::to_string(i), "B", 0, i));
  }
  for (int i = 0; i < 10; ++i) CHECK(uncapped.next_dispatch(i, BackendStatus::Idle)->origin.cluster == "A");
}

TEST_CASE("fair use does not constrain a single cluster") {
  SchedulerPolicy p;
  p.fair_use_cap = 0.25;
  JobManager m("emulator-1", p);
  for (int i = 0; i < 30; ++i) m.enqueue(queued_job("a" + std::to_string(i), "A", 0, i));
  for (int i = 0; i < 30; ++i) REQUIRE(m.next_dispatch(i, BackendStatus::Idle).has_value());
}

TEST_CASE("starvation guard boosts a repeatedly skipped job") {
  SchedulerPolicy p;
  p.mode = SchedulingMode::Priority;
  p.fair_use_cap = 0.5;
  p.fair_use_window = 4;  // limit 2 per window of 4
  Scheduler s(p);
  auto entry = [](std::string id, std::string cluster, std::int64_t prio, TimestampMs t) {
    QueueEntry e;
    e.job_id = std::move(id);
    e.origin = {std::move(cluster), "u"};
    e.priority = prio;
    e.submitted_at = t;
    return e;
  };
  s.add(entry("a1", "A", 1, 0));
  s.add(entry("a2", "A", 1, 1));
  s.add(entry("a3", "A", 1, 2));
  s.add(entry("b1", "B", 0, 3));
  s.add(entry("b2", "B", 0, 4));
  s.add(entry("b3", "B", 0, 5));
  s.add(entry("c1", "C", 1, 6));
  CHECK(s.select(std::nullopt)->job_id == "a1");
  CHECK(s.select(std::nullopt)->job_id == "a2");
  // A has 2 of the last 3: a3 is skipped in favour of c1, then B.
  CHECK(s.select(std::nullopt)->job_id == "c1");
  CHECK(s.select(std::nullopt)->job_id == "b1");
  const auto a3 = std::find_if(s.entries().begin(), s.entries().end(), [](auto& e) { return e.job_id == "a3"; });
  REQUIRE(a3 != s.entries().end());
  CHECK(a3->skips == 2);
  CHECK(s.select(std::nullopt)->job_id == "a3");

  // A job that has been skipped enough times outranks its equal-priority peers.
  Scheduler boost(p);
  QueueEntry early = entry("early", "B", 0, 1);
  QueueEntry starved = entry("starved", "A", 0, 5);
  starved.skips = 3;
  boost.add(early);
  boost.add(starved);
  CHECK(boost.select(std::nullopt)->job_id == "starved");
}

TEST_CASE("liveness under repeated Idle polls") {
  testing::Rng rng(61);
  for (int trial = 0; trial < 200; ++trial) {
    SchedulerPolicy p;
    p.mode = testing::uniform_int(rng, 0, 1) ? SchedulingMode::Fifo : SchedulingMode::Priority;
    if (testing::uniform_int(rng, 0, 1)) p.fair_use_cap = 0.05 * testing::uniform_int(rng, 1, 20);
    p.fair_use_window = testing::uniform_int(rng, 1, 30);
    JobManager m("emulator-1", p);
    const int n = testing::uniform_int(rng, 1, 40);
    for (int i = 0; i < n; ++i) {
      m.enqueue(queued_job("j" + std::to_string(i), "c" + std::to_string(testing::uniform_int(rng, 0, 3)),
                           testing::uniform_int(rng, 0, 3), i));
    }
    // Bounded model: every Idle poll on a non-empty queue dispatches.
    int polls = 0;
    while (m.queued() > 0 && polls < 4 * n) {
      const bool idle = testing::uniform_int(rng, 0, 2) > 0;
      const auto got = m.next_dispatch(polls, idle ? BackendStatus::Idle : BackendStatus::Calibrating);
      REQUIRE(got.has_value() == idle);
      ++polls;
    }
    REQUIRE(m.queued() == 0);
  }
}

TEST_CASE("queue positions agree with the actual dispatch order") {
  testing::Rng rng(71);
  for (int trial = 0; trial < 100; ++trial) {
    SchedulerPolicy p;
    p.mode = testing::uniform_int(rng, 0, 1) ? SchedulingMode::Fifo : SchedulingMode::Priority;
    if (testing::uniform_int(rng, 0, 1)) p.fair_use_cap = 0.1 * testing::uniform_int(rng, 3, 10);
    p.fair_use_window = testing::uniform_int(rng, 2, 10);
    p.reservations_enabled = true;
    JobManager m("emulator-1", p);
    if (testing::uniform_int(rng, 0, 1)) m.add_reservation({"r", {"c0", "u"}, "emulator-1", 0, 1000});
    for (int i = 0; i < 15; ++i) {
      Job j = queued_job("j" + std::to_string(i), "c" + std::to_string(testing::uniform_int(rng, 0, 2)),
                         testing::uniform_int(rng, 0, 3), testing::uniform_int(rng, 0, 5));
      j.origin.user = "u";
      m.enqueue(j);
    }
    const auto snap = m.snapshot(500);
    std::vector<std::string> predicted;
    for (const auto& e : snap) predicted.push_back(e.job_id);
    std::vector<std::string> actual;
    while (auto j = m.next_dispatch(500, BackendStatus::Idle)) actual.push_back(j->id);
    while (auto j = m.next_dispatch(2000, BackendStatus::Idle)) actual.push_back(j->id);
    REQUIRE(actual.size() == 15);
    REQUIRE(actual == predicted);
  }
}

TEST_CASE("concurrent enqueue and polling never dispatches a job twice") {
  JobManager m("emulator-1", priority_policy());
  std::atomic<bool> done{false};
  std::mutex seen_mu;
  std::vector<std::string> seen;
  std::vector<std::jthread> threads;
  for (int w = 0; w < 4; ++w) {
    threads.emplace_back([&, w] {
      for (int i = 0; i < 250; ++i) m.enqueue(queued_job("w" + std::to_string(w) + "-" + std::to_string(i), "c", i % 3, i));
    });
  }
  for (int p = 0; p < 4; ++p) {
    threads.emplace_back([&, p] {
      while (!done || m.queued() > 0) {
        // One poller also flips the admin status to Executing and back.
        if (p == 0) m.set_backend_status("emulator-1", BackendStatus::Executing);
        if (p == 0) m.set_backend_status("emulator-1", BackendStatus::Idle);
        if (auto j = m.next_dispatch(now_ms(), m.backend_status())) {
          std::lock_guard lock(seen_mu);
          seen.push_back(j->id);
        }
      }
    });
  }
  for (int w = 0; w < 4; ++w) threads[w].join();
  done = true;
  threads.clear();
  std::set<std::string> unique(seen.begin(), seen.end());
  CHECK(seen.size() == 1000);
  CHECK(unique.size() == 1000);
}
