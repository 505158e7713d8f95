#include <doctest.h>

#include <signal.h>
#include <sys/wait.h>

#include <fstream>
#include <sstream>
#include <thread>

#include "qhyb/classical_runtime.hpp"
#include "test_paths.hpp"

using namespace qhyb;
using namespace qhyb::classical;
using namespace std::chrono_literals;

namespace {

HybridProgram fixture(std::vector<std::string> args) {
  return HybridProgram{testing::fixture_path("misbehave.py"), std::move(args), 10, {}};
}

SpawnOptions quick_options() {
  SpawnOptions o;
  o.work_root = std::filesystem::temp_directory_path() / "qhyb-test-runtimes";
  o.init_timeout = 10s;
  o.terminate_grace = 500ms;
  return o;
}

RuntimeError::Kind error_kind(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const RuntimeError& e) {
    return e.kind();
  }
  FAIL("expected RuntimeError");
  return RuntimeError::Kind::NotReady;
}

bool process_alive(pid_t pid) { return ::kill(pid, 0) == 0; }

// Live (non-zombie) members of a process group. Orphaned zombies are
// reaped by init, which may be slow or absent in a container.
int live_group_members(pid_t pgid) {
  int n = 0;
  for (const auto& entry : std::filesystem::directory_iterator("/proc")) {
    std::ifstream in(entry.path() / "stat");
    std::string stat;
    if (!std::getline(in, stat)) continue;
    const auto close = stat.rfind(')');
    if (close == std::string::npos) continue;
    std::istringstream rest(stat.substr(close + 2));
    char state = 0;
    long ppid = 0, pgrp = 0;
    rest >> state >> ppid >> pgrp;
    if (pgrp == pgid && state != 'Z' && state != 'X') ++n;
  }
  return n;
}

Histogram hist(std::map<std::string, std::uint64_t> counts) {
  Histogram h{std::move(counts), 0};
  for (const auto& [k, v] : h.counts) h.shots += v;
  return h;
}

}  // namespace

TEST_CASE("spawn an echo program") {
  const int live_before = RuntimeHandle::live_handles();
  auto h = RuntimeHandle::spawn(fixture({"echo"}), Json{{"job", "x"}}, quick_options());
  CHECK(h->state() == HandleState::Ready);
  CHECK(h->spawn_duration_us() > 0);
  CHECK(std::filesystem::is_directory(h->work_dir()));
  CHECK(RuntimeHandle::live_handles() == live_before + 1);
  const auto reply = h->step(std::nullopt, 5s);
  CHECK(reply.outcome == decltype(reply.outcome){std::string("version 1.0; qubits 1; H q[0]; measure_all")});
  CHECK(h->state() == HandleState::Ready);
  const pid_t pid = h->pid();
  const auto work = h->work_dir();
  CHECK(h->terminate().empty());
  CHECK(h->state() == HandleState::Terminated);
  CHECK_FALSE(process_alive(pid));
  CHECK_FALSE(std::filesystem::exists(work));
  CHECK(RuntimeHandle::live_handles() == live_before);
  CHECK(h->terminate().empty());  // idempotent
  CHECK(h->state() == HandleState::Terminated);
}

TEST_CASE("missing or non-executable program fails to spawn") {
  CHECK(error_kind([] {
          RuntimeHandle::spawn(HybridProgram{"/nonexistent/program", {}, 1, {}}, Json::object(), quick_options());
        }) == RuntimeError::Kind::SpawnFailed);
  const auto plain = std::filesystem::temp_directory_path() / "qhyb-not-executable.txt";
  std::ofstream(plain) << "hello";
  std::filesystem::permissions(plain, std::filesystem::perms::owner_read | std::filesystem::perms::owner_write);
  CHECK(error_kind([&] {
          RuntimeHandle::spawn(HybridProgram{plain.string(), {}, 1, {}}, Json::object(), quick_options());
        }) == RuntimeError::Kind::SpawnFailed);
  CHECK(error_kind([] {
          RuntimeHandle::spawn(HybridProgram{"/tmp", {}, 1, {}}, Json::object(), quick_options());
        }) == RuntimeError::Kind::SpawnFailed);
}

TEST_CASE("program that never becomes ready hits the init timeout") {
  auto opts = quick_options();
  opts.init_timeout = 300ms;
  const int live_before = RuntimeHandle::live_handles();
  const auto t0 = std::chrono::steady_clock::now();
  CHECK(error_kind([&] { RuntimeHandle::spawn(fixture({"sleep-init", "60"}), Json::object(), opts); }) ==
        RuntimeError::Kind::InitTimeout);
  CHECK(std::chrono::steady_clock::now() - t0 < 4s);
  CHECK(RuntimeHandle::live_handles() == live_before);
}

TEST_CASE("ping-pong program: first circuit and done after 10 histograms") {
  HybridProgram p{testing::program_path("pingpong.py"), {"--iterations", "10"}, 10, {}};
  auto h = RuntimeHandle::spawn(p, Json::object(), quick_options());
  auto reply = h->step(std::nullopt, 5s);
  REQUIRE_FALSE(reply.done());
  CHECK(std::get<std::string>(reply.outcome) == "version 1.0; qubits 2; H q[0]; measure_all");
  for (int i = 1; i <= 10; ++i) {
    reply = h->step(hist({{"00", 512}, {"01", 512}}), 5s);
    CHECK(h->lines_written() == h->lines_read());
    if (i < 10) REQUIRE_FALSE(reply.done());
  }
  REQUIRE(reply.done());
  CHECK(std::get<wire::ClassicalStepReply::Done>(reply.outcome).final_payload == Json{{"iterations", 10}});
  h->terminate();
}

TEST_CASE("one output line per input line") {
  auto h = RuntimeHandle::spawn(fixture({"echo"}), Json::object(), quick_options());
  CHECK(h->lines_written() == 1);
  CHECK(h->lines_read() == 1);
  for (int i = 0; i < 50; ++i) {
    h->step(i == 0 ? std::nullopt : std::optional<Histogram>(hist({{"0", 1}})), 5s);
    REQUIRE(h->lines_written() == h->lines_read());
  }
  CHECK(h->lines_read() == 51);
}

TEST_CASE("step errors") {
  SUBCASE("silent program times out") {
    auto h = RuntimeHandle::spawn(fixture({"sleep-step", "30"}), Json::object(), quick_options());
    const auto t0 = std::chrono::steady_clock::now();
    CHECK(error_kind([&] { h->step(std::nullopt, 200ms); }) == RuntimeError::Kind::StepTimeout);
    CHECK(std::chrono::steady_clock::now() - t0 < 1s);
    CHECK(h->state() == HandleState::Stepping);
    CHECK(error_kind([&] { h->step(std::nullopt, 200ms); }) == RuntimeError::Kind::NotReady);
  }
  SUBCASE("garbage line is a bad reply") {
    auto h = RuntimeHandle::spawn(fixture({"garbage"}), Json::object(), quick_options());
    CHECK(error_kind([&] { h->step(std::nullopt, 5s); }) == RuntimeError::Kind::BadReply);
  }
  SUBCASE("object without circuit or done is a bad reply") {
    auto h = RuntimeHandle::spawn(fixture({"no-circuit"}), Json::object(), quick_options());
    CHECK(error_kind([&] { h->step(std::nullopt, 5s); }) == RuntimeError::Kind::BadReply);
  }
  SUBCASE("program exiting mid-step") {
    auto h = RuntimeHandle::spawn(fixture({"die"}), Json::object(), quick_options());
    CHECK(error_kind([&] { h->step(std::nullopt, 5s); }) == RuntimeError::Kind::ChildExited);
  }
  SUBCASE("program killed externally mid-step") {
    auto h = RuntimeHandle::spawn(fixture({"sleep-step", "30"}), Json::object(), quick_options());
    std::jthread killer([pid = h->pid()] {
      std::this_thread::sleep_for(100ms);
      ::kill(pid, SIGKILL);
    });
    CHECK(error_kind([&] { h->step(std::nullopt, 10s); }) == RuntimeError::Kind::ChildExited);
  }
  SUBCASE("cancellation interrupts a step") {
    auto h = RuntimeHandle::spawn(fixture({"sleep-step", "30"}), Json::object(), quick_options());
    std::stop_source stop;
    std::jthread canceller([&] {
      std::this_thread::sleep_for(100ms);
      stop.request_stop();
    });
    const auto t0 = std::chrono::steady_clock::now();
    CHECK(error_kind([&] { h->step(std::nullopt, 10s, stop.get_token()); }) == RuntimeError::Kind::Cancelled);
    CHECK(std::chrono::steady_clock::now() - t0 < 1s);
  }
}

TEST_CASE("stderr is captured as diagnostics") {
  auto h = RuntimeHandle::spawn(fixture({"warn"}), Json::object(), quick_options());
  h->step(std::nullopt, 5s);
  CHECK(h->terminate().find("warning: slow convergence") != std::string::npos);
}

TEST_CASE("terminate returns within grace + 1 s and sweeps the process group") {
  auto opts = quick_options();
  opts.terminate_grace = 300ms;
  {
    auto h = RuntimeHandle::spawn(fixture({"ignore-eof"}), Json::object(), opts);
    const pid_t pid = h->pid();
    const auto t0 = std::chrono::steady_clock::now();
    h->terminate();
    CHECK(std::chrono::steady_clock::now() - t0 < 1300ms);
    CHECK(h->termination_duration_us() >= 300'000);
    CHECK_FALSE(process_alive(pid));
  }
  {
    auto h = RuntimeHandle::spawn(fixture({"spawn-child"}), Json::object(), opts);
    h->step(std::nullopt, 5s);
    const pid_t pgid = h->pid();
    CHECK(live_group_members(pgid) == 2);
    h->terminate();
    std::this_thread::sleep_for(50ms);
    CHECK(live_group_members(pgid) == 0);
  }
}

TEST_CASE("sandbox: no reads outside allowed directories, no network, writes only in work dir") {
  if (sandbox_abi() == 0) {
    MESSAGE("landlock unavailable; sandbox checks skipped");
    return;
  }
  const auto secret_dir = std::filesystem::temp_directory_path() / ("qhyb-secret-" + make_uuid());
  std::filesystem::create_directories(secret_dir);
  const auto secret = secret_dir / "secret.txt";
  std::ofstream(secret) << "top secret";

  {
    auto h = RuntimeHandle::spawn(fixture({"read", secret.string()}), Json::object(), quick_options());
    const auto r = h->step(std::nullopt, 5s);
    CHECK(std::get<wire::ClassicalStepReply::Done>(r.outcome).final_payload == Json{{"read", false}});
  }
  {
    // Same fixture without the sandbox can read it, so the denial above is the sandbox's doing.
    auto opts = quick_options();
    opts.sandbox = false;
    auto h = RuntimeHandle::spawn(fixture({"read", secret.string()}), Json::object(), opts);
    const auto r = h->step(std::nullopt, 5s);
    CHECK(std::get<wire::ClassicalStepReply::Done>(r.outcome).final_payload == Json{{"read", true}});
  }
  {
    auto h = RuntimeHandle::spawn(fixture({"read", testing::fixture_path("misbehave.py")}), Json::object(),
                                  quick_options());
    const auto r = h->step(std::nullopt, 5s);
    CHECK(std::get<wire::ClassicalStepReply::Done>(r.outcome).final_payload == Json{{"read", true}});
  }
  if (sandbox_abi() >= 4) {
    wire::Listener listener = wire::Listener::bind("127.0.0.1", 0);
    auto h = RuntimeHandle::spawn(fixture({"connect", std::to_string(listener.port())}), Json::object(),
                                  quick_options());
    const auto r = h->step(std::nullopt, 5s);
    CHECK(std::get<wire::ClassicalStepReply::Done>(r.outcome).final_payload == Json{{"connected", false}});
  }
  {
    auto h = RuntimeHandle::spawn(fixture({"write"}), Json::object(), quick_options());
    const auto r = h->step(std::nullopt, 5s);
    const auto& payload = std::get<wire::ClassicalStepReply::Done>(r.outcome).final_payload;
    CHECK(payload["work_dir"] == true);
    CHECK(payload["tmp"] == false);
    CHECK(payload["cwd"] == h->work_dir().string());
  }
  std::filesystem::remove_all(secret_dir);
}

TEST_CASE("handle pool") {
  HandlePool pool(2);
  const auto prog = fixture({"echo"});
  CHECK(pool.take(prog) == nullptr);
  CHECK(pool.put(RuntimeHandle::spawn(prog, Json::object(), quick_options())));
  CHECK(pool.put(RuntimeHandle::spawn(prog, Json::object(), quick_options())));
  auto extra = RuntimeHandle::spawn(prog, Json::object(), quick_options());
  const pid_t extra_pid = extra->pid();
  CHECK_FALSE(pool.put(std::move(extra)));
  CHECK_FALSE(process_alive(extra_pid));
  CHECK(pool.size() == 2);
  CHECK(pool.size(prog) == 2);
  CHECK(pool.take(fixture({"warn"})) == nullptr);

  auto h = pool.take(prog);
  REQUIRE(h != nullptr);
  CHECK(h->state() == HandleState::Ready);
  CHECK(pool.size() == 1);
  CHECK_FALSE(h->step(std::nullopt, 5s).done());

  HandlePool short_lived(1, 50ms);
  short_lived.put(RuntimeHandle::spawn(prog, Json::object(), quick_options()));
  std::this_thread::sleep_for(100ms);
  CHECK(short_lived.take(prog) == nullptr);
  CHECK(short_lived.size() == 0);
}

TEST_CASE("concurrent handles and pool access") {
  HandlePool pool(8);
  const auto prog = fixture({"echo"});
  const int live_before = RuntimeHandle::live_handles();
  std::vector<std::jthread> workers;
  std::atomic<int> ok{0};
  for (int i = 0; i < 4; ++i) {
    workers.emplace_back([&] {
      auto h = RuntimeHandle::spawn(prog, Json::object(), quick_options());
      h->step(std::nullopt, 10s);
      pool.put(RuntimeHandle::spawn(prog, Json::object(), quick_options()));
      if (auto pooled = pool.take(prog)) pooled->step(std::nullopt, 10s);
      ++ok;
    });
  }
  workers.clear();
  CHECK(ok == 4);
  pool.clear();
  CHECK(RuntimeHandle::live_handles() == live_before);
}
