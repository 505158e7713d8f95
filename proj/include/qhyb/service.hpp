#pragma once

// HTTP front end of the stack: native job routes, the SLURM-compatible
// submission endpoint, token auth, a journal for restart and the
// accounting ledger. One Service owns one backend, its job manager,
// dispatcher and embedded emulator runtime.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "qhyb/core_model.hpp"
#include "qhyb/dispatcher.hpp"
#include "qhyb/job_manager.hpp"

namespace httplib {
class Server;
}

namespace qhyb {

namespace emulator {
class QuantumRuntimeServer;
}

struct ServiceConfig {
  std::string host = "127.0.0.1";
  std::uint16_t port = 6666;          // 0 picks a free port
  std::uint16_t quantum_port = 5556;  // 0 picks a free port
  std::string backend = "emulator-1";
  std::size_t hot_pool_size = 2;
  // Program kept warm in the pool at startup; empty disables prewarming.
  std::string hot_pool_program;
  std::vector<std::string> hot_pool_args;
  SchedulerPolicy policy;
  // Empty keeps everything in memory.
  std::string data_dir;
  std::chrono::milliseconds step_deadline{60'000};
  std::chrono::milliseconds default_timeout{kDefaultJobTimeoutMs};
  std::chrono::milliseconds init_timeout{30'000};
  std::chrono::milliseconds qpu_delay{0};
  bool eager_validation = true;
  std::size_t max_active_jobs = 4;
  // When non-empty, hybrid executables must live under one of these.
  std::vector<std::string> program_dirs;
  bool sandbox = true;
  std::string admin_secret;
  std::string log_level = "info";
  int http_threads = 16;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// key = value lines; '#' and ';' start comments; [sections] are ignored.
ServiceConfig parse_service_config(std::string_view text);
ServiceConfig load_service_config(const std::filesystem::path& path);

struct ApiToken {
  std::string cluster;
  std::string user;
  std::string salt;  // hex
  std::string hash;  // hex, keyed BLAKE2b of the secret
  TimestampMs created_at = 0;
  bool revoked = false;

  bool operator==(const ApiToken&) const = default;
};

void to_json(Json& j, const ApiToken& t);
void from_json(const Json& j, ApiToken& t);

class TokenConflict : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Secrets never leave create(); only salted hashes are kept.
class TokenStore {
 public:
  TokenStore();

  /// Returns the secret and the stored token. Throws TokenConflict when the
  /// cluster already has an active token.
  std::pair<std::string, ApiToken> create(const std::string& cluster, const std::string& user,
                                          TimestampMs now);
  std::optional<ApiToken> authenticate(std::string_view secret) const;
  /// Revokes the cluster's active token; nullopt if there is none.
  std::optional<ApiToken> revoke(const std::string& cluster);
  void restore(const ApiToken& token);
  std::vector<ApiToken> tokens() const;

 private:
  mutable std::mutex mu_;
  std::vector<ApiToken> tokens_;
};

/// Newline-delimited JSON write-ahead log. Each record carries a "key";
/// compaction keeps the latest record per key.
class Journal {
 public:
  /// Empty path: records are dropped.
  explicit Journal(std::filesystem::path path);

  /// Reads the file, rewrites it compacted and returns the surviving records
  /// in first-seen key order. Unparseable lines are skipped.
  std::vector<Json> load_and_compact();
  void append(const Json& record);
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
  std::mutex mu_;
};

/// Append-only accounting file with at most one record per job.
class AccountingLedger {
 public:
  explicit AccountingLedger(std::filesystem::path path);

  /// False, and nothing written, when the job already has a record.
  bool append(const AccountingRecord& record);
  bool contains(const std::string& job_id) const;
  std::vector<AccountingRecord> records() const;

 private:
  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::vector<AccountingRecord> records_;
  std::set<std::string> ids_;
};

AccountingRecord make_accounting_record(const Job& job, const JobOutcome& outcome);

/// Extracts the `#QI payload=` directive value from a batch script.
std::optional<std::string> find_qi_directive(std::string_view script);

class ServiceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Service {
 public:
  explicit Service(ServiceConfig config);
  ~Service();

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds both ports, restores persisted state and starts serving.
  /// Throws ServiceError when a port cannot be bound.
  void start();
  void stop();

  std::uint16_t port() const noexcept { return port_; }
  std::uint16_t quantum_port() const noexcept;
  const ServiceConfig& config() const noexcept { return config_; }

  /// Same as the admin token route; returns the secret.
  std::string issue_token(const std::string& cluster, const std::string& user);

  BackendStatus effective_status() const;
  /// True once nothing is queued or running, false on timeout.
  bool wait_idle(std::chrono::milliseconds timeout) const;

  JobManager& manager() noexcept { return manager_; }
  Dispatcher& dispatcher() noexcept { return *dispatcher_; }
  AccountingLedger& ledger() noexcept { return *ledger_; }
  std::optional<JobOutcome> outcome(const std::string& job_id) const;

 private:
  struct Worker {
    std::thread thread;
    std::shared_ptr<std::atomic<bool>> done;
  };

  void install_routes();
  void restore_state();
  void dispatch_loop(std::stop_token stop);
  void run_job(Job job);
  void reap_workers(bool all);
  void wake();
  void finish_job(const Job& job, const JobOutcome& outcome);
  void journal_job(const Job& job);
  std::filesystem::path script_dir() const;

  ServiceConfig config_;
  std::uint16_t port_ = 0;
  JobManager manager_;
  std::unique_ptr<Dispatcher> dispatcher_;
  std::unique_ptr<emulator::QuantumRuntimeServer> quantum_;
  std::unique_ptr<httplib::Server> http_;
  std::unique_ptr<Journal> journal_;
  std::unique_ptr<AccountingLedger> ledger_;
  TokenStore tokens_;
  std::filesystem::path scratch_;  // script dir when running in memory

  mutable std::mutex outcomes_mu_;
  std::map<std::string, JobOutcome> outcomes_;

  std::mutex workers_mu_;
  std::list<Worker> workers_;
  std::atomic<std::size_t> active_{0};

  std::mutex wake_mu_;
  std::condition_variable_any wake_;
  bool wake_pending_ = false;
  std::jthread loop_;
  std::thread http_thread_;
  bool started_ = false;
};

}  // namespace qhyb
