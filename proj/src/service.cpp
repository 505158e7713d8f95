#include "qhyb/service.hpp"

#include <sodium.h>
#include <spdlog/spdlog.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>

#include <httplib.h>

#include "qhyb/cqasm.hpp"
#include "qhyb/emulator.hpp"

namespace qhyb {

namespace fs = std::filesystem;
using namespace std::chrono_literals;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string unquote(std::string v) {
  if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'') && v.back() == v.front())
    return v.substr(1, v.size() - 2);
  return v;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

long long parse_int(const std::string& key, const std::string& v, long long lo, long long hi) {
  std::size_t used = 0;
  long long n = 0;
  try {
    n = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  if (n < lo || n > hi)
    throw ConfigError(key + ": " + v + " is outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  return n;
}

std::vector<std::string> split(const std::string& v, char sep) {
  std::vector<std::string> out;
  std::stringstream in(v);
  std::string part;
  while (std::getline(in, part, sep)) {
    part = trim(part);
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

std::string to_hex(const unsigned char* data, std::size_t n) {
  std::string out(n * 2 + 1, '\0');
  sodium_bin2hex(out.data(), out.size(), data, n);
  out.pop_back();
  return out;
}

std::vector<unsigned char> from_hex(const std::string& hex) {
  std::vector<unsigned char> out(hex.size() / 2);
  std::size_t len = 0;
  if (sodium_hex2bin(out.data(), out.size(), hex.data(), hex.size(), nullptr, &len, nullptr) != 0) return {};
  out.resize(len);
  return out;
}

constexpr std::size_t kSecretBytes = 32;
constexpr std::size_t kSaltBytes = 16;
constexpr std::size_t kHashBytes = 32;

std::vector<unsigned char> keyed_hash(std::string_view secret, const std::vector<unsigned char>& salt) {
  std::vector<unsigned char> out(kHashBytes);
  crypto_generichash(out.data(), out.size(), reinterpret_cast<const unsigned char*>(secret.data()),
                     secret.size(), salt.data(), salt.size());
  return out;
}

bool same_secret(std::string_view a, std::string_view b) {
  return a.size() == b.size() && sodium_memcmp(a.data(), b.data(), a.size()) == 0;
}

Json outcome_json(const JobOutcome& o) {
  Json j{{"final_state", to_string(o.final_state)},
         {"iterations_completed", o.iterations_completed},
         {"quantum_busy_us", o.quantum_busy_us},
         {"pool_hit", o.pool_hit}};
  if (o.result) j["result"] = *o.result;
  if (o.error) j["error"] = *o.error;
  return j;
}

JobOutcome outcome_from_json(const Json& j) {
  JobOutcome o;
  o.final_state = parse_job_state(j.at("final_state").get<std::string>());
  o.iterations_completed = j.value("iterations_completed", std::int64_t{0});
  o.quantum_busy_us = j.value("quantum_busy_us", Micros{0});
  o.pool_hit = j.value("pool_hit", false);
  if (j.contains("result")) o.result = j.at("result").get<JobResult>();
  if (j.contains("error")) o.error = j.at("error").get<JobError>();
  return o;
}

struct HttpError : std::runtime_error {
  HttpError(int status, const std::string& what) : std::runtime_error(what), status(status) {}
  int status;
};

struct Principal {
  Origin origin;
  bool admin = false;
};

const Origin kAdminOrigin{"admin", "admin"};

void reply(httplib::Response& res, int status, const Json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void reply_error(httplib::Response& res, int status, const std::string& message) {
  reply(res, status, Json{{"error", message}});
}

Json parse_body(const httplib::Request& req) {
  Json body = Json::parse(req.body, nullptr, false);
  if (body.is_discarded()) throw HttpError(400, "request body is not valid JSON");
  if (!body.is_object()) throw HttpError(400, "request body must be a JSON object");
  return body;
}

template <typename T>
T field(const Json& body, const char* key, T fallback) {
  const auto it = body.find(key);
  if (it == body.end() || it->is_null()) return fallback;
  try {
    return it->get<T>();
  } catch (const Json::exception&) {
    throw HttpError(400, std::string("field '") + key + "' has the wrong type");
  }
}

/// Native job body -> Queued job. Shape problems are 400s.
Job job_from_body(const Json& body, const ServiceConfig& config) {
  const auto p = body.find("payload");
  if (p == body.end() || !p->is_object()) throw HttpError(400, "missing 'payload' object");
  Job job;
  try {
    job.payload = p->get<JobPayload>();
  } catch (const std::exception& e) {
    throw HttpError(400, std::string("bad payload: ") + e.what());
  }
  job.id = make_uuid();
  job.kind = kind_of(job.payload);
  job.shots = field<std::int64_t>(body, "shots", 1024);
  job.priority = field<std::int64_t>(body, "priority", 0);
  job.timeout_ms = field<std::int64_t>(body, "timeout", config.default_timeout.count());
  if (const auto r = field<std::string>(body, "reservation_id", ""); !r.empty()) job.reservation_id = r;
  if (body.contains("seed") && !body["seed"].is_null()) {
    if (!body["seed"].is_number_unsigned()) throw HttpError(400, "seed must be a non-negative integer");
    job.seed = body["seed"].get<std::uint64_t>();
  }
  job.backend = config.backend;
  job.state = JobState::Queued;
  job.submitted_at = now_ms();

  if (job.shots < 1 || job.shots > 100'000'000) throw HttpError(400, "shots must be in [1, 1e8]");
  if (job.timeout_ms <= 0) throw HttpError(400, "timeout must be positive");
  if (const auto* h = std::get_if<HybridProgram>(&job.payload)) {
    if (h->executable_path.empty()) throw HttpError(400, "executable_path is empty");
    if (h->max_iterations < 1) throw HttpError(400, "max_iterations must be at least 1");
  }
  return job;
}

bool under(const fs::path& path, const fs::path& dir) {
  std::error_code ec;
  const auto p = fs::weakly_canonical(path, ec);
  const auto d = fs::weakly_canonical(dir, ec);
  const auto rel = p.lexically_relative(d);
  return !rel.empty() && *rel.begin() != "..";
}

void check_program(const HybridProgram& h, const ServiceConfig& config) {
  if (!config.program_dirs.empty() &&
      std::none_of(config.program_dirs.begin(), config.program_dirs.end(),
                   [&](const std::string& d) { return under(h.executable_path, d); }))
    throw HttpError(422, "executable is outside the allowed program directories");
  if (config.eager_validation && ::access(h.executable_path.c_str(), X_OK) != 0)
    throw HttpError(422, "executable not found or not executable: " + h.executable_path);
}

/// Semantic checks; failures are 422s.
void check_job(const Job& job, const ServiceConfig& config) {
  if (const auto* c = std::get_if<CircuitText>(&job.payload)) {
    if (!config.eager_validation) return;
    try {
      cqasm::parse(c->text);
    } catch (const cqasm::ParseError& e) {
      throw HttpError(422, std::string("invalid circuit: ") + e.what());
    }
    return;
  }
  check_program(std::get<HybridProgram>(job.payload), config);
}

void validate_slurm_payload(const Json& body) {
  const auto script = body.find("script");
  if (script == body.end() || !script->is_string()) throw HttpError(400, "missing 'script' string");
  const auto job = body.find("job");
  if (job == body.end() || !job->is_object()) throw HttpError(400, "missing 'job' object");
  for (const char* key : {"partition", "name", "current_working_directory"})
    if (job->contains(key) && !job->at(key).is_string()) throw HttpError(400, std::string("job.") + key + " must be a string");
  for (const char* key : {"tasks", "nodes"})
    if (job->contains(key) && !job->at(key).is_number_integer())
      throw HttpError(400, std::string("job.") + key + " must be an integer");
  const auto env = job->find("environment");
  if (env == job->end() || !env->is_object() || env->empty())
    throw HttpError(400, "job.environment must be a non-empty object");
  for (const auto& [k, v] : env->items())
    if (!v.is_string()) throw HttpError(400, "job.environment." + k + " must be a string");
}

std::optional<std::string> bearer(const httplib::Request& req) {
  const auto h = req.get_header_value("Authorization");
  constexpr std::string_view prefix = "Bearer ";
  if (h.size() <= prefix.size() || h.compare(0, prefix.size(), prefix) != 0) return std::nullopt;
  return trim(std::string_view(h).substr(prefix.size()));
}

}  // namespace

// ---------------------------------------------------------------------------
// config

ServiceConfig parse_service_config(std::string_view text) {
  ServiceConfig c;
  std::stringstream in{std::string(text)};
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#' || stripped[0] == ';' || stripped[0] == '[') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(n) + ": expected key = value");
    const auto key = trim(std::string_view(stripped).substr(0, eq));
    const auto value = unquote(trim(std::string_view(stripped).substr(eq + 1)));
    const auto ms = [&](long long lo) { return std::chrono::milliseconds(parse_int(key, value, lo, 86'400'000)); };

    if (key == "host") c.host = value;
    else if (key == "port") c.port = static_cast<std::uint16_t>(parse_int(key, value, 0, 65535));
    else if (key == "quantum_port") c.quantum_port = static_cast<std::uint16_t>(parse_int(key, value, 0, 65535));
    else if (key == "backend") c.backend = value;
    else if (key == "hot_pool_size") c.hot_pool_size = static_cast<std::size_t>(parse_int(key, value, 0, 256));
    else if (key == "hot_pool_program") c.hot_pool_program = value;
    else if (key == "hot_pool_args") c.hot_pool_args = split(value, ' ');
    else if (key == "policy") {
      try {
        c.policy.mode = parse_scheduling_mode(value);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("policy: ") + e.what());
      }
    } else if (key == "fair_use_cap") {
      if (value.empty() || value == "none" || value == "off") {
        c.policy.fair_use_cap.reset();
      } else {
        double cap = 0;
        try {
          cap = std::stod(value);
        } catch (const std::exception&) {
          throw ConfigError("fair_use_cap: expected a number, got '" + value + "'");
        }
        if (!(cap > 0 && cap <= 1)) throw ConfigError("fair_use_cap must be in (0, 1]");
        c.policy.fair_use_cap = cap;
      }
    } else if (key == "fair_use_window") c.policy.fair_use_window = static_cast<int>(parse_int(key, value, 1, 100'000));
    else if (key == "reservations_enabled") c.policy.reservations_enabled = parse_bool(key, value);
    else if (key == "data_dir") c.data_dir = value;
    else if (key == "step_deadline_ms") c.step_deadline = ms(1);
    else if (key == "default_timeout_ms") c.default_timeout = ms(1);
    else if (key == "init_timeout_ms") c.init_timeout = ms(1);
    else if (key == "qpu_delay_ms") c.qpu_delay = ms(0);
    else if (key == "eager_validation") c.eager_validation = parse_bool(key, value);
    else if (key == "max_active_jobs") c.max_active_jobs = static_cast<std::size_t>(parse_int(key, value, 1, 1024));
    else if (key == "program_dirs") c.program_dirs = split(value, ',');
    else if (key == "sandbox") c.sandbox = parse_bool(key, value);
    else if (key == "admin_secret") c.admin_secret = value;
    else if (key == "log_level") c.log_level = value;
    else if (key == "http_threads") c.http_threads = static_cast<int>(parse_int(key, value, 1, 1024));
    else throw ConfigError("line " + std::to_string(n) + ": unknown key '" + key + "'");
  }
  return c;
}

ServiceConfig load_service_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_service_config(buf.str());
}

// ---------------------------------------------------------------------------
// tokens

void to_json(Json& j, const ApiToken& t) {
  j = Json{{"cluster", t.cluster}, {"user", t.user},           {"salt", t.salt},
           {"hash", t.hash},       {"created_at", t.created_at}, {"revoked", t.revoked}};
}

void from_json(const Json& j, ApiToken& t) {
  j.at("cluster").get_to(t.cluster);
  j.at("user").get_to(t.user);
  j.at("salt").get_to(t.salt);
  j.at("hash").get_to(t.hash);
  j.at("created_at").get_to(t.created_at);
  t.revoked = j.value("revoked", false);
}

TokenStore::TokenStore() {
  if (sodium_init() < 0) throw std::runtime_error("libsodium initialisation failed");
}

std::pair<std::string, ApiToken> TokenStore::create(const std::string& cluster, const std::string& user,
                                                    TimestampMs now) {
  std::lock_guard lock(mu_);
  for (const auto& t : tokens_)
    if (!t.revoked && t.cluster == cluster) throw TokenConflict("cluster " + cluster + " already has an active token");

  unsigned char raw[kSecretBytes];
  randombytes_buf(raw, sizeof raw);
  const auto variant = sodium_base64_VARIANT_URLSAFE_NO_PADDING;
  std::string secret(sodium_base64_ENCODED_LEN(sizeof raw, variant), '\0');
  sodium_bin2base64(secret.data(), secret.size(), raw, sizeof raw, variant);
  secret.resize(std::strlen(secret.c_str()));
  sodium_memzero(raw, sizeof raw);

  std::vector<unsigned char> salt(kSaltBytes);
  randombytes_buf(salt.data(), salt.size());
  const auto hash = keyed_hash(secret, salt);

  ApiToken t{cluster, user, to_hex(salt.data(), salt.size()), to_hex(hash.data(), hash.size()), now, false};
  tokens_.push_back(t);
  return {secret, t};
}

std::optional<ApiToken> TokenStore::authenticate(std::string_view secret) const {
  if (secret.empty()) return std::nullopt;
  std::lock_guard lock(mu_);
  for (const auto& t : tokens_) {
    if (t.revoked) continue;
    const auto expected = from_hex(t.hash);
    const auto got = keyed_hash(secret, from_hex(t.salt));
    if (expected.size() == got.size() && sodium_memcmp(expected.data(), got.data(), got.size()) == 0) return t;
  }
  return std::nullopt;
}

std::optional<ApiToken> TokenStore::revoke(const std::string& cluster) {
  std::lock_guard lock(mu_);
  for (auto& t : tokens_) {
    if (!t.revoked && t.cluster == cluster) {
      t.revoked = true;
      return t;
    }
  }
  return std::nullopt;
}

void TokenStore::restore(const ApiToken& token) {
  std::lock_guard lock(mu_);
  for (auto& t : tokens_) {
    if (t.salt == token.salt) {
      t = token;
      return;
    }
  }
  tokens_.push_back(token);
}

std::vector<ApiToken> TokenStore::tokens() const {
  std::lock_guard lock(mu_);
  return tokens_;
}

// ---------------------------------------------------------------------------
// journal and ledger

Journal::Journal(fs::path path) : path_(std::move(path)) {}

std::vector<Json> Journal::load_and_compact() {
  if (path_.empty()) return {};
  std::lock_guard lock(mu_);
  std::vector<Json> records;
  std::map<std::string, std::size_t> index;
  {
    std::ifstream in(path_);
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      Json r = Json::parse(line, nullptr, false);
      if (r.is_discarded() || !r.is_object() || !r.contains("key") || !r["key"].is_string()) {
        spdlog::warn("journal: skipping unreadable record");
        continue;
      }
      const auto key = r["key"].get<std::string>();
      if (const auto it = index.find(key); it != index.end()) {
        records[it->second] = std::move(r);
      } else {
        index.emplace(key, records.size());
        records.push_back(std::move(r));
      }
    }
  }
  const fs::path tmp = path_.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    for (const auto& r : records) out << r.dump() << '\n';
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
  }
  fs::rename(tmp, path_);
  return records;
}

void Journal::append(const Json& record) {
  if (path_.empty()) return;
  std::lock_guard lock(mu_);
  std::ofstream out(path_, std::ios::app);
  out << record.dump() << '\n';
  out.flush();
  if (!out) spdlog::error("journal: append to {} failed", path_.string());
}

AccountingLedger::AccountingLedger(fs::path path) : path_(std::move(path)) {
  if (path_.empty()) return;
  std::ifstream in(path_);
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    try {
      auto r = Json::parse(line).get<AccountingRecord>();
      if (ids_.insert(r.job_id).second) records_.push_back(std::move(r));
    } catch (const std::exception& e) {
      spdlog::warn("accounting: skipping unreadable record: {}", e.what());
    }
  }
}

bool AccountingLedger::append(const AccountingRecord& record) {
  std::lock_guard lock(mu_);
  if (!ids_.insert(record.job_id).second) return false;
  records_.push_back(record);
  if (!path_.empty()) {
    std::ofstream out(path_, std::ios::app);
    out << Json(record).dump() << '\n';
    out.flush();
    if (!out) spdlog::error("accounting: append to {} failed", path_.string());
  }
  return true;
}

bool AccountingLedger::contains(const std::string& job_id) const {
  std::lock_guard lock(mu_);
  return ids_.count(job_id) > 0;
}

std::vector<AccountingRecord> AccountingLedger::records() const {
  std::lock_guard lock(mu_);
  return records_;
}

AccountingRecord make_accounting_record(const Job& job, const JobOutcome& outcome) {
  AccountingRecord r;
  r.job_id = job.id;
  r.origin = job.origin;
  r.backend = job.backend;
  r.submitted_at = job.submitted_at;
  r.started_at = job.started_at;
  r.finished_at = job.finished_at;
  r.final_state = job.state;
  r.quantum_busy_ms = (outcome.quantum_busy_us + 500) / 1000;
  r.iterations = outcome.iterations_completed;
  return r;
}

std::optional<std::string> find_qi_directive(std::string_view script) {
  std::stringstream in{std::string(script)};
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.rfind("#QI", 0) != 0) continue;
    const auto rest = trim(std::string_view(t).substr(3));
    constexpr std::string_view key = "payload=";
    if (rest.rfind(key, 0) == 0) return trim(std::string_view(rest).substr(key.size()));
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// service

Service::Service(ServiceConfig config)
    : config_(std::move(config)),
      manager_(config_.backend, config_.policy),
      journal_(std::make_unique<Journal>(config_.data_dir.empty() ? fs::path{}
                                                                  : fs::path(config_.data_dir) / "journal.jsonl")),
      ledger_(std::make_unique<AccountingLedger>(
          config_.data_dir.empty() ? fs::path{} : fs::path(config_.data_dir) / "accounting.jsonl")) {}

Service::~Service() { stop(); }

std::uint16_t Service::quantum_port() const noexcept { return quantum_ ? quantum_->port() : 0; }

fs::path Service::script_dir() const {
  return (config_.data_dir.empty() ? scratch_ : fs::path(config_.data_dir)) / "slurm-scripts";
}

void Service::start() {
  if (started_) return;
  spdlog::set_level(spdlog::level::from_str(config_.log_level));

  if (!config_.data_dir.empty()) {
    fs::create_directories(config_.data_dir);
  } else {
    std::string tmpl = (fs::temp_directory_path() / "qhyb-service-XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw ServiceError("cannot create scratch directory");
    scratch_ = tmpl;
  }
  fs::create_directories(script_dir());

  try {
    quantum_ = std::make_unique<emulator::QuantumRuntimeServer>(config_.host, config_.quantum_port,
                                                                 emulator::RuntimeOptions{config_.qpu_delay});
  } catch (const std::exception& e) {
    throw ServiceError("cannot bind quantum runtime port " + std::to_string(config_.quantum_port) + ": " + e.what());
  }

  DispatchConfig dc;
  dc.step_deadline = config_.step_deadline;
  dc.job_timeout_default = config_.default_timeout;
  dc.hot_pool_size = config_.hot_pool_size;
  dc.quantum_endpoint = {config_.host == "0.0.0.0" || config_.host.empty() ? "127.0.0.1" : config_.host,
                         quantum_->port()};
  dc.spawn.init_timeout = config_.init_timeout;
  dc.spawn.sandbox = config_.sandbox;
  if (!config_.data_dir.empty()) dc.spawn.work_root = fs::path(config_.data_dir) / "runtimes";
  dc.replenish_pool = true;
  dispatcher_ = std::make_unique<Dispatcher>(dc);

  http_ = std::make_unique<httplib::Server>();
  const int threads = config_.http_threads;
  http_->new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
  http_->set_payload_max_length(8 << 20);
  // httplib's default adds SO_REUSEPORT, which lets a second server share the port.
  http_->set_socket_options([](int sock) {
    int yes = 1;
    ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
  });
  install_routes();
  if (config_.port == 0) {
    const int p = http_->bind_to_any_port(config_.host);
    if (p <= 0) throw ServiceError("cannot bind HTTP port on " + config_.host);
    port_ = static_cast<std::uint16_t>(p);
  } else {
    if (!http_->bind_to_port(config_.host, config_.port))
      throw ServiceError("cannot bind HTTP port " + config_.host + ":" + std::to_string(config_.port) +
                         " (address in use?)");
    port_ = config_.port;
  }

  restore_state();

  started_ = true;
  http_thread_ = std::thread([this] { http_->listen_after_bind(); });
  loop_ = std::jthread([this](std::stop_token st) { dispatch_loop(st); });

  if (config_.hot_pool_size > 0 && !config_.hot_pool_program.empty()) {
    HybridProgram program{config_.hot_pool_program, config_.hot_pool_args, 100, {}};
    const int n = dispatcher_->prewarm(program, static_cast<int>(config_.hot_pool_size));
    spdlog::info("prewarmed {} handle(s) for {}", n, config_.hot_pool_program);
  }
  spdlog::info("ready: http {}:{} quantum {}:{} backend {} policy {}", config_.host, port_, config_.host,
               quantum_->port(), config_.backend, to_string(config_.policy.mode));
}

void Service::stop() {
  if (!started_) {
    if (quantum_) quantum_->stop();
    return;
  }
  started_ = false;
  http_->stop();
  if (http_thread_.joinable()) http_thread_.join();
  loop_.request_stop();
  if (loop_.joinable()) loop_.join();
  for (const auto& job : manager_.jobs()) {
    if (job.state == JobState::Queued || is_terminal(job.state)) continue;
    try {
      manager_.cancel(job.id);
    } catch (const JobManagerError&) {
    }
  }
  reap_workers(true);
  dispatcher_->pool().clear();
  quantum_->stop();
  if (!scratch_.empty()) {
    std::error_code ec;
    fs::remove_all(scratch_, ec);
  }
  spdlog::info("service stopped");
}

BackendStatus Service::effective_status() const {
  const auto admin = manager_.backend_status();
  if (admin != BackendStatus::Idle) return admin;
  return dispatcher_ && dispatcher_->gate().busy() ? BackendStatus::Executing : BackendStatus::Idle;
}

bool Service::wait_idle(std::chrono::milliseconds timeout) const {
  const auto until = std::chrono::steady_clock::now() + timeout;
  while (std::chrono::steady_clock::now() < until) {
    if (manager_.queued() == 0 && active_.load() == 0) return true;
    std::this_thread::sleep_for(10ms);
  }
  return false;
}

std::optional<JobOutcome> Service::outcome(const std::string& job_id) const {
  std::lock_guard lock(outcomes_mu_);
  const auto it = outcomes_.find(job_id);
  if (it == outcomes_.end()) return std::nullopt;
  return it->second;
}

std::string Service::issue_token(const std::string& cluster, const std::string& user) {
  auto [secret, token] = tokens_.create(cluster, user, now_ms());
  journal_->append(Json{{"key", "token:" + token.salt}, {"type", "token"}, {"token", token}});
  spdlog::info("token issued for cluster {} user {}", cluster, user);
  return secret;
}

void Service::journal_job(const Job& job) {
  journal_->append(Json{{"key", "job:" + job.id}, {"type", "job"}, {"job", job}});
}

void Service::finish_job(const Job& job, const JobOutcome& outcome) {
  {
    std::lock_guard lock(outcomes_mu_);
    outcomes_[job.id] = outcome;
  }
  manager_.update(job);
  journal_->append(Json{{"key", "job:" + job.id}, {"type", "job"}, {"job", job}, {"outcome", outcome_json(outcome)}});
  ledger_->append(make_accounting_record(job, outcome));
  if (outcome.error)
    spdlog::info("job {} {}: {} {}", job.id, to_string(job.state), outcome.error->code, outcome.error->message);
  else
    spdlog::info("job {} {}", job.id, to_string(job.state));
}

void Service::restore_state() {
  const auto now = now_ms();
  for (const auto& rec : journal_->load_and_compact()) {
    try {
      const auto type = rec.at("type").get<std::string>();
      if (type == "token") {
        tokens_.restore(rec.at("token").get<ApiToken>());
      } else if (type == "reservation") {
        manager_.add_reservation(rec.at("reservation").get<Reservation>());
      } else if (type == "job") {
        Job job = rec.at("job").get<Job>();
        if (job.state == JobState::Queued) {
          manager_.restore(job);
        } else if (is_terminal(job.state)) {
          JobOutcome o;
          o.final_state = job.state;
          if (rec.contains("outcome")) o = outcome_from_json(rec.at("outcome"));
          manager_.restore(job);
          {
            std::lock_guard lock(outcomes_mu_);
            outcomes_[job.id] = o;
          }
          ledger_->append(make_accounting_record(job, o));
        } else {
          // Whatever was running died with the previous process.
          job = advance_state(std::move(job), LifecycleEvent::Fail, now);
          JobOutcome o;
          o.final_state = job.state;
          o.error = JobError{"internal", "service restarted while the job was running", ""};
          manager_.restore(job);
          finish_job(job, o);
        }
      }
    } catch (const std::exception& e) {
      spdlog::warn("journal: cannot restore record: {}", e.what());
    }
  }
}

void Service::dispatch_loop(std::stop_token stop) {
  while (!stop.stop_requested()) {
    reap_workers(false);
    std::optional<Job> job;
    if (active_.load() < config_.max_active_jobs) job = manager_.next_dispatch(now_ms(), manager_.backend_status());
    if (!job) {
      std::unique_lock lock(wake_mu_);
      wake_.wait_for(lock, stop, 50ms, [this] { return wake_pending_; });
      wake_pending_ = false;
      continue;
    }
    journal_job(*job);
    ++active_;
    auto done = std::make_shared<std::atomic<bool>>(false);
    std::lock_guard lock(workers_mu_);
    workers_.push_back({std::thread([this, j = std::move(*job), done]() mutable {
                          run_job(std::move(j));
                          done->store(true);
                          wake();
                        }),
                        done});
  }
}

void Service::wake() {
  {
    std::lock_guard lock(wake_mu_);
    wake_pending_ = true;
  }
  wake_.notify_all();
}

void Service::run_job(Job job) {
  JobOutcome outcome;
  try {
    outcome = dispatcher_->run(job, manager_.stop_token(job.id), [this](const Job& j) {
      // Terminal states are published by finish_job once the outcome is stored.
      if (!is_terminal(j.state)) manager_.update(j);
    });
  } catch (const std::exception& e) {
    spdlog::error("job {}: dispatcher failure: {}", job.id, e.what());
    if (!is_terminal(job.state)) job = advance_state(std::move(job), LifecycleEvent::Fail);
    outcome.final_state = job.state;
    outcome.error = JobError{"internal", e.what(), ""};
  }
  finish_job(job, outcome);
  --active_;
}

void Service::reap_workers(bool all) {
  std::lock_guard lock(workers_mu_);
  for (auto it = workers_.begin(); it != workers_.end();) {
    if (all || it->done->load()) {
      if (it->thread.joinable()) it->thread.join();
      it = workers_.erase(it);
    } else {
      ++it;
    }
  }
}

void Service::install_routes() {
  auto& s = *http_;

  const auto authenticate = [this](const httplib::Request& req) -> std::optional<Principal> {
    if (const auto b = bearer(req)) {
      if (!config_.admin_secret.empty() && same_secret(*b, config_.admin_secret)) return Principal{kAdminOrigin, true};
      if (const auto t = tokens_.authenticate(*b)) return Principal{{t->cluster, t->user}, false};
      return std::nullopt;
    }
    const auto secret = req.get_header_value("X-SLURM-USER-TOKEN");
    const auto name = req.get_header_value("X-SLURM-USER-NAME");
    if (secret.empty() || name.empty()) return std::nullopt;
    const auto t = tokens_.authenticate(secret);
    if (!t || t->user != name) return std::nullopt;
    return Principal{{t->cluster, name}, false};
  };

  // Wraps a handler: auth first, then HttpError / JSON errors to responses.
  using Handler = std::function<void(const httplib::Request&, httplib::Response&, const Principal&)>;
  const auto route = [authenticate](bool admin_only, Handler h) {
    return [authenticate, admin_only, h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
      const auto who = authenticate(req);
      if (!who) return reply_error(res, 401, "missing or invalid credentials");
      if (admin_only && !who->admin) return reply_error(res, 403, "admin credential required");
      try {
        h(req, res, *who);
      } catch (const HttpError& e) {
        reply_error(res, e.status, e.what());
      } catch (const Json::exception& e) {
        reply_error(res, 400, std::string("malformed request: ") + e.what());
      }
    };
  };

  const auto owned_job = [this](const httplib::Request& req, const Principal& who) {
    const auto id = req.matches[1].str();
    auto job = manager_.get(id);
    if (!job) throw HttpError(404, "unknown job " + id);
    if (!who.admin && job->origin != who.origin) throw HttpError(403, "job belongs to another origin");
    return *job;
  };

  const auto admit = [this](Job job) {
    const auto position = manager_.enqueue(job);
    journal_job(job);
    wake();
    spdlog::info("job {} queued from {}/{} at position {}", job.id, job.origin.cluster, job.origin.user, position);
    return position;
  };

  s.Get("/backends", route(false, [this](const httplib::Request&, httplib::Response& res, const Principal&) {
          reply(res, 200,
                Json::array({Json{{"backend", config_.backend},
                                  {"status", to_string(effective_status())},
                                  {"queue_length", manager_.queued()}}}));
        }));

  s.Post("/jobs", route(false, [this, admit](const httplib::Request& req, httplib::Response& res, const Principal& who) {
           Job job = job_from_body(parse_body(req), config_);
           job.origin = who.origin;
           check_job(job, config_);
           const auto position = admit(job);
           reply(res, 201, Json{{"job_id", job.id}, {"position", position}});
         }));

  s.Post("/slurm/v0.0.39/job/submit", [this, authenticate, admit](const httplib::Request& req, httplib::Response& res) {
    const auto fail = [&](int status, const std::string& msg) {
      reply(res, status, Json{{"job_id", nullptr}, {"errors", Json::array({Json{{"error", msg}}})}});
    };
    if (req.get_header_value("X-SLURM-USER-TOKEN").empty() || req.get_header_value("X-SLURM-USER-NAME").empty())
      return fail(401, "X-SLURM-USER-NAME and X-SLURM-USER-TOKEN are required");
    const auto who = authenticate(req);
    if (!who || who->admin) return fail(401, "invalid SLURM user token");
    try {
      const Json body = parse_body(req);
      validate_slurm_payload(body);
      const auto script = body["script"].get<std::string>();
      Job job;
      if (const auto directive = find_qi_directive(script)) {
        Json native;
        if (!directive->empty() && directive->front() == '{') {
          native = Json::parse(*directive, nullptr, false);
        } else {
          std::ifstream in(*directive);
          if (!in) throw HttpError(422, "cannot read payload file " + *directive);
          native = Json::parse(in, nullptr, false);
        }
        if (native.is_discarded() || !native.is_object()) throw HttpError(422, "#QI payload is not a JSON object");
        try {
          job = job_from_body(native, config_);
        } catch (const HttpError& e) {
          throw HttpError(422, std::string("#QI payload: ") + e.what());
        }
      } else {
        // No directive: the batch script itself becomes the hybrid program.
        const auto id = make_uuid();
        const auto path = script_dir() / (id + ".sh");
        {
          std::ofstream out(path);
          out << script;
          if (!script.empty() && script.back() != '\n') out << '\n';
          if (!out) throw HttpError(500, "cannot store batch script");
        }
        fs::permissions(path, fs::perms::owner_all | fs::perms::group_read | fs::perms::group_exec);
        HybridProgram program;
        program.executable_path = path.string();
        program.environment = body["job"]["environment"].get<std::map<std::string, std::string>>();
        Json native{{"payload", JobPayload(program)}};
        job = job_from_body(native, config_);
        job.id = id;
      }
      job.origin = who->origin;
      check_job(job, config_);
      admit(job);
      reply(res, 200, Json{{"job_id", job.id}, {"errors", Json::array()}});
    } catch (const HttpError& e) {
      fail(e.status, e.what());
    } catch (const std::exception& e) {
      fail(400, std::string("malformed payload: ") + e.what());
    }
  });

  s.Get(R"(/jobs/([^/]+))", route(false, [this, owned_job](const httplib::Request& req, httplib::Response& res,
                                                           const Principal& who) {
          const Job job = owned_job(req, who);
          Json out = job;
          out["position"] = nullptr;
          if (job.state == JobState::Queued) {
            try {
              if (const auto p = manager_.queue_position(job.id)) out["position"] = *p;
            } catch (const JobManagerError&) {
            }
          }
          if (const auto o = outcome(job.id)) {
            out["iterations_completed"] = o->iterations_completed;
            out["pool_hit"] = o->pool_hit;
            if (o->error) out["error"] = *o->error;
          }
          reply(res, 200, out);
        }));

  s.Get(R"(/jobs/([^/]+)/results)", route(false, [this, owned_job](const httplib::Request& req,
                                                                   httplib::Response& res, const Principal& who) {
          const Job job = owned_job(req, who);
          const auto o = outcome(job.id);
          if (job.state != JobState::Completed || !o || !o->result)
            throw HttpError(409, "job is " + std::string(to_string(job.state)) + ", results not available");
          reply(res, 200, *o->result);
        }));

  s.Delete(R"(/jobs/([^/]+))", route(false, [this, owned_job](const httplib::Request& req, httplib::Response& res,
                                                              const Principal& who) {
             const Job job = owned_job(req, who);
             try {
               if (manager_.cancel(job.id) == CancelOutcome::Cancelled) {
                 const Job cancelled = *manager_.get(job.id);
                 JobOutcome o;
                 o.final_state = cancelled.state;
                 finish_job(cancelled, o);
                 return reply(res, 200, Json{{"job_id", job.id}, {"state", to_string(cancelled.state)}});
               }
               const Job now = *manager_.get(job.id);
               reply(res, 202, Json{{"job_id", job.id}, {"state", to_string(now.state)}, {"signalled", true}});
             } catch (const JobManagerError& e) {
               if (e.kind() == JobManagerError::Kind::AlreadyTerminal) throw HttpError(409, e.what());
               throw HttpError(404, e.what());
             }
           }));

  s.Get("/queue", route(false, [this](const httplib::Request&, httplib::Response& res, const Principal&) {
          reply(res, 200, Json(manager_.snapshot(now_ms())));
        }));

  s.Get("/reservations", route(false, [this](const httplib::Request&, httplib::Response& res, const Principal&) {
          reply(res, 200, Json(manager_.reservations()));
        }));

  s.Post("/tokens", route(true, [this](const httplib::Request& req, httplib::Response& res, const Principal&) {
           const Json body = parse_body(req);
           const auto cluster = field<std::string>(body, "cluster", "");
           const auto user = field<std::string>(body, "user", "");
           if (cluster.empty() || user.empty()) throw HttpError(400, "cluster and user are required");
           try {
             auto [secret, token] = tokens_.create(cluster, user, now_ms());
             journal_->append(Json{{"key", "token:" + token.salt}, {"type", "token"}, {"token", token}});
             spdlog::info("token issued for cluster {} user {}", cluster, user);
             reply(res, 201, Json{{"cluster", cluster}, {"user", user}, {"secret", secret}, {"created_at", token.created_at}});
           } catch (const TokenConflict& e) {
             throw HttpError(409, e.what());
           }
         }));

  s.Delete(R"(/tokens/([^/]+))", route(true, [this](const httplib::Request& req, httplib::Response& res, const Principal&) {
             const auto cluster = req.matches[1].str();
             const auto t = tokens_.revoke(cluster);
             if (!t) throw HttpError(404, "no active token for cluster " + cluster);
             journal_->append(Json{{"key", "token:" + t->salt}, {"type", "token"}, {"token", *t}});
             reply(res, 200, Json{{"cluster", t->cluster}, {"user", t->user}, {"revoked", true}});
           }));

  s.Post(R"(/backends/([^/]+)/status)", route(true, [this](const httplib::Request& req, httplib::Response& res,
                                                           const Principal&) {
           const auto backend = req.matches[1].str();
           if (backend != config_.backend) throw HttpError(404, "unknown backend " + backend);
           const auto value = field<std::string>(parse_body(req), "status", "");
           BackendStatus status;
           try {
             status = parse_backend_status(value);
           } catch (const std::invalid_argument&) {
             throw HttpError(400, "unknown status '" + value + "'");
           }
           if (status == BackendStatus::Executing) throw HttpError(400, "executing is derived, not settable");
           manager_.set_backend_status(backend, status);
           wake();
           spdlog::info("backend {} set to {}", backend, to_string(status));
           reply(res, 200, Json{{"backend", backend}, {"status", to_string(effective_status())}});
         }));

  s.Post("/reservations", route(true, [this](const httplib::Request& req, httplib::Response& res, const Principal&) {
           const Json body = parse_body(req);
           Reservation r;
           r.holder = body.at("holder").get<Origin>();
           r.start = body.at("start").get<TimestampMs>();
           r.end = body.at("end").get<TimestampMs>();
           r.id = field<std::string>(body, "id", "");
           if (r.id.empty()) r.id = make_uuid();
           r.backend = config_.backend;
           try {
             manager_.add_reservation(r);
           } catch (const JobManagerError& e) {
             throw HttpError(e.kind() == JobManagerError::Kind::InvalidReservation ? 400 : 409, e.what());
           }
           journal_->append(Json{{"key", "reservation:" + r.id}, {"type", "reservation"}, {"reservation", r}});
           wake();
           reply(res, 201, r);
         }));

  s.Post("/pool/prewarm", route(true, [this](const httplib::Request& req, httplib::Response& res, const Principal&) {
           const Json body = parse_body(req);
           HybridProgram program;
           program.executable_path = field<std::string>(body, "executable_path", "");
           program.args = field<std::vector<std::string>>(body, "args", {});
           const auto count = field<int>(body, "count", 1);
           if (program.executable_path.empty()) throw HttpError(400, "executable_path is required");
           if (count < 0) throw HttpError(400, "count must be non-negative");
           check_program(program, config_);
           const int n = dispatcher_->prewarm(program, count);
           spdlog::info("prewarmed {} handle(s) for {}", n, program.executable_path);
           reply(res, 200, Json{{"spawned", n}, {"pool_size", dispatcher_->pool().size()}});
         }));

  s.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    reply_error(res, 500, what);
  });
}

}  // namespace qhyb
