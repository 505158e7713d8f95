// qhyb: runs the service stack and talks to it.
//
// Exit codes: 0 ok, 2 usage, 3 auth, 4 client error, 5 network/server.

#include <CLI11.hpp>
#include <httplib.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "qhyb/service.hpp"

using namespace qhyb;
using namespace std::chrono_literals;

namespace {

enum Exit { kOk = 0, kUsage = 2, kAuth = 3, kClient = 4, kNetwork = 5 };

struct CliError : std::runtime_error {
  CliError(int code, const std::string& what) : std::runtime_error(what), code(code) {}
  int code;
};

std::string env_or(const char* name, std::string fallback = {}) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

struct CliConfig {
  std::string server_url;
  std::string token;
  std::string user;
  std::string admin_secret;
  std::string format = "table";
  bool json() const { return format == "json"; }
};

int exit_for_status(int status) {
  if (status == 401 || status == 403) return kAuth;
  if (status >= 400 && status < 500) return kClient;
  return kNetwork;
}

std::string server_message(const httplib::Response& res) {
  const auto body = Json::parse(res.body, nullptr, false);
  if (body.is_object()) {
    if (body.contains("error") && body["error"].is_string()) return body["error"].get<std::string>();
    if (body.contains("errors") && body["errors"].is_array() && !body["errors"].empty())
      return body["errors"][0].value("error", res.body);
  }
  return res.body.empty() ? "HTTP " + std::to_string(res.status) : res.body;
}

class Api {
 public:
  explicit Api(const CliConfig& c) : client_(c.server_url) {
    if (!client_.is_valid()) throw CliError(kUsage, "invalid server URL '" + c.server_url + "'");
    client_.set_connection_timeout(5s);
    client_.set_read_timeout(60s);
  }

  Json call(const std::string& method, const std::string& path, const httplib::Headers& headers,
            const std::optional<std::string>& body = std::nullopt) {
    httplib::Result r = method == "GET"      ? client_.Get(path, headers)
                        : method == "DELETE" ? client_.Delete(path, headers)
                                             : client_.Post(path, headers, body.value_or(""), "application/json");
    if (!r) throw CliError(kNetwork, "cannot reach server: " + httplib::to_string(r.error()));
    if (r->status >= 300) throw CliError(exit_for_status(r->status), server_message(*r));
    auto out = Json::parse(r->body, nullptr, false);
    if (out.is_discarded()) throw CliError(kNetwork, "server sent a non-JSON reply");
    return out;
  }

 private:
  httplib::Client client_;
};

httplib::Headers bearer(const std::string& secret, const char* what) {
  if (secret.empty()) throw CliError(kAuth, std::string("no ") + what + " configured");
  return {{"Authorization", "Bearer " + secret}};
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CliError(kUsage, "cannot read " + path);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

void print_rows(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (width.size() <= i) width.push_back(0);
      width[i] = std::max(width[i], r[i].size());
    }
  for (const auto& r : rows) {
    for (std::size_t i = 0; i + 1 < r.size(); ++i) std::cout << std::left << std::setw(static_cast<int>(width[i]) + 2) << r[i];
    if (!r.empty()) std::cout << r.back();
    std::cout << '\n';
  }
}

std::string str(const Json& j) { return j.is_string() ? j.get<std::string>() : j.dump(); }

std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop = true; }

int serve(const std::string& config_path) {
  ServiceConfig config;
  try {
    if (!config_path.empty()) config = load_service_config(config_path);
  } catch (const ConfigError& e) {
    std::cerr << "error: bad config: " << e.what() << '\n';
    return kUsage;
  }
  config.admin_secret = env_or("QI_ADMIN_SECRET", config.admin_secret);
  spdlog::set_default_logger(spdlog::stderr_color_mt("qhyb"));
  if (config.admin_secret.empty()) spdlog::warn("no admin secret configured; admin routes are disabled");

  Service service(config);
  try {
    service.start();
  } catch (const ServiceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNetwork;
  }
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!g_stop) std::this_thread::sleep_for(100ms);
  service.stop();
  return kOk;
}

struct Stats {
  std::size_t n = 0;
  Micros median = 0, p95 = 0, min = 0, max = 0;
};

Stats summarize(std::vector<Micros> v) {
  Stats s;
  s.n = v.size();
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  const auto at = [&](double q) { return v[std::min(v.size() - 1, static_cast<std::size_t>(q * (v.size() - 1) + 0.5))]; };
  s.median = v.size() % 2 ? v[v.size() / 2] : (v[v.size() / 2 - 1] + v[v.size() / 2]) / 2;
  s.p95 = at(0.95);
  s.min = v.front();
  s.max = v.back();
  return s;
}

Json stats_json(const Stats& s) {
  return Json{{"n", s.n}, {"median_us", s.median}, {"p95_us", s.p95}, {"min_us", s.min}, {"max_us", s.max}};
}

Json wait_terminal(Api& api, const httplib::Headers& auth, const std::string& id, std::chrono::seconds limit) {
  const auto until = std::chrono::steady_clock::now() + limit;
  while (std::chrono::steady_clock::now() < until) {
    auto job = api.call("GET", "/jobs/" + id, auth);
    if (is_terminal(parse_job_state(job.at("state").get<std::string>()))) return job;
    std::this_thread::sleep_for(5ms);
  }
  throw CliError(kNetwork, "job " + id + " did not finish in time");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qhyb: hybrid quantum-classical job orchestration"};
  app.require_subcommand(1);
  app.fallthrough();
  CliConfig cfg;
  cfg.server_url = env_or("QI_URL", "http://127.0.0.1:6666");
  cfg.token = env_or("QI_TOKEN");
  cfg.user = env_or("QI_USER", env_or("USER"));
  cfg.admin_secret = env_or("QI_ADMIN_SECRET");
  app.add_option("--url", cfg.server_url, "Server URL (env QI_URL)");
  app.add_option("--token", cfg.token, "API token (env QI_TOKEN)");
  app.add_option("--user", cfg.user, "User name for federation submits (env QI_USER)");
  app.add_option("--format", cfg.format, "Output format")->check(CLI::IsMember({"json", "table"}));

  std::function<int()> action;

  auto* serve_cmd = app.add_subcommand("serve", "Run the service stack in this process");
  std::string config_path = env_or("QI_CONFIG");
  serve_cmd->add_option("--config", config_path, "Config file (env QI_CONFIG)");
  serve_cmd->callback([&] { action = [&] { return serve(config_path); }; });

  auto* slurm_cmd = app.add_subcommand("submit-slurm", "Submit a batch payload to the federation endpoint");
  std::string job_json;
  slurm_cmd->add_option("job_json", job_json, "Payload file")->required();
  slurm_cmd->callback([&] {
    action = [&] {
      const auto token = cfg.token.empty() ? env_or("SLURM_JWT") : cfg.token;
      if (token.empty()) throw CliError(kAuth, "no token configured");
      Api api(cfg);
      const auto r = api.call("POST", "/slurm/v0.0.39/job/submit",
                              {{"X-SLURM-USER-NAME", cfg.user}, {"X-SLURM-USER-TOKEN", token}}, read_file(job_json));
      if (cfg.json()) std::cout << r.dump() << '\n';
      else std::cout << str(r.at("job_id")) << '\n';
      return kOk;
    };
  });

  auto* submit_cmd = app.add_subcommand("submit", "Submit a circuit file or a hybrid program");
  std::string circuit_file, hybrid, reservation;
  std::vector<std::string> program_args, env_pairs;
  std::int64_t shots = 1024, priority = 0, timeout_ms = 0;
  int max_iterations = 100;
  std::optional<std::uint64_t> seed;
  submit_cmd->add_option("circuit_file", circuit_file, "cQASM circuit file");
  submit_cmd->add_option("--hybrid", hybrid, "Executable implementing the stdio contract");
  submit_cmd->add_option("--arg", program_args, "Argument for the hybrid program (repeatable)");
  submit_cmd->add_option("--env", env_pairs, "KEY=VALUE for the hybrid program (repeatable)");
  submit_cmd->add_option("--max-iterations", max_iterations)->check(CLI::PositiveNumber);
  submit_cmd->add_option("--shots", shots);
  submit_cmd->add_option("--priority", priority);
  submit_cmd->add_option("--seed", seed);
  submit_cmd->add_option("--timeout", timeout_ms, "Job timeout in ms");
  submit_cmd->add_option("--reservation", reservation);
  submit_cmd->callback([&] {
    action = [&] {
      if (circuit_file.empty() == hybrid.empty()) throw CliError(kUsage, "give either a circuit file or --hybrid");
      Json body{{"shots", shots}, {"priority", priority}};
      if (!hybrid.empty()) {
        HybridProgram p{hybrid, program_args, max_iterations, {}};
        for (const auto& kv : env_pairs) {
          const auto eq = kv.find('=');
          if (eq == std::string::npos) throw CliError(kUsage, "--env expects KEY=VALUE");
          p.environment[kv.substr(0, eq)] = kv.substr(eq + 1);
        }
        body["payload"] = JobPayload(p);
      } else {
        body["payload"] = JobPayload(CircuitText{read_file(circuit_file)});
      }
      if (seed) body["seed"] = *seed;
      if (timeout_ms > 0) body["timeout"] = timeout_ms;
      if (!reservation.empty()) body["reservation_id"] = reservation;
      Api api(cfg);
      const auto r = api.call("POST", "/jobs", bearer(cfg.token, "token"), body.dump());
      if (cfg.json()) std::cout << r.dump() << '\n';
      else std::cout << str(r.at("job_id")) << "  position " << r.at("position") << '\n';
      return kOk;
    };
  });

  std::string job_id;
  auto* status_cmd = app.add_subcommand("status", "Show a job");
  status_cmd->add_option("job_id", job_id)->required();
  status_cmd->callback([&] {
    action = [&] {
      Api api(cfg);
      const auto j = api.call("GET", "/jobs/" + job_id, bearer(cfg.token, "token"));
      if (cfg.json()) {
        std::cout << j.dump() << '\n';
        return kOk;
      }
      std::vector<std::vector<std::string>> rows = {
          {"id", str(j["id"])},           {"state", str(j["state"])},
          {"kind", str(j["kind"])},       {"origin", str(j["origin"]["cluster"]) + "/" + str(j["origin"]["user"])},
          {"position", str(j["position"])}, {"submitted_at", str(j["submitted_at"])},
          {"started_at", str(j["started_at"])}, {"finished_at", str(j["finished_at"])}};
      if (j.contains("error")) rows.push_back({"error", str(j["error"]["code"]) + ": " + str(j["error"]["message"])});
      print_rows(rows);
      return kOk;
    };
  });

  auto* results_cmd = app.add_subcommand("results", "Fetch the results of a completed job");
  results_cmd->add_option("job_id", job_id)->required();
  results_cmd->callback([&] {
    action = [&] {
      Api api(cfg);
      const auto j = api.call("GET", "/jobs/" + job_id + "/results", bearer(cfg.token, "token"));
      if (cfg.json()) {
        std::cout << j.dump() << '\n';
        return kOk;
      }
      const auto result = j.get<JobResult>();
      std::vector<std::vector<std::string>> rows = {{"iteration", "outcome", "count"}};
      for (std::size_t i = 0; i < result.histograms.size(); ++i)
        for (const auto& [k, v] : result.histograms[i].counts) rows.push_back({std::to_string(i), k, std::to_string(v)});
      print_rows(rows);
      if (result.final_payload) std::cout << "final_payload " << result.final_payload->dump() << '\n';
      return kOk;
    };
  });

  auto* queue_cmd = app.add_subcommand("queue", "Show the queue in dispatch order");
  queue_cmd->callback([&] {
    action = [&] {
      Api api(cfg);
      const auto j = api.call("GET", "/queue", bearer(cfg.token, "token"));
      if (cfg.json()) {
        std::cout << j.dump() << '\n';
        return kOk;
      }
      std::vector<std::vector<std::string>> rows = {{"position", "job_id", "origin", "priority", "submitted_at"}};
      for (const auto& e : j.get<QueueSnapshot>())
        rows.push_back({std::to_string(e.position), e.job_id, e.origin.cluster + "/" + e.origin.user,
                        std::to_string(e.priority), std::to_string(e.submitted_at)});
      print_rows(rows);
      return kOk;
    };
  });

  auto* cancel_cmd = app.add_subcommand("cancel", "Cancel a job");
  cancel_cmd->add_option("job_id", job_id)->required();
  cancel_cmd->callback([&] {
    action = [&] {
      Api api(cfg);
      const auto j = api.call("DELETE", "/jobs/" + job_id, bearer(cfg.token, "token"));
      if (cfg.json()) std::cout << j.dump() << '\n';
      else std::cout << str(j["job_id"]) << "  " << str(j["state"]) << (j.value("signalled", false) ? " (stop signalled)" : "") << '\n';
      return kOk;
    };
  });

  auto* token_cmd = app.add_subcommand("token", "Manage API tokens (admin)");
  token_cmd->require_subcommand(1);
  std::string cluster, user_name;
  auto* token_create = token_cmd->add_subcommand("create", "Issue a token for a cluster");
  token_create->add_option("--cluster", cluster)->required();
  token_create->add_option("--user", user_name, "User the token belongs to")->required();
  token_create->callback([&] {
    action = [&] {
      Api api(cfg);
      const auto j = api.call("POST", "/tokens", bearer(cfg.admin_secret, "admin secret (QI_ADMIN_SECRET)"),
                              Json{{"cluster", cluster}, {"user", user_name}}.dump());
      if (cfg.json()) std::cout << j.dump() << '\n';
      else std::cout << str(j["secret"]) << '\n';
      return kOk;
    };
  });
  auto* token_revoke = token_cmd->add_subcommand("revoke", "Revoke a cluster's token");
  token_revoke->add_option("--cluster", cluster)->required();
  token_revoke->callback([&] {
    action = [&] {
      Api api(cfg);
      const auto j = api.call("DELETE", "/tokens/" + cluster, bearer(cfg.admin_secret, "admin secret (QI_ADMIN_SECRET)"));
      if (cfg.json()) std::cout << j.dump() << '\n';
      else std::cout << "revoked token of " << str(j["cluster"]) << '\n';
      return kOk;
    };
  });

  auto* backend_cmd = app.add_subcommand("backend", "Backend status");
  backend_cmd->require_subcommand(1);
  auto* backend_list = backend_cmd->add_subcommand("list", "List backends");
  backend_list->callback([&] {
    action = [&] {
      Api api(cfg);
      const auto j = api.call("GET", "/backends", bearer(cfg.token.empty() ? cfg.admin_secret : cfg.token, "token"));
      if (cfg.json()) {
        std::cout << j.dump() << '\n';
        return kOk;
      }
      std::vector<std::vector<std::string>> rows = {{"backend", "status", "queue_length"}};
      for (const auto& b : j) rows.push_back({str(b["backend"]), str(b["status"]), str(b["queue_length"])});
      print_rows(rows);
      return kOk;
    };
  });
  std::string backend_name, backend_status;
  auto* backend_set = backend_cmd->add_subcommand("status", "Set a backend's status (admin)");
  backend_set->add_option("backend", backend_name)->required();
  backend_set->add_option("status", backend_status)->required()->check(CLI::IsMember({"idle", "calibrating", "offline"}));
  backend_set->callback([&] {
    action = [&] {
      Api api(cfg);
      const auto j = api.call("POST", "/backends/" + backend_name + "/status",
                              bearer(cfg.admin_secret, "admin secret (QI_ADMIN_SECRET)"),
                              Json{{"status", backend_status}}.dump());
      if (cfg.json()) std::cout << j.dump() << '\n';
      else std::cout << str(j["backend"]) << "  " << str(j["status"]) << '\n';
      return kOk;
    };
  });

  auto* reservation_cmd = app.add_subcommand("reservation", "Backend reservations");
  reservation_cmd->require_subcommand(1);
  TimestampMs start = 0, end = 0;
  std::string reservation_id;
  auto* reservation_add = reservation_cmd->add_subcommand("add", "Reserve the backend for one origin (admin)");
  reservation_add->add_option("--cluster", cluster)->required();
  reservation_add->add_option("--user", user_name)->required();
  reservation_add->add_option("--start", start, "Start, ms since epoch")->required();
  reservation_add->add_option("--end", end, "End (exclusive), ms since epoch")->required();
  reservation_add->add_option("--id", reservation_id);
  reservation_add->callback([&] {
    action = [&] {
      Json body{{"holder", Origin{cluster, user_name}}, {"start", start}, {"end", end}};
      if (!reservation_id.empty()) body["id"] = reservation_id;
      Api api(cfg);
      const auto j = api.call("POST", "/reservations", bearer(cfg.admin_secret, "admin secret (QI_ADMIN_SECRET)"), body.dump());
      if (cfg.json()) std::cout << j.dump() << '\n';
      else std::cout << str(j["id"]) << '\n';
      return kOk;
    };
  });
  auto* reservation_list = reservation_cmd->add_subcommand("list", "List reservations");
  reservation_list->callback([&] {
    action = [&] {
      Api api(cfg);
      const auto j = api.call("GET", "/reservations", bearer(cfg.token, "token"));
      if (cfg.json()) {
        std::cout << j.dump() << '\n';
        return kOk;
      }
      std::vector<std::vector<std::string>> rows = {{"id", "holder", "start", "end"}};
      for (const auto& r : j.get<std::vector<Reservation>>())
        rows.push_back({r.id, r.holder.cluster + "/" + r.holder.user, std::to_string(r.start), std::to_string(r.end)});
      print_rows(rows);
      return kOk;
    };
  });

  auto* pool_cmd = app.add_subcommand("pool", "Classical runtime pool");
  pool_cmd->require_subcommand(1);
  std::string program = QHYB_DEFAULT_BENCH_PROGRAM;
  int count = 1;
  auto* pool_prewarm = pool_cmd->add_subcommand("prewarm", "Start idle handles for a program (admin)");
  pool_prewarm->add_option("--program", program);
  pool_prewarm->add_option("--arg", program_args);
  pool_prewarm->add_option("--count", count)->check(CLI::NonNegativeNumber);
  pool_prewarm->callback([&] {
    action = [&] {
      Api api(cfg);
      const auto j = api.call("POST", "/pool/prewarm", bearer(cfg.admin_secret, "admin secret (QI_ADMIN_SECRET)"),
                              Json{{"executable_path", program}, {"args", program_args}, {"count", count}}.dump());
      if (cfg.json()) std::cout << j.dump() << '\n';
      else std::cout << "spawned " << j["spawned"] << ", pool size " << j["pool_size"] << '\n';
      return kOk;
    };
  });

  auto* bench_cmd = app.add_subcommand("bench-latency", "Time initialization, per-step execution and termination");
  int iterations = 100, jobs = 5;
  bool hot = false, cold = false;
  bench_cmd->add_option("--iterations", iterations, "Steps per job")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--jobs", jobs, "Jobs to run")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--program", program, "No-op hybrid program");
  auto* hot_flag = bench_cmd->add_flag("--hot", hot, "Prewarm a handle before each job (needs admin secret)");
  bench_cmd->add_flag("--cold", cold, "Spawn a fresh process for every job (default)")->excludes(hot_flag);
  bench_cmd->callback([&] {
    action = [&] {
      Api api(cfg);
      const auto auth = bearer(cfg.token, "token");
      // Cold runs use an argument no pool entry is ever keyed on.
      const std::vector<std::string> args = hot ? std::vector<std::string>{} : std::vector<std::string>{"--cold"};
      std::vector<Micros> init, steps, term;
      int hits = 0;
      for (int i = 0; i < jobs; ++i) {
        if (hot)
          api.call("POST", "/pool/prewarm", bearer(cfg.admin_secret, "admin secret (QI_ADMIN_SECRET)"),
                   Json{{"executable_path", program}, {"args", args}, {"count", 1}}.dump());
        Json body{{"payload", JobPayload(HybridProgram{program, args, iterations, {}})}, {"shots", 1}};
        const auto id = api.call("POST", "/jobs", auth, body.dump()).at("job_id").get<std::string>();
        const auto job = wait_terminal(api, auth, id, 600s);
        if (job["state"] != "completed")
          throw CliError(kClient, "benchmark job " + id + " ended " + str(job["state"]) +
                                      (job.contains("error") ? ": " + str(job["error"]["message"]) : ""));
        hits += job.value("pool_hit", false) ? 1 : 0;
        const auto r = api.call("GET", "/jobs/" + id + "/results", auth).get<JobResult>();
        init.push_back(r.latency.initialization);
        steps.insert(steps.end(), r.latency.per_step_execution.begin(), r.latency.per_step_execution.end());
        term.push_back(r.latency.termination);
      }
      const std::vector<std::pair<std::string, Stats>> table = {
          {"initialization", summarize(init)}, {"per_step_execution", summarize(steps)}, {"termination", summarize(term)}};
      if (cfg.json()) {
        Json out{{"mode", hot ? "hot" : "cold"}, {"jobs", jobs}, {"iterations", iterations}, {"pool_hits", hits}};
        for (const auto& [name, s] : table) out[name] = stats_json(s);
        std::cout << out.dump() << '\n';
        return kOk;
      }
      std::cout << (hot ? "hot" : "cold") << " start, " << jobs << " job(s) x " << iterations << " step(s), "
                << hits << " pool hit(s)\n";
      std::vector<std::vector<std::string>> rows = {{"row", "n", "median_us", "p95_us", "min_us", "max_us"}};
      for (const auto& [name, s] : table)
        rows.push_back({name, std::to_string(s.n), std::to_string(s.median), std::to_string(s.p95),
                        std::to_string(s.min), std::to_string(s.max)});
      print_rows(rows);
      return kOk;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }
  try {
    return action ? action() : kUsage;
  } catch (const CliError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kClient;
  }
}
