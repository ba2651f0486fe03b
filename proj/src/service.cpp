#include "skimlite/service.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "skimlite/digest.hpp"

namespace skimlite::service {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::mutex log_mutex;

void log_line(const std::string& msg) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &tm);
  std::lock_guard lock(log_mutex);
  std::clog << stamp << " skimd " << msg << '\n';
}

bool is_url(const std::string& s) { return s.rfind("http://", 0) == 0; }

std::string minimal_sets_digest(const query::MinimalSets& sets) {
  json j = json::object();
  for (const auto& [pattern, names] : sets) j[pattern] = names;
  return sha256_hex(j.dump());
}

std::string error_body(const std::string& message, std::optional<std::size_t> position) {
  json j{{"error", message}};
  if (position) j["position"] = *position;
  return j.dump();
}

}  // namespace

std::string timing_to_json(const TimingBreakdown& t) {
  json j = json::object();
  for (auto p : kAllPhases) j[std::string(phase_name(p))] = t[p];
  j["total_wall"] = t.total_wall;
  j["cpu_time"] = t.cpu_time;
  return j.dump();
}

TimingBreakdown timing_from_json(const std::string& text) {
  TimingBreakdown t;
  const auto j = json::parse(text);
  for (auto p : kAllPhases) t[p] = j.value(std::string(phase_name(p)), 0.0);
  t.total_wall = j.value("total_wall", 0.0);
  t.cpu_time = j.value("cpu_time", 0.0);
  return t;
}

struct SkimDaemon::Impl {
  httplib::Server server;
  std::thread thread;
  ConnectionThrottles throttles;
  explicit Impl(double rate) : throttles(rate) {}
};

SkimDaemon::SkimDaemon(DaemonConfig config)
    : impl_(std::make_unique<Impl>(config.rate)),
      config_(std::move(config)),
      slots_(std::max(1, config_.workers)) {
  reload_config();

  auto& svr = impl_->server;
  // Connections beyond the worker count queue on the semaphore, not here.
  const auto threads = static_cast<std::size_t>(std::max(4, config_.workers + 2));
  svr.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  svr.set_tcp_nodelay(true);
  svr.set_read_timeout(600);
  svr.set_write_timeout(600);

  svr.Post("/skim", [this](const httplib::Request& req, httplib::Response& res) {
    auto outcome = std::make_shared<SkimOutcome>(execute(req.body));
    res.status = outcome->status;
    if (outcome->status != 200) {
      res.set_content(error_body(outcome->error, outcome->error_position), "application/json");
      return;
    }
    const auto& r = outcome->result;
    res.set_header(kHeaderInput, std::to_string(r.n_input));
    res.set_header(kHeaderPassed, std::to_string(r.n_passed));
    res.set_header(kHeaderWarnings, json(r.warnings).dump());
    res.set_header(kHeaderTiming, timing_to_json(r.timing));
    res.set_header(kHeaderStorageBytes, std::to_string(outcome->storage_bytes));
    res.set_header(kHeaderStorageRequests, std::to_string(outcome->storage_requests));
    res.set_header(kHeaderOutputName, outcome->output_name);
    auto throttle = impl_->throttles.for_peer(req.remote_addr, req.remote_port);
    res.set_content_provider(
        outcome->file.size(), "application/octet-stream",
        [outcome, throttle](std::size_t offset, std::size_t length, httplib::DataSink& sink) {
          constexpr std::size_t kChunk = 64 * 1024;
          const auto end = offset + length;
          for (auto at = offset; at < end; at += kChunk) {
            const auto n = std::min(kChunk, end - at);
            if (throttle) throttle->consume(n);
            if (!sink.write(reinterpret_cast<const char*>(outcome->file.data() + at), n)) return false;
          }
          return true;
        });
  });

  svr.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(health_json(), "application/json");
  });

  svr.Post("/admin/reload", [this](const httplib::Request&, httplib::Response& res) {
    try {
      const auto digest = reload_config();
      res.set_content(json{{"minimal_sets_digest", digest}}.dump(), "application/json");
    } catch (const std::exception& e) {
      res.status = 500;
      res.set_content(error_body(e.what(), std::nullopt), "application/json");
    }
  });
}

SkimDaemon::~SkimDaemon() { stop(); }

int SkimDaemon::start() {
  auto& svr = impl_->server;
  port_ = config_.port == 0 ? svr.bind_to_any_port(config_.host)
                            : (svr.bind_to_port(config_.host, config_.port) ? config_.port : -1);
  if (port_ <= 0) throw TransportError("cannot bind " + config_.host + ":" + std::to_string(config_.port));
  impl_->thread = std::thread([&svr] { svr.listen_after_bind(); });
  svr.wait_until_ready();
  log_line("listening on " + url() + " storage=" + config_.storage);
  return port_;
}

void SkimDaemon::run() {
  auto& svr = impl_->server;
  port_ = config_.port == 0 ? svr.bind_to_any_port(config_.host)
                            : (svr.bind_to_port(config_.host, config_.port) ? config_.port : -1);
  if (port_ <= 0) throw TransportError("cannot bind " + config_.host + ":" + std::to_string(config_.port));
  log_line("listening on " + url() + " storage=" + config_.storage);
  svr.listen_after_bind();
}

void SkimDaemon::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

std::string SkimDaemon::url() const { return "http://" + config_.host + ":" + std::to_string(port_); }

std::string SkimDaemon::reload_config() {
  auto sets = std::make_shared<query::MinimalSets>();
  if (!config_.minimal_sets_path.empty()) *sets = query::load_minimal_sets(config_.minimal_sets_path);
  auto digest = minimal_sets_digest(*sets);
  {
    std::lock_guard lock(config_mutex_);
    minimal_sets_ = std::move(sets);
    digest_ = digest;
  }
  log_line("minimal sets loaded, digest " + digest.substr(0, 12));
  return digest;
}

std::string SkimDaemon::config_digest() const {
  std::lock_guard lock(config_mutex_);
  return digest_;
}

std::string SkimDaemon::health_status() const {
  if (is_url(config_.storage)) {
    try {
      const auto url = HttpUrl::parse(config_.storage);
      httplib::Client client(url.host, url.port);
      client.set_connection_timeout(2);
      auto res = client.Head("/");
      return res ? "ok" : "degraded";
    } catch (const std::exception&) {
      return "degraded";
    }
  }
  std::error_code ec;
  return fs::is_directory(config_.storage, ec) ? "ok" : "degraded";
}

std::string SkimDaemon::health_json() const {
  return json{{"status", health_status()},
              {"version", kVersion},
              {"storage", config_.storage},
              {"minimal_sets_digest", config_digest()}}
      .dump();
}

std::unique_ptr<RangeSource> SkimDaemon::open_input(const std::string& input) const {
  const fs::path rel(input);
  if (input.empty() || rel.is_absolute()) throw NotFoundError("invalid input path: " + input);
  for (const auto& part : rel) {
    if (part == "..") throw NotFoundError("invalid input path: " + input);
  }
  if (is_url(config_.storage)) {
    auto base = config_.storage;
    while (!base.empty() && base.back() == '/') base.pop_back();
    return std::make_unique<HttpRangeSource>(base + "/" + rel.generic_string());
  }
  const auto path = fs::path(config_.storage) / rel;
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw NotFoundError("no such dataset: " + input);
  return std::make_unique<LocalFileSource>(path.string(), config_.storage_model);
}

SkimOutcome SkimDaemon::execute(const std::string& body) {
  SkimOutcome out;
  slots_.acquire();
  struct Release {
    std::counting_semaphore<>& s;
    ~Release() { s.release(); }
  } release{slots_};

  std::shared_ptr<const query::MinimalSets> sets;
  {
    std::lock_guard lock(config_mutex_);
    sets = minimal_sets_;
  }
  try {
    const auto q = query::parse_query(body);
    out.output_name = q.output;
    auto source = open_input(q.input);
    TimingSink timing;
    const auto header = colfmt::read_header(*source);
    const auto plan = query::plan_skim(q, header, *sets);
    PrefetchCache cache(*source, header, config_.cache, &timing);
    colfmt::MemorySink sink;
    engine::RunOptions options;
    options.timing = &timing;
    out.result = engine::run_skim(header, plan, cache, sink, options);
    out.file = sink.take();
    out.storage_bytes = source->bytes_fetched();
    out.storage_requests = source->requests();
    log_line("skim " + q.input + ": " + std::to_string(out.result.n_passed) + "/" +
             std::to_string(out.result.n_input) + " events, " + std::to_string(out.file.size()) +
             " bytes out, " + std::to_string(out.storage_bytes) + " bytes read");
  } catch (const QueryError& e) {
    out.status = 400;
    out.error = e.message();
    out.error_position = e.position();
  } catch (const NotFoundError& e) {
    out.status = 404;
    out.error = e.what();
  } catch (const PlanError& e) {
    out.status = 422;
    out.error = e.what();
  } catch (const std::exception& e) {
    out.status = 500;
    out.error = e.what();
  }
  if (out.status != 200) log_line("request failed (" + std::to_string(out.status) + "): " + out.error);
  return out;
}

}  // namespace skimlite::service
