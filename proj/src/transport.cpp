#include "skimlite/transport.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <httplib.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <filesystem>
#include <thread>

namespace skimlite {

// ---------------------------------------------------------------------------
// Sources

Bytes RangeSource::read(std::uint64_t offset, std::uint64_t len) {
  const auto total = size();
  if (offset > total || len > total - offset) {
    throw TransportError("range [" + std::to_string(offset) + ", " + std::to_string(offset + len) +
                         ") is outside " + locator() + " (" + std::to_string(total) + " bytes)");
  }
  if (len == 0) return {};
  Bytes out = do_read(offset, len);
  if (out.size() != len) {
    throw TransportError("short read from " + locator() + " at [" + std::to_string(offset) + ", " +
                         std::to_string(offset + len) + ")");
  }
  requests_.fetch_add(1);
  bytes_.fetch_add(len);
  return out;
}

Bytes MemorySource::do_read(std::uint64_t offset, std::uint64_t len) {
  return Bytes(data_.begin() + static_cast<std::ptrdiff_t>(offset),
               data_.begin() + static_cast<std::ptrdiff_t>(offset + len));
}

LocalFileSource::LocalFileSource(const std::string& path, StorageModel model)
    : path_(path), model_(model) {
  fd_ = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd_ < 0) {
    if (errno == ENOENT) throw NotFoundError("no such file: " + path);
    throw TransportError("cannot open " + path + ": " + std::strerror(errno));
  }
  struct stat st {};
  if (::fstat(fd_, &st) != 0 || !S_ISREG(st.st_mode)) {
    ::close(fd_);
    fd_ = -1;
    throw NotFoundError("not a regular file: " + path);
  }
  size_ = static_cast<std::uint64_t>(st.st_size);
}

LocalFileSource::~LocalFileSource() {
  if (fd_ >= 0) ::close(fd_);
}

Bytes LocalFileSource::do_read(std::uint64_t offset, std::uint64_t len) {
  if (model_.access_latency.count() > 0) std::this_thread::sleep_for(model_.access_latency);
  Bytes out(len);
  std::uint64_t done = 0;
  while (done < len) {
    const auto n = ::pread(fd_, out.data() + done, len - done, static_cast<off_t>(offset + done));
    if (n < 0) {
      if (errno == EINTR) continue;
      throw TransportError("read " + path_ + " at " + std::to_string(offset) + ": " +
                           std::strerror(errno));
    }
    if (n == 0) break;
    done += static_cast<std::uint64_t>(n);
  }
  out.resize(done);
  return out;
}

HttpUrl HttpUrl::parse(const std::string& url) {
  constexpr std::string_view scheme = "http://";
  if (url.rfind(scheme, 0) != 0) throw TransportError("not an http:// URL: " + url);
  const auto rest = url.substr(scheme.size());
  const auto slash = rest.find('/');
  const auto authority = rest.substr(0, slash);
  HttpUrl u;
  u.path = slash == std::string::npos ? "/" : rest.substr(slash);
  const auto colon = authority.rfind(':');
  if (colon == std::string::npos) {
    u.host = authority;
  } else {
    u.host = authority.substr(0, colon);
    try {
      u.port = std::stoi(authority.substr(colon + 1));
    } catch (const std::exception&) {
      throw TransportError("bad port in URL: " + url);
    }
  }
  if (u.host.empty()) throw TransportError("missing host in URL: " + url);
  return u;
}

std::string HttpUrl::origin() const { return "http://" + host + ":" + std::to_string(port); }

HttpRangeSource::HttpRangeSource(const std::string& url) : url_(HttpUrl::parse(url)) {
  client_ = std::make_unique<httplib::Client>(url_.host, url_.port);
  client_->set_keep_alive(true);
  client_->set_tcp_nodelay(true);
  client_->set_connection_timeout(5);
  client_->set_read_timeout(300);
  auto res = client_->Head(url_.path);
  if (!res) {
    throw TransportError("HEAD " + url_.str() + ": " + httplib::to_string(res.error()));
  }
  if (res->status == 404) throw NotFoundError("no such dataset: " + url_.str());
  if (res->status != 200) {
    throw TransportError("HEAD " + url_.str() + ": HTTP " + std::to_string(res->status));
  }
  const auto len = res->get_header_value("Content-Length");
  if (len.empty()) throw TransportError("HEAD " + url_.str() + ": no Content-Length");
  size_ = std::stoull(len);
}

HttpRangeSource::~HttpRangeSource() = default;

Bytes HttpRangeSource::do_read(std::uint64_t offset, std::uint64_t len) {
  const auto range = "bytes=" + std::to_string(offset) + "-" + std::to_string(offset + len - 1);
  std::lock_guard lock(mutex_);
  auto res = client_->Get(url_.path, {{"Range", range}});
  const auto where = url_.str() + " [" + range + "]";
  if (!res) throw TransportError("GET " + where + ": " + httplib::to_string(res.error()));
  if (res->status != 206) {
    throw TransportError("GET " + where + ": expected HTTP 206, got " + std::to_string(res->status));
  }
  if (res->body.size() != len) {
    throw TransportError("GET " + where + ": got " + std::to_string(res->body.size()) + " bytes");
  }
  return Bytes(res->body.begin(), res->body.end());
}

std::unique_ptr<RangeSource> open_source(const std::string& locator, StorageModel model) {
  if (locator.rfind("http://", 0) == 0) return std::make_unique<HttpRangeSource>(locator);
  return std::make_unique<LocalFileSource>(locator, model);
}

// ---------------------------------------------------------------------------
// Throttle

Throttle::Throttle(double rate_bytes_per_sec, std::uint64_t burst)
    : rate_(rate_bytes_per_sec),
      burst_(std::max<std::uint64_t>(1, burst)),
      tokens_(static_cast<double>(burst_)),
      last_(std::chrono::steady_clock::now()) {
  if (rate_ <= 0) throw Error("throttle rate must be positive");
}

void Throttle::consume(std::uint64_t n) {
  while (n > 0) {
    const auto chunk = std::min(n, burst_);
    std::chrono::duration<double> wait{0};
    {
      std::lock_guard lock(mutex_);
      const auto now = std::chrono::steady_clock::now();
      const std::chrono::duration<double> dt = now - last_;
      last_ = now;
      tokens_ = std::min(static_cast<double>(burst_), tokens_ + dt.count() * rate_);
      if (tokens_ >= static_cast<double>(chunk)) {
        tokens_ -= static_cast<double>(chunk);
        n -= chunk;
        continue;
      }
      wait = std::chrono::duration<double>((static_cast<double>(chunk) - tokens_) / rate_);
    }
    std::this_thread::sleep_for(wait);
  }
}

std::shared_ptr<Throttle> ConnectionThrottles::for_peer(const std::string& addr, int port) {
  if (rate_ <= 0) return nullptr;
  std::lock_guard lock(mutex_);
  const auto key = addr + ":" + std::to_string(port);
  auto& slot = map_[key];
  if (!slot) {
    if (map_.size() > 4096) {
      std::erase_if(map_, [&](const auto& kv) { return kv.first != key && kv.second.use_count() == 1; });
    }
    slot = std::make_shared<Throttle>(rate_);
  }
  return slot;
}

// ---------------------------------------------------------------------------
// Prefetch cache

PrefetchCache::PrefetchCache(RangeSource& source, const colfmt::DatasetHeader& header,
                             CacheConfig config, TimingSink* timing)
    : source_(source),
      header_(header),
      config_(config),
      timing_(timing),
      active_(config.enabled && (!source.is_local() || config.coalesce_local)) {}

void PrefetchCache::set_enabled(std::vector<std::size_t> branches) {
  std::sort(branches.begin(), branches.end());
  branches.erase(std::unique(branches.begin(), branches.end()), branches.end());
  enabled_ = std::move(branches);
}

void PrefetchCache::set_wanted(std::size_t branch, std::vector<bool> wanted) {
  wanted_[branch] = std::move(wanted);
}

void PrefetchCache::clear_wanted() { wanted_.clear(); }

bool PrefetchCache::is_wanted(std::size_t branch, std::size_t basket) const {
  const auto it = wanted_.find(branch);
  return it == wanted_.end() || (basket < it->second.size() && it->second[basket]);
}

PrefetchCache::BasketBytes PrefetchCache::fetch_direct(std::size_t branch, std::size_t basket) {
  const auto& ref = header_.branches.at(branch).baskets.at(basket);
  ScopedPhase t(timing_, Phase::basket_fetch);
  return std::make_shared<const Bytes>(source_.read(ref.file_offset, ref.compressed_len));
}

PrefetchCache::BasketBytes PrefetchCache::get_basket(std::size_t branch, std::size_t basket) {
  if (!active_) {
    ++stats_.misses;
    return fetch_direct(branch, basket);
  }
  const Key key{branch, basket};
  if (auto it = store_.find(key); it != store_.end()) {
    ++stats_.hits;
    lru_.splice(lru_.begin(), lru_, it->second.lru);
    return it->second.bytes;
  }
  ++stats_.misses;
  auto branches = enabled_;
  if (!std::binary_search(branches.begin(), branches.end(), branch)) {
    branches.insert(std::upper_bound(branches.begin(), branches.end(), branch), branch);
  }
  const auto start = header_.branches.at(branch).first_event.at(basket);
  fill_window(branches, start, header_.n_events, key);
  if (auto it = store_.find(key); it != store_.end()) return it->second.bytes;
  // Larger than the whole budget: degraded on-demand read.
  return fetch_direct(branch, basket);
}

void PrefetchCache::prefetch_window(const std::vector<std::size_t>& branches,
                                    std::uint64_t first_event, std::uint64_t last_event) {
  fill_window(branches, first_event, last_event, std::nullopt);
}

void PrefetchCache::fill_window(const std::vector<std::size_t>& branches, std::uint64_t first_event,
                                std::uint64_t last_event, std::optional<Key> lead) {
  if (!active_ || first_event >= last_event || first_event >= header_.n_events) return;
  struct Candidate {
    std::uint64_t start;
    std::size_t branch;
    std::size_t basket;
    std::uint64_t size;
    bool resident;
  };
  std::vector<Candidate> candidates;
  for (auto br : branches) {
    const auto& meta = header_.branches.at(br);
    if (meta.baskets.empty()) continue;
    for (auto b = colfmt::locate_basket(meta, header_.n_events, first_event);
         b < meta.baskets.size() && meta.first_event[b] < last_event; ++b) {
      const Key k{br, b};
      if (lead && k == *lead) continue;
      if (!is_wanted(br, b)) continue;
      candidates.push_back({std::max(meta.first_event[b], first_event), br, b,
                            meta.baskets[b].compressed_len, store_.contains(k)});
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Candidate& a, const Candidate& b) { return a.start < b.start; });
  if (lead) {
    const auto& ref = header_.branches.at(lead->branch).baskets.at(lead->basket);
    candidates.insert(candidates.begin(),
                      {first_event, lead->branch, lead->basket, ref.compressed_len, false});
  }

  // Resident baskets inside the window count against the budget and are
  // refreshed so that making room never evicts them.
  std::uint64_t window = 0;
  std::uint64_t incoming = 0;
  std::size_t take = 0;
  while (take < candidates.size() && window + candidates[take].size <= config_.byte_budget) {
    window += candidates[take].size;
    if (!candidates[take].resident) incoming += candidates[take].size;
    ++take;
  }
  if (take == 0) return;
  for (std::size_t i = take; i-- > 0;) {
    if (!candidates[i].resident) continue;
    auto& entry = store_.at(Key{candidates[i].branch, candidates[i].basket});
    lru_.splice(lru_.begin(), lru_, entry.lru);
  }
  evict_to(config_.byte_budget - incoming);

  std::vector<std::vector<std::size_t>> per_branch(header_.branches.size());
  for (std::size_t i = 0; i < take; ++i) {
    if (!candidates[i].resident) per_branch[candidates[i].branch].push_back(candidates[i].basket);
  }
  for (std::size_t br = 0; br < per_branch.size(); ++br) {
    if (per_branch[br].empty()) continue;
    std::sort(per_branch[br].begin(), per_branch[br].end());
    fetch_runs(br, per_branch[br]);
  }
}

void PrefetchCache::fetch_runs(std::size_t branch, const std::vector<std::size_t>& baskets) {
  const auto& meta = header_.branches.at(branch);
  std::size_t i = 0;
  while (i < baskets.size()) {
    std::size_t j = i + 1;
    while (j < baskets.size()) {
      const auto& prev = meta.baskets[baskets[j - 1]];
      if (prev.file_offset + prev.compressed_len != meta.baskets[baskets[j]].file_offset) break;
      ++j;
    }
    const auto run_begin = meta.baskets[baskets[i]].file_offset;
    const auto& last = meta.baskets[baskets[j - 1]];
    const auto run_end = last.file_offset + last.compressed_len;
    Bytes run;
    {
      ScopedPhase t(timing_, Phase::basket_fetch);
      run = source_.read(run_begin, run_end - run_begin);
    }
    for (auto k = i; k < j; ++k) {
      const auto& ref = meta.baskets[baskets[k]];
      const auto at = static_cast<std::ptrdiff_t>(ref.file_offset - run_begin);
      insert(Key{branch, baskets[k]},
             std::make_shared<const Bytes>(run.begin() + at,
                                           run.begin() + at + static_cast<std::ptrdiff_t>(ref.compressed_len)));
    }
    i = j;
  }
}

void PrefetchCache::insert(const Key& key, BasketBytes bytes) {
  if (store_.contains(key)) return;
  stats_.resident_bytes += bytes->size();
  lru_.push_front(key);
  store_.emplace(key, Entry{std::move(bytes), lru_.begin()});
  stats_.peak_resident_bytes = std::max(stats_.peak_resident_bytes, stats_.resident_bytes);
}

void PrefetchCache::evict_to(std::uint64_t budget) {
  while (stats_.resident_bytes > budget && !lru_.empty()) {
    const auto key = lru_.back();
    lru_.pop_back();
    auto it = store_.find(key);
    stats_.resident_bytes -= it->second.bytes->size();
    store_.erase(it);
    ++stats_.evictions;
  }
}

// ---------------------------------------------------------------------------
// Storage server

namespace {

/// Maps a request path onto a file under root, refusing to escape it.
std::optional<std::filesystem::path> resolve_under(const std::filesystem::path& root,
                                                   const std::string& request_path) {
  std::filesystem::path rel = request_path;
  rel = rel.relative_path();
  for (const auto& part : rel) {
    if (part == "..") return std::nullopt;
  }
  auto full = root / rel;
  std::error_code ec;
  if (!std::filesystem::is_regular_file(full, ec)) return std::nullopt;
  return full;
}

}  // namespace

struct StorageServer::Impl {
  httplib::Server server;
  std::thread thread;
  std::unique_ptr<ConnectionThrottles> throttles;
};

StorageServer::StorageServer(ServeConfig config)
    : impl_(std::make_unique<Impl>()), config_(std::move(config)) {
  impl_->throttles = std::make_unique<ConnectionThrottles>(config_.rate);
  auto& svr = impl_->server;
  const auto threads = static_cast<std::size_t>(std::max(1, config_.threads));
  svr.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  svr.set_keep_alive_max_count(100000);
  svr.set_tcp_nodelay(true);
  svr.set_read_timeout(300);
  svr.set_write_timeout(300);

  svr.Get(R"(/.*)", [this](const httplib::Request& req, httplib::Response& res) {
    const auto path = resolve_under(config_.root, req.path);
    if (!path) {
      res.status = 404;
      res.set_content("not found\n", "text/plain");
      return;
    }
    if (req.ranges.size() > 1) {
      res.status = 416;
      return;
    }
    std::error_code ec;
    const auto size = std::filesystem::file_size(*path, ec);
    if (ec) {
      res.status = 404;
      return;
    }
    auto throttle = impl_->throttles->for_peer(req.remote_addr, req.remote_port);
    auto file = *path;
    auto storage = config_.storage;
    res.set_header("Accept-Ranges", "bytes");
    res.set_content_provider(
        static_cast<std::size_t>(size), "application/octet-stream",
        [this, file, storage, throttle](std::size_t offset, std::size_t length,
                                        httplib::DataSink& sink) {
          LocalFileSource src(file.string(), storage);
          const Bytes data = src.read(offset, length);
          constexpr std::size_t kChunk = 64 * 1024;
          for (std::size_t at = 0; at < data.size(); at += kChunk) {
            const auto n = std::min(kChunk, data.size() - at);
            if (throttle) throttle->consume(n);
            if (!sink.write(reinterpret_cast<const char*>(data.data() + at), n)) return false;
            bytes_served_.fetch_add(n);
          }
          return true;
        });
  });
}

StorageServer::~StorageServer() { stop(); }

int StorageServer::start() {
  auto& svr = impl_->server;
  if (config_.port == 0) {
    port_ = svr.bind_to_any_port(config_.host);
  } else {
    port_ = svr.bind_to_port(config_.host, config_.port) ? config_.port : -1;
  }
  if (port_ <= 0) throw TransportError("cannot bind " + config_.host + ":" + std::to_string(config_.port));
  impl_->thread = std::thread([&svr] { svr.listen_after_bind(); });
  svr.wait_until_ready();
  return port_;
}

void StorageServer::run() {
  auto& svr = impl_->server;
  if (config_.port == 0) {
    port_ = svr.bind_to_any_port(config_.host);
  } else {
    port_ = svr.bind_to_port(config_.host, config_.port) ? config_.port : -1;
  }
  if (port_ <= 0) throw TransportError("cannot bind " + config_.host + ":" + std::to_string(config_.port));
  svr.listen_after_bind();
}

void StorageServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

std::string StorageServer::url() const {
  return "http://" + config_.host + ":" + std::to_string(port_);
}

void serve(const ServeConfig& config) {
  StorageServer server(config);
  server.run();
}

}  // namespace skimlite
