#pragma once

// Range access between the engine and storage: local and HTTP range
// sources, the basket prefetch cache, and the token-bucket throttle used on
// "slow link" connections.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "skimlite/bytes.hpp"
#include "skimlite/colfmt.hpp"
#include "skimlite/timing.hpp"

namespace httplib {
class Client;
}

namespace skimlite {

/// Cost model for the storage device itself. Every physical read pays
/// `access_latency` once regardless of its length, which is what makes
/// coalesced reads cheaper than per-basket reads on a disk pool.
struct StorageModel {
  std::chrono::microseconds access_latency{0};
};

/// Offset/length reads with exact request and byte accounting.
class RangeSource {
 public:
  virtual ~RangeSource() = default;

  /// Returns exactly `len` bytes starting at `offset`. Throws TransportError
  /// if the range is outside the source or the read fails.
  Bytes read(std::uint64_t offset, std::uint64_t len);

  virtual std::uint64_t size() const = 0;
  virtual bool is_local() const = 0;
  virtual std::string locator() const = 0;

  std::uint64_t requests() const { return requests_.load(); }
  std::uint64_t bytes_fetched() const { return bytes_.load(); }

 protected:
  virtual Bytes do_read(std::uint64_t offset, std::uint64_t len) = 0;

 private:
  std::atomic<std::uint64_t> requests_{0};
  std::atomic<std::uint64_t> bytes_{0};
};

/// Spec-named entry point; same as source.read().
inline Bytes range_get(RangeSource& source, std::uint64_t offset, std::uint64_t len) {
  return source.read(offset, len);
}

class MemorySource : public RangeSource {
 public:
  explicit MemorySource(Bytes data, std::string name = "memory")
      : data_(std::move(data)), name_(std::move(name)) {}

  std::uint64_t size() const override { return data_.size(); }
  bool is_local() const override { return true; }
  std::string locator() const override { return name_; }

 protected:
  Bytes do_read(std::uint64_t offset, std::uint64_t len) override;

 private:
  Bytes data_;
  std::string name_;
};

class LocalFileSource : public RangeSource {
 public:
  explicit LocalFileSource(const std::string& path, StorageModel model = {});
  ~LocalFileSource() override;
  LocalFileSource(const LocalFileSource&) = delete;
  LocalFileSource& operator=(const LocalFileSource&) = delete;

  std::uint64_t size() const override { return size_; }
  bool is_local() const override { return true; }
  std::string locator() const override { return path_; }

 protected:
  Bytes do_read(std::uint64_t offset, std::uint64_t len) override;

 private:
  std::string path_;
  int fd_ = -1;
  std::uint64_t size_ = 0;
  StorageModel model_;
};

/// Split "http://host:port/path" into its parts. Throws TransportError.
struct HttpUrl {
  std::string host;
  int port = 80;
  std::string path;  // always begins with '/'

  static HttpUrl parse(const std::string& url);
  std::string origin() const;
  std::string str() const { return origin() + path; }
};

/// Reads through HTTP/1.1 single-range GETs; size comes from a HEAD issued
/// at construction (not counted as a range request).
class HttpRangeSource : public RangeSource {
 public:
  explicit HttpRangeSource(const std::string& url);
  ~HttpRangeSource() override;

  std::uint64_t size() const override { return size_; }
  bool is_local() const override { return false; }
  std::string locator() const override { return url_.str(); }

 protected:
  Bytes do_read(std::uint64_t offset, std::uint64_t len) override;

 private:
  HttpUrl url_;
  std::unique_ptr<httplib::Client> client_;
  std::mutex mutex_;
  std::uint64_t size_ = 0;
};

/// Opens a local path or an http:// URL.
std::unique_ptr<RangeSource> open_source(const std::string& locator, StorageModel model = {});

/// Token bucket. consume() blocks until the requested bytes may be sent.
class Throttle {
 public:
  static constexpr std::uint64_t kDefaultBurst = 64 * 1024;

  explicit Throttle(double rate_bytes_per_sec, std::uint64_t burst = kDefaultBurst);

  void consume(std::uint64_t n);
  double rate() const { return rate_; }
  std::uint64_t burst() const { return burst_; }

 private:
  double rate_;
  std::uint64_t burst_;
  double tokens_;
  std::chrono::steady_clock::time_point last_;
  std::mutex mutex_;
};

struct CacheConfig {
  std::uint64_t byte_budget = 100ull * 1024 * 1024;
  bool enabled = true;
  /// Local sources normally bypass the cache entirely (one read per basket);
  /// set this to coalesce anyway.
  bool coalesce_local = false;
};

struct CacheStats {
  std::uint64_t hits = 0;
  std::uint64_t misses = 0;
  std::uint64_t evictions = 0;
  std::uint64_t resident_bytes = 0;
  std::uint64_t peak_resident_bytes = 0;

  double hit_rate() const {
    const auto total = hits + misses;
    return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
  }
};

/// Entry-range basket cache bounded by a byte budget. On a miss it fetches
/// the upcoming baskets of every enabled branch, in event order, until the
/// budget is full, coalescing adjacent baskets of a branch into one read.
/// Owned by one job; not thread-safe.
class PrefetchCache {
 public:
  using BasketBytes = std::shared_ptr<const Bytes>;

  PrefetchCache(RangeSource& source, const colfmt::DatasetHeader& header,
                CacheConfig config = {}, TimingSink* timing = nullptr);

  /// Replaces the set of branches whose baskets a window may include.
  void set_enabled(std::vector<std::size_t> branches);
  /// Restricts windows for `branch` to baskets with wanted[b] true.
  void set_wanted(std::size_t branch, std::vector<bool> wanted);
  void clear_wanted();

  BasketBytes get_basket(std::size_t branch, std::size_t basket);

  /// Makes resident every (wanted) basket of `branches` intersecting
  /// [first_event, last_event), in event order, until the budget is full.
  void prefetch_window(const std::vector<std::size_t>& branches, std::uint64_t first_event,
                       std::uint64_t last_event);

  /// False when the cache is disabled or bypassed for a local source.
  bool active() const { return active_; }
  const CacheStats& stats() const { return stats_; }
  const CacheConfig& config() const { return config_; }

 private:
  struct Key {
    std::size_t branch;
    std::size_t basket;
    bool operator==(const Key&) const = default;
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const { return k.branch * 1000003u ^ k.basket; }
  };
  struct Entry {
    BasketBytes bytes;
    std::list<Key>::iterator lru;
  };

  BasketBytes fetch_direct(std::size_t branch, std::size_t basket);
  bool is_wanted(std::size_t branch, std::size_t basket) const;
  void fill_window(const std::vector<std::size_t>& branches, std::uint64_t first_event,
                   std::uint64_t last_event, std::optional<Key> lead);
  void insert(const Key& key, BasketBytes bytes);
  void evict_to(std::uint64_t budget);
  /// Fetch the listed baskets (all of one branch, ascending) with one read
  /// per run of file-adjacent baskets.
  void fetch_runs(std::size_t branch, const std::vector<std::size_t>& baskets);

  RangeSource& source_;
  const colfmt::DatasetHeader& header_;
  CacheConfig config_;
  TimingSink* timing_;
  bool active_;
  std::vector<std::size_t> enabled_;
  std::unordered_map<std::size_t, std::vector<bool>> wanted_;
  std::unordered_map<Key, Entry, KeyHash> store_;
  std::list<Key> lru_;  // front = most recently used
  CacheStats stats_;
};

/// Static-file range server over a directory.
struct ServeConfig {
  std::string root;
  std::string host = "127.0.0.1";
  int port = 0;  // 0 = pick a free port
  double rate = 0.0;  // bytes/second per connection; 0 = unthrottled
  StorageModel storage;
  int threads = 8;
};

class StorageServer {
 public:
  explicit StorageServer(ServeConfig config);
  ~StorageServer();
  StorageServer(const StorageServer&) = delete;
  StorageServer& operator=(const StorageServer&) = delete;

  /// Binds and serves on a background thread; returns the bound port.
  int start();
  /// Binds and serves on the calling thread until stop().
  void run();
  void stop();

  int port() const { return port_; }
  std::string url() const;
  /// Total response body bytes written by this server.
  std::uint64_t bytes_served() const { return bytes_served_.load(); }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  ServeConfig config_;
  int port_ = 0;
  std::atomic<std::uint64_t> bytes_served_{0};
};

/// Blocking server entry point used by `skimlite serve`.
void serve(const ServeConfig& config);

/// Per-connection throttles for an httplib server, keyed by peer address.
class ConnectionThrottles {
 public:
  explicit ConnectionThrottles(double rate) : rate_(rate) {}
  /// Null when unthrottled.
  std::shared_ptr<Throttle> for_peer(const std::string& addr, int port);

 private:
  double rate_;
  std::mutex mutex_;
  std::unordered_map<std::string, std::shared_ptr<Throttle>> map_;
};

}  // namespace skimlite
