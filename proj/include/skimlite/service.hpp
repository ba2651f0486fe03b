#pragma once

// Near-storage skim daemon: POST /skim runs a query against the storage it
// sits next to and streams back only the reduced file.

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>

#include "skimlite/engine.hpp"
#include "skimlite/query.hpp"
#include "skimlite/transport.hpp"

namespace skimlite::service {

inline constexpr const char* kVersion = "0.1.0";

// Response headers of POST /skim.
inline constexpr const char* kHeaderInput = "X-Skim-N-Input";
inline constexpr const char* kHeaderPassed = "X-Skim-N-Passed";
inline constexpr const char* kHeaderWarnings = "X-Skim-Warnings";  // JSON array
inline constexpr const char* kHeaderTiming = "X-Skim-Timing";      // JSON object, seconds
inline constexpr const char* kHeaderStorageBytes = "X-Skim-Storage-Bytes";
inline constexpr const char* kHeaderStorageRequests = "X-Skim-Storage-Requests";
inline constexpr const char* kHeaderOutputName = "X-Skim-Output-Name";

struct DaemonConfig {
  /// Directory of datasets, or the http:// URL of a storage server.
  std::string storage;
  std::string host = "127.0.0.1";
  int port = 0;
  std::string minimal_sets_path;  // empty: no minimal sets
  int workers = 2;
  /// Throttle on response bodies (the client link); 0 = unthrottled.
  double rate = 0.0;
  StorageModel storage_model;  // applies when storage is a directory
  CacheConfig cache;
};

/// Outcome of one skim job, independent of HTTP.
struct SkimOutcome {
  int status = 200;
  std::string error;               // set when status != 200
  std::optional<std::size_t> error_position;  // 400 only
  Bytes file;
  engine::SkimResult result;
  std::string output_name;
  std::uint64_t storage_bytes = 0;
  std::uint64_t storage_requests = 0;
};

std::string timing_to_json(const TimingBreakdown& t);
TimingBreakdown timing_from_json(const std::string& text);

class SkimDaemon {
 public:
  explicit SkimDaemon(DaemonConfig config);
  ~SkimDaemon();
  SkimDaemon(const SkimDaemon&) = delete;
  SkimDaemon& operator=(const SkimDaemon&) = delete;

  /// Serves on a background thread; returns the bound port.
  int start();
  /// Serves on the calling thread until stop().
  void run();
  void stop();

  int port() const { return port_; }
  std::string url() const;

  /// Runs one request body to completion (what POST /skim does).
  SkimOutcome execute(const std::string& body);

  /// Re-reads the minimal-set file; returns the new digest.
  std::string reload_config();
  std::string config_digest() const;
  /// "ok", or "degraded" when storage is unreachable.
  std::string health_status() const;
  std::string health_json() const;

 private:
  std::unique_ptr<RangeSource> open_input(const std::string& input) const;

  struct Impl;
  std::unique_ptr<Impl> impl_;
  DaemonConfig config_;
  mutable std::mutex config_mutex_;
  std::shared_ptr<const query::MinimalSets> minimal_sets_;
  std::string digest_;
  std::counting_semaphore<> slots_;
  int port_ = 0;
};

}  // namespace skimlite::service
