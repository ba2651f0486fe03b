#pragma once

// Synthetic dataset generator and the four-mode comparison harness:
// client_naive, client_opt, server_side and near_storage.

#include <chrono>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "skimlite/codec.hpp"
#include "skimlite/colfmt.hpp"
#include "skimlite/query.hpp"
#include "skimlite/timing.hpp"
#include "skimlite/transport.hpp"

namespace skimlite::bench {

struct CollectionSpec {
  std::string name;
  int n_fields = 0;
  double mean_multiplicity = 1.0;
};

struct GenSpec {
  std::uint64_t n_events = 100000;
  std::uint64_t seed = 1;
  Codec codec = Codec::lz4;
  std::uint64_t basket_target = colfmt::kDefaultBasketTarget;
  /// Fraction of events built to pass the reference query; every other
  /// event is built to fail exactly one of its stages.
  double target_efficiency = 0.01;
  int extra_scalars = 0;
  std::vector<CollectionSpec> collections = {
      {"Electron", 15, 1.0}, {"Muon", 15, 1.0},  {"Jet", 15, 4.0},
      {"Tau", 12, 0.6},      {"Photon", 12, 0.8}, {"FatJet", 10, 0.4},
  };
  int n_hlt = 100;
  double hlt_fire_rate = 0.02;
  int n_flags = 11;

  std::size_t branch_count() const;
};

/// Reads a spec from JSON; missing keys keep their defaults. Throws Error.
GenSpec parse_gen_spec(const std::string& json_text);
std::string gen_spec_to_json(const GenSpec& spec);

/// Branch layout implied by a spec, in file order.
std::vector<colfmt::BranchSchema> build_schema(const GenSpec& spec);

/// The in-memory columns generate() writes, in build_schema() order.
struct GeneratedColumns {
  std::vector<colfmt::BranchSchema> schema;
  std::vector<colfmt::ColumnValues> columns;
};
GeneratedColumns generate_columns(const GenSpec& spec);

/// Deterministic: the same spec always produces the same bytes.
colfmt::DatasetHeader generate(const GenSpec& spec, colfmt::ByteSink& sink);
colfmt::DatasetHeader generate(const GenSpec& spec, const std::string& path);

/// The 23 trigger names a minimized "HLT_*" resolves to.
const std::vector<std::string>& reference_triggers();
query::MinimalSets reference_minimal_sets();
std::string reference_minimal_sets_json();
/// The bundled analysis query over a generated dataset.
std::string reference_query_json(const std::string& input, const std::string& output);

enum class Mode : std::uint8_t { client_naive, client_opt, server_side, near_storage };
inline constexpr Mode kAllModes[] = {Mode::client_naive, Mode::client_opt, Mode::server_side,
                                     Mode::near_storage};
std::string mode_name(Mode m);
Mode mode_from_name(const std::string& name);  // throws Error
std::vector<Mode> parse_modes(const std::string& list);  // comma separated, or "all"

struct BenchConfig {
  std::string storage_dir;  // holds the input dataset
  std::string work_dir;     // client-side outputs
  std::string query_json;
  std::string minimal_sets_path;  // empty: none
  double rate = 10e6;  // client link, bytes/second
  StorageModel storage{std::chrono::microseconds(1000)};
  CacheConfig cache;
  /// Prefetch cache for the two client modes.
  bool client_cache = true;
  int daemon_workers = 2;
};

/// One row of a report.
struct ModeReport {
  Mode mode = Mode::client_naive;
  double rate = 0.0;
  TimingBreakdown timing;
  std::uint64_t client_link_bytes = 0;
  std::uint64_t storage_link_bytes = 0;
  std::uint64_t requests = 0;  // range reads against storage
  double cpu_ratio = 0.0;         // CPU of the filtering host / wall
  double client_cpu_ratio = 0.0;  // CPU of the requesting client / wall
  std::uint64_t n_input = 0;
  std::uint64_t n_passed = 0;
  std::uint64_t output_bytes = 0;
  std::uint64_t request_bytes = 0;  // near_storage: POST body
  std::string output_sha256;
  std::string output_path;
  double cache_hit_rate = 0.0;
};

/// Owns the in-process servers for one rate: a throttled storage server
/// for clients, an unthrottled one for the daemon's storage link, and the
/// daemon itself.
class BenchHarness {
 public:
  explicit BenchHarness(BenchConfig config);
  ~BenchHarness();
  BenchHarness(const BenchHarness&) = delete;
  BenchHarness& operator=(const BenchHarness&) = delete;

  ModeReport run(Mode mode);
  const BenchConfig& config() const { return config_; }
  std::string client_storage_url() const;
  std::string daemon_url() const;

 private:
  ModeReport run_client(Mode mode);
  ModeReport run_server_side();
  ModeReport run_near_storage();

  struct Servers;
  BenchConfig config_;
  query::SkimQuery query_;
  query::MinimalSets minimal_sets_;
  std::unique_ptr<Servers> servers_;
};

/// Speedup of each row against the client_naive row at the same rate (or
/// the first row at that rate when there is none).
std::vector<double> speedups(const std::vector<ModeReport>& rows);

std::string report_json(const std::vector<ModeReport>& rows);
std::string report_csv(const std::vector<ModeReport>& rows);
std::string report_table(const std::vector<ModeReport>& rows);
/// Writes report.json, report.csv and report.txt into `dir`.
void write_report(const std::vector<ModeReport>& rows, const std::string& dir);

}  // namespace skimlite::bench
