// skimlite command-line front end.

#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <tuple>

#include "CLI11.hpp"
#include "httplib.h"
#include "json.hpp"
#include "skimlite/bench.hpp"
#include "skimlite/colfmt.hpp"
#include "skimlite/engine.hpp"
#include "skimlite/query.hpp"
#include "skimlite/service.hpp"
#include "skimlite/transport.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace skimlite;

namespace {

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write " + path);
}

std::string join_locator(const std::string& base, const std::string& name) {
  if (base.empty()) return name;
  if (base.rfind("http://", 0) == 0) {
    auto b = base;
    while (!b.empty() && b.back() == '/') b.pop_back();
    return b + "/" + name;
  }
  return (fs::path(base) / name).string();
}

std::pair<std::string, int> parse_listen(const std::string& listen) {
  const auto colon = listen.rfind(':');
  if (colon == std::string::npos) throw Error("--listen expects HOST:PORT, got '" + listen + "'");
  int port = 0;
  try {
    port = std::stoi(listen.substr(colon + 1));
  } catch (const std::exception&) {
    throw Error("bad port in '" + listen + "'");
  }
  return {listen.substr(0, colon), port};
}

int cmd_inspect(const std::string& locator, bool baskets) {
  auto source = open_source(locator);
  const auto h = colfmt::read_header(*source);
  json branches = json::array();
  for (const auto& b : h.branches) {
    std::uint64_t comp = 0, raw = 0;
    for (const auto& r : b.baskets) {
      comp += r.compressed_len;
      raw += r.uncompressed_len;
    }
    json jb{{"name", b.name},
            {"kind", colfmt::kind_name(b.kind)},
            {"type", colfmt::value_type_name(b.value_type)},
            {"baskets", b.baskets.size()},
            {"compressed_bytes", comp},
            {"uncompressed_bytes", raw}};
    if (b.is_jagged()) jb["counter"] = b.counter_branch;
    if (baskets) {
      json list = json::array();
      for (std::size_t i = 0; i < b.baskets.size(); ++i) {
        const auto& r = b.baskets[i];
        list.push_back({{"first_event", b.first_event[i]},
                        {"entries", r.n_entries},
                        {"offset", r.file_offset},
                        {"compressed", r.compressed_len},
                        {"uncompressed", r.uncompressed_len},
                        {"codec", codec_name(r.codec)}});
      }
      jb["basket_list"] = list;
    }
    branches.push_back(jb);
  }
  json out{{"locator", locator},
           {"format_version", h.format_version},
           {"n_events", h.n_events},
           {"n_branches", h.branches.size()},
           {"basket_target", h.basket_target},
           {"header_length", h.header_length},
           {"file_size", source->size()},
           {"codec", codec_name(h.dominant_codec())},
           {"branches", branches}};
  std::cout << out.dump(2) << '\n';
  return 0;
}

int cmd_skim(const std::string& query_path, const std::string& storage, const std::string& minimal_path,
             const std::string& out_path, const std::string& daemon, bool naive) {
  const auto text = read_text(query_path);
  const auto q = query::parse_query(text);
  const auto target = out_path.empty() ? q.output : out_path;
  if (target.empty()) throw Error("no output path: set \"output\" in the query or pass --out");

  if (!daemon.empty()) {
    const auto url = HttpUrl::parse(daemon);
    httplib::Client client(url.host, url.port);
    client.set_tcp_nodelay(true);
    client.set_read_timeout(3600);
    auto res = client.Post("/skim", text, "application/json");
    if (!res) throw TransportError("daemon unreachable: " + httplib::to_string(res.error()));
    if (res->status != 200) {
      std::cerr << "error " << res->status << ": " << res->body << '\n';
      return 1;
    }
    write_text(target, res->body);
    const auto warnings = res->get_header_value(service::kHeaderWarnings);
    for (const auto& w : json::parse(warnings.empty() ? "[]" : warnings)) {
      std::cerr << "warning: " << w.get<std::string>() << '\n';
    }
    std::cout << res->get_header_value(service::kHeaderPassed) << '/'
              << res->get_header_value(service::kHeaderInput) << " events passed, " << res->body.size()
              << " bytes written to " << target << '\n';
    return 0;
  }

  query::MinimalSets sets;
  if (!minimal_path.empty()) sets = query::load_minimal_sets(minimal_path);
  auto source = open_source(join_locator(storage, q.input));
  const auto header = colfmt::read_header(*source);
  const auto plan = query::plan_skim(q, header, sets);
  for (const auto& w : plan.branches.warnings) std::cerr << "warning: " << w << '\n';
  TimingSink timing;
  PrefetchCache cache(*source, header, {}, &timing);
  colfmt::FileSink sink(target);
  engine::RunOptions options;
  options.timing = &timing;
  const auto result = naive ? engine::run_naive(header, plan, cache, sink, {}, options)
                            : engine::run_skim(header, plan, cache, sink, options);
  sink.close();
  std::cout << result.n_passed << '/' << result.n_input << " events passed, " << result.output_bytes
            << " bytes written to " << target << " (" << source->requests() << " reads, "
            << source->bytes_fetched() << " bytes fetched, " << result.timing.total_wall << " s)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"skimlite: columnar event skimming near storage"};
  app.require_subcommand(1);

  // inspect
  std::string inspect_path;
  bool inspect_baskets = false;
  auto* inspect = app.add_subcommand("inspect", "Print a dataset header as JSON");
  inspect->add_option("path", inspect_path, "File path or http:// URL")->required();
  inspect->add_flag("--baskets", inspect_baskets, "Include the per-basket map");

  // serve
  ServeConfig serve_cfg;
  long serve_latency_us = 0;
  auto* serve_cmd = app.add_subcommand("serve", "Serve a directory over HTTP range requests");
  serve_cmd->add_option("--root", serve_cfg.root, "Directory to serve")->required()->check(CLI::ExistingDirectory);
  std::string serve_listen = "127.0.0.1:8080";
  serve_cmd->add_option("--listen", serve_listen, "HOST:PORT to bind")->capture_default_str();
  serve_cmd->add_option("--rate", serve_cfg.rate, "Per-connection throttle, bytes/s (0 = off)")->capture_default_str();
  serve_cmd->add_option("--latency-us", serve_latency_us, "Modeled storage access latency per read")
      ->capture_default_str();
  serve_cmd->add_option("--threads", serve_cfg.threads, "Worker threads")->capture_default_str();

  // skimd
  service::DaemonConfig daemon_cfg;
  long daemon_latency_us = 0;
  double daemon_cache_mib = 100;
  auto* skimd = app.add_subcommand("skimd", "Run the near-storage skim daemon");
  skimd->add_option("--storage", daemon_cfg.storage, "Dataset directory or storage server URL")->required();
  std::string daemon_listen = "127.0.0.1:8081";
  skimd->add_option("--listen", daemon_listen, "HOST:PORT to bind")->capture_default_str();
  skimd->add_option("--minimal-sets", daemon_cfg.minimal_sets_path, "Wildcard minimal-set JSON");
  skimd->add_option("--workers", daemon_cfg.workers, "Concurrent skim jobs")->capture_default_str();
  skimd->add_option("--rate", daemon_cfg.rate, "Response throttle, bytes/s (0 = off)")->capture_default_str();
  skimd->add_option("--latency-us", daemon_latency_us, "Storage access latency for directory storage")
      ->capture_default_str();
  skimd->add_option("--cache-mib", daemon_cache_mib, "Prefetch cache budget")->capture_default_str();

  // gen
  std::string gen_spec_path, gen_out, gen_codec;
  std::uint64_t gen_events = 0, gen_seed = 0;
  bool gen_reference = false;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  gen->add_option("--spec", gen_spec_path, "GenSpec JSON (defaults when omitted)")->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "Output file")->required();
  gen->add_option("--events", gen_events, "Override n_events");
  gen->add_option("--seed", gen_seed, "Override seed");
  gen->add_option("--codec", gen_codec, "Override codec (none, lz4, deflate)");
  gen->add_flag("--reference", gen_reference,
                "Also write query.json and minimal_sets.json for the reference analysis next to the file");

  // bench
  std::string bench_query, bench_modes = "all", bench_report, bench_storage, bench_minimal, bench_work;
  std::vector<double> bench_rates{10e6};
  long bench_latency_us = 1000;
  double bench_cache_mib = 100;
  bool bench_no_cache = false;
  auto* bench_cmd = app.add_subcommand("bench", "Compare the four filtering modes");
  bench_cmd->add_option("--query", bench_query, "Query JSON")->required()->check(CLI::ExistingFile);
  bench_cmd->add_option("--modes", bench_modes, "Comma-separated modes or 'all'")->capture_default_str();
  bench_cmd->add_option("--rate", bench_rates, "Client-link rate(s), bytes/s; comma separated for a sweep")
      ->delimiter(',')
      ->capture_default_str();
  bench_cmd->add_option("--report", bench_report, "Report directory")->required();
  bench_cmd->add_option("--storage", bench_storage, "Directory holding the input (default: query file's directory)");
  bench_cmd->add_option("--minimal-sets", bench_minimal, "Wildcard minimal-set JSON");
  bench_cmd->add_option("--work", bench_work, "Client output directory (default: <report>/outputs)");
  bench_cmd->add_option("--latency-us", bench_latency_us, "Storage access latency per read")->capture_default_str();
  bench_cmd->add_option("--cache-mib", bench_cache_mib, "Prefetch cache budget")->capture_default_str();
  bench_cmd->add_flag("--no-client-cache", bench_no_cache, "Disable the prefetch cache in client modes");

  // skim
  std::string skim_query, skim_storage, skim_minimal, skim_out, skim_daemon;
  bool skim_naive = false;
  auto* skim = app.add_subcommand("skim", "Run one query locally, over HTTP, or through a daemon");
  skim->add_option("--query", skim_query, "Query JSON")->required()->check(CLI::ExistingFile);
  skim->add_option("--storage", skim_storage, "Directory or URL the query's input is relative to");
  skim->add_option("--minimal-sets", skim_minimal, "Wildcard minimal-set JSON");
  skim->add_option("--out", skim_out, "Output path (default: the query's output)");
  skim->add_option("--daemon", skim_daemon, "Send the query to a skim daemon at this URL");
  skim->add_flag("--naive", skim_naive, "Single-phase baseline instead of the two-phase engine");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*inspect) return cmd_inspect(inspect_path, inspect_baskets);

    if (*serve_cmd) {
      std::tie(serve_cfg.host, serve_cfg.port) = parse_listen(serve_listen);
      serve_cfg.storage.access_latency = std::chrono::microseconds(serve_latency_us);
      StorageServer server(serve_cfg);
      std::signal(SIGPIPE, SIG_IGN);
      std::cerr << "serving " << serve_cfg.root << '\n';
      server.run();
      return 0;
    }

    if (*skimd) {
      std::tie(daemon_cfg.host, daemon_cfg.port) = parse_listen(daemon_listen);
      daemon_cfg.storage_model.access_latency = std::chrono::microseconds(daemon_latency_us);
      daemon_cfg.cache.byte_budget = static_cast<std::uint64_t>(daemon_cache_mib * 1024 * 1024);
      std::signal(SIGPIPE, SIG_IGN);
      service::SkimDaemon daemon(daemon_cfg);
      daemon.run();
      return 0;
    }

    if (*gen) {
      auto spec = gen_spec_path.empty() ? bench::GenSpec{} : bench::parse_gen_spec(read_text(gen_spec_path));
      if (gen_events) spec.n_events = gen_events;
      if (gen->count("--seed")) spec.seed = gen_seed;
      if (!gen_codec.empty()) {
        const auto c = codec_from_name(gen_codec);
        if (!c) throw Error("unknown codec '" + gen_codec + "'");
        spec.codec = *c;
      }
      const auto header = bench::generate(spec, gen_out);
      std::cout << "wrote " << gen_out << ": " << header.n_events << " events, " << header.branches.size()
                << " branches, " << fs::file_size(gen_out) << " bytes\n";
      if (gen_reference) {
        const auto dir = fs::path(gen_out).parent_path();
        const auto name = fs::path(gen_out).filename().string();
        write_text((dir / "query.json").string(), bench::reference_query_json(name, "skim_" + name));
        write_text((dir / "minimal_sets.json").string(), bench::reference_minimal_sets_json());
      }
      return 0;
    }

    if (*bench_cmd) {
      std::signal(SIGPIPE, SIG_IGN);
      const auto modes = bench::parse_modes(bench_modes);
      std::vector<bench::ModeReport> rows;
      for (double rate : bench_rates) {
        bench::BenchConfig cfg;
        cfg.query_json = read_text(bench_query);
        cfg.storage_dir = bench_storage.empty() ? fs::absolute(bench_query).parent_path().string() : bench_storage;
        cfg.work_dir = bench_work.empty() ? (fs::path(bench_report) / "outputs").string() : bench_work;
        cfg.minimal_sets_path = bench_minimal;
        cfg.rate = rate;
        cfg.storage.access_latency = std::chrono::microseconds(bench_latency_us);
        cfg.cache.byte_budget = static_cast<std::uint64_t>(bench_cache_mib * 1024 * 1024);
        cfg.client_cache = !bench_no_cache;
        bench::BenchHarness harness(cfg);
        for (auto m : modes) {
          std::cerr << "running " << bench::mode_name(m) << " at " << rate / 1e6 << " MB/s\n";
          rows.push_back(harness.run(m));
        }
      }
      bench::write_report(rows, bench_report);
      std::cout << bench::report_table(rows);
      for (const auto& r : rows) {
        if (r.output_sha256 != rows.front().output_sha256 || r.n_passed != rows.front().n_passed) {
          std::cerr << "error: modes disagree on the filtered output\n";
          return 1;
        }
      }
      return 0;
    }

    if (*skim) return cmd_skim(skim_query, skim_storage, skim_minimal, skim_out, skim_daemon, skim_naive);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
