#include <gtest/gtest.h>
#include <httplib.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <random>

#include "oracle.hpp"
#include "skimlite/colfmt.hpp"
#include "skimlite/error.hpp"
#include "skimlite/transport.hpp"

using namespace skimlite;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Bytes random_bytes(std::mt19937_64& rng, std::size_t n) {
  Bytes b(n);
  for (auto& x : b) x = static_cast<std::uint8_t>(rng());
  return b;
}

struct Dataset {
  colfmt::DatasetHeader header;
  Bytes bytes;
};

Dataset make_dataset(std::uint64_t seed, std::uint64_t n_events, std::uint64_t target,
                     Codec codec = Codec::lz4) {
  std::mt19937_64 rng(seed);
  oracle::TableOptions o;
  o.n_events = n_events;
  auto t = oracle::random_table(rng, o);
  colfmt::MemorySink sink;
  auto h = colfmt::write_dataset(t.schema, t.columns, colfmt::WriteOptions{target, codec}, sink);
  return {std::move(h), sink.take()};
}

// A single f64 branch of `n_baskets` baskets, stored uncompressed.
Dataset one_branch(std::size_t n_baskets) {
  std::vector<colfmt::BranchSchema> schema = {{"x", colfmt::BranchKind::scalar, colfmt::ValueType::f64, ""}};
  std::vector<double> v(n_baskets * 4);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  std::vector<colfmt::ColumnValues> cols = {v};
  colfmt::MemorySink sink;
  auto h = colfmt::write_dataset(schema, cols, colfmt::WriteOptions{32, Codec::none}, sink);
  return {std::move(h), sink.take()};
}

Bytes basket_bytes(const Dataset& d, std::size_t branch, std::size_t basket) {
  const auto& r = d.header.branches[branch].baskets[basket];
  return Bytes(d.bytes.begin() + static_cast<std::ptrdiff_t>(r.file_offset),
               d.bytes.begin() + static_cast<std::ptrdiff_t>(r.file_offset + r.compressed_len));
}

std::vector<std::size_t> all_branches(const colfmt::DatasetHeader& h) {
  std::vector<std::size_t> v(h.branches.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
  return v;
}

class ServedDir : public ::testing::Test {
 protected:
  void SetUp() override {
    std::mt19937_64 rng(99);
    data_ = random_bytes(rng, 300000);
    data_[0] = 'S';
    oracle::write_file(dir_.file("blob.bin"), data_);
    ServeConfig cfg;
    cfg.root = dir_.path();
    server_ = std::make_unique<StorageServer>(cfg);
    server_->start();
  }
  void TearDown() override { server_->stop(); }

  oracle::TempDir dir_;
  Bytes data_;
  std::unique_ptr<StorageServer> server_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Sources

TEST(Sources, LocalFullRangeAndBounds) {
  oracle::TempDir dir;
  std::mt19937_64 rng(1);
  const auto data = random_bytes(rng, 5000);
  oracle::write_file(dir.file("f"), data);
  LocalFileSource src(dir.file("f"));
  EXPECT_EQ(src.size(), 5000u);
  EXPECT_EQ(range_get(src, 0, 5000), data);
  EXPECT_THROW(src.read(4999, 2), TransportError);
  EXPECT_THROW(src.read(6000, 1), TransportError);
  EXPECT_THROW(LocalFileSource(dir.file("missing")), NotFoundError);
}

TEST(Sources, CountersAreExact) {
  std::mt19937_64 rng(2);
  MemorySource src(random_bytes(rng, 10000));
  std::uint64_t bytes = 0;
  for (int i = 0; i < 500; ++i) {
    const auto off = rng() % 10000;
    const auto len = 1 + rng() % (10000 - off);
    src.read(off, len);
    bytes += len;
    ASSERT_EQ(src.requests(), static_cast<std::uint64_t>(i + 1));
    ASSERT_EQ(src.bytes_fetched(), bytes);
  }
  // An empty range is answered without touching the source.
  EXPECT_TRUE(src.read(10, 0).empty());
  EXPECT_EQ(src.requests(), 500u);
}

TEST(Sources, StorageModelChargesLatencyPerRead) {
  oracle::TempDir dir;
  oracle::write_file(dir.file("f"), Bytes(1000, 7));
  LocalFileSource src(dir.file("f"), StorageModel{std::chrono::microseconds(5000)});
  const auto t0 = Clock::now();
  for (int i = 0; i < 10; ++i) src.read(static_cast<std::uint64_t>(i) * 10, 10);
  EXPECT_GE(seconds_since(t0), 0.045);
}

TEST(Sources, UrlParsing) {
  auto u = HttpUrl::parse("http://example.org:9000/data/a.skim");
  EXPECT_EQ(u.host, "example.org");
  EXPECT_EQ(u.port, 9000);
  EXPECT_EQ(u.path, "/data/a.skim");
  EXPECT_EQ(u.str(), "http://example.org:9000/data/a.skim");
  EXPECT_EQ(HttpUrl::parse("http://h").path, "/");
  EXPECT_EQ(HttpUrl::parse("http://h/x").port, 80);
  EXPECT_THROW(HttpUrl::parse("ftp://h/x"), TransportError);
  EXPECT_THROW(HttpUrl::parse("http://h:notaport/x"), TransportError);
}

TEST_F(ServedDir, HttpMatchesLocalOnRandomRanges) {
  HttpRangeSource http(server_->url() + "/blob.bin");
  LocalFileSource local(dir_.file("blob.bin"));
  ASSERT_EQ(http.size(), local.size());
  EXPECT_EQ(http.requests(), 0u);  // the HEAD is not a range request
  std::mt19937_64 rng(3);
  std::uint64_t bytes = 0;
  for (int i = 0; i < 200; ++i) {
    const auto off = rng() % data_.size();
    const auto len = 1 + rng() % std::min<std::uint64_t>(data_.size() - off, 20000);
    ASSERT_EQ(http.read(off, len), local.read(off, len)) << off << "+" << len;
    bytes += len;
  }
  EXPECT_EQ(http.requests(), 200u);
  EXPECT_EQ(http.bytes_fetched(), bytes);
  EXPECT_THROW(http.read(data_.size() - 1, 2), TransportError);
}

TEST_F(ServedDir, ProtocolBasics) {
  httplib::Client cli("127.0.0.1", server_->port());
  auto head = cli.Head("/blob.bin");
  ASSERT_TRUE(head);
  EXPECT_EQ(head->status, 200);
  EXPECT_EQ(head->get_header_value("Content-Length"), std::to_string(data_.size()));

  auto first = cli.Get("/blob.bin", {{"Range", "bytes=0-7"}});
  ASSERT_TRUE(first);
  EXPECT_EQ(first->status, 206);
  EXPECT_EQ(first->body, std::string(data_.begin(), data_.begin() + 8));

  auto missing = cli.Get("/nope.bin", {{"Range", "bytes=0-7"}});
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);

  auto escape = cli.Get("/../blob.bin");
  ASSERT_TRUE(escape);
  EXPECT_EQ(escape->status, 404);

  const auto past = "bytes=" + std::to_string(data_.size()) + "-" + std::to_string(data_.size() + 10);
  auto bad = cli.Get("/blob.bin", {{"Range", past}});
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 416);

  EXPECT_THROW(HttpRangeSource(server_->url() + "/nope.bin"), NotFoundError);
}

TEST_F(ServedDir, OpenSourceDispatch) {
  auto remote = open_source(server_->url() + "/blob.bin");
  EXPECT_FALSE(remote->is_local());
  auto local = open_source(dir_.file("blob.bin"));
  EXPECT_TRUE(local->is_local());
  EXPECT_EQ(remote->read(100, 50), local->read(100, 50));
}

TEST(Sources, UnreachableServer) {
  // Bind a port without listening, so connections are refused.
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  ASSERT_EQ(::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr), 0);
  socklen_t len = sizeof addr;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  const int port = ntohs(addr.sin_port);
  EXPECT_THROW(HttpRangeSource("http://127.0.0.1:" + std::to_string(port) + "/x"), TransportError);
  ::close(fd);
}

// ---------------------------------------------------------------------------
// Prefetch cache

TEST(Cache, TenContiguousBasketsOneRequest) {
  auto d = one_branch(10);
  ASSERT_EQ(d.header.branches[0].baskets.size(), 10u);
  MemorySource mem(d.bytes);
  oracle::RecordingSource src(mem, true);
  PrefetchCache cache(src, d.header);
  ASSERT_TRUE(cache.active());
  cache.prefetch_window({0}, 0, d.header.n_events);
  EXPECT_EQ(src.requests(), 1u);
  for (std::size_t b = 0; b < 10; ++b) EXPECT_EQ(*cache.get_basket(0, b), basket_bytes(d, 0, b));
  EXPECT_EQ(src.requests(), 1u);
  EXPECT_EQ(cache.stats().hits, 10u);
}

TEST(Cache, OneRunPerBranch) {
  auto d = make_dataset(4, 3000, 512);
  MemorySource mem(d.bytes);
  oracle::RecordingSource src(mem, true);
  PrefetchCache cache(src, d.header);
  const auto branches = all_branches(d.header);
  cache.prefetch_window(branches, 0, d.header.n_events);
  EXPECT_EQ(src.requests(), branches.size());
  // Every basket now resident; reading them all costs nothing more.
  for (auto br : branches)
    for (std::size_t b = 0; b < d.header.branches[br].baskets.size(); ++b)
      ASSERT_EQ(*cache.get_basket(br, b), basket_bytes(d, br, b));
  EXPECT_EQ(src.requests(), branches.size());
}

TEST(Cache, WantedMaskSplitsRuns) {
  auto d = one_branch(12);
  MemorySource mem(d.bytes);
  oracle::RecordingSource src(mem, true);
  PrefetchCache cache(src, d.header);
  //           0  1  2  3  4  5  6  7  8  9  10 11
  cache.set_wanted(0, {1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 1});
  cache.prefetch_window({0}, 0, d.header.n_events);
  EXPECT_EQ(src.requests(), 4u);
  const auto touched = oracle::baskets_touched(d.header, src.reads());
  EXPECT_EQ(touched, (std::set<std::pair<std::size_t, std::size_t>>{
                         {0, 0}, {0, 1}, {0, 3}, {0, 6}, {0, 7}, {0, 8}, {0, 11}}));
}

TEST(Cache, SecondAccessIsAHit) {
  auto d = make_dataset(5, 1000, 256);
  MemorySource mem(d.bytes);
  oracle::RecordingSource src(mem, true);
  PrefetchCache cache(src, d.header);
  cache.set_enabled({0});
  cache.get_basket(0, 0);
  const auto before = src.requests();
  EXPECT_GT(before, 0u);
  EXPECT_EQ(*cache.get_basket(0, 0), basket_bytes(d, 0, 0));
  EXPECT_EQ(src.requests(), before);
}

TEST(Cache, DisabledIsOneRequestPerAccess) {
  auto d = make_dataset(6, 1000, 256);
  MemorySource mem(d.bytes);
  oracle::RecordingSource src(mem, true);
  PrefetchCache cache(src, d.header, CacheConfig{100 << 20, false, false});
  EXPECT_FALSE(cache.active());
  cache.set_enabled(all_branches(d.header));
  std::uint64_t n = 0;
  for (int round = 0; round < 2; ++round)
    for (std::size_t b = 0; b < d.header.branches[0].baskets.size(); ++b) {
      ASSERT_EQ(*cache.get_basket(0, b), basket_bytes(d, 0, b));
      ASSERT_EQ(src.requests(), ++n);
    }
  cache.prefetch_window({0}, 0, d.header.n_events);
  EXPECT_EQ(src.requests(), n);
}

TEST(Cache, LocalSourcesBypassUnlessOverridden) {
  auto d = make_dataset(7, 1000, 256);
  MemorySource mem(d.bytes);
  oracle::RecordingSource local(mem, false);
  PrefetchCache bypass(local, d.header);
  EXPECT_FALSE(bypass.active());
  bypass.set_enabled(all_branches(d.header));
  for (std::size_t b = 0; b < d.header.branches[1].baskets.size(); ++b) bypass.get_basket(1, b);
  EXPECT_EQ(local.requests(), d.header.branches[1].baskets.size());

  oracle::RecordingSource local2(mem, false);
  PrefetchCache coalescing(local2, d.header, CacheConfig{100 << 20, true, true});
  EXPECT_TRUE(coalescing.active());
  coalescing.set_enabled({1});
  for (std::size_t b = 0; b < d.header.branches[1].baskets.size(); ++b) coalescing.get_basket(1, b);
  EXPECT_EQ(local2.requests(), 1u);
}

TEST(Cache, BudgetLawAndTransparency) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 40; ++trial) {
    auto d = make_dataset(100 + static_cast<std::uint64_t>(trial), 2000, 64 + rng() % 1024);
    std::uint64_t largest = 0;
    for (const auto& br : d.header.branches)
      for (const auto& r : br.baskets) largest = std::max(largest, r.compressed_len);
    // Includes budgets smaller than a single basket (degraded on-demand path).
    const std::uint64_t budget = trial % 5 == 0 ? largest / 2 + 1 : largest + rng() % (8 * largest);
    MemorySource mem(d.bytes);
    oracle::RecordingSource src(mem, true);
    PrefetchCache cache(src, d.header, CacheConfig{budget, true, false});
    const auto n_br = d.header.branches.size();
    std::vector<std::size_t> enabled;
    for (std::size_t i = 0; i < n_br; ++i)
      if (rng() % 2) enabled.push_back(i);
    cache.set_enabled(enabled);
    for (int op = 0; op < 400; ++op) {
      const auto br = rng() % n_br;
      const auto& meta = d.header.branches[br];
      if (rng() % 8 == 0) {
        const auto a = rng() % d.header.n_events;
        cache.prefetch_window({br}, a, a + rng() % 300);
      } else {
        const auto b = rng() % meta.baskets.size();
        ASSERT_EQ(*cache.get_basket(br, b), basket_bytes(d, br, b)) << "trial " << trial;
      }
      ASSERT_LE(cache.stats().resident_bytes, budget) << "trial " << trial << " op " << op;
    }
    // Accounting: requested bytes match the recorded reads.
    std::uint64_t sum = 0;
    for (const auto& r : src.reads()) sum += r.second;
    EXPECT_EQ(src.bytes_fetched(), sum);
  }
}

TEST(Cache, SequentialScanFewerRequestsThanUncached) {
  auto d = make_dataset(9, 20000, 1024);
  const auto branches = all_branches(d.header);
  const auto scan = [&](bool enabled) {
    MemorySource mem(d.bytes);
    oracle::RecordingSource src(mem, true);
    PrefetchCache cache(src, d.header, CacheConfig{64 * 1024, enabled, false});
    cache.set_enabled(branches);
    for (std::uint64_t e = 0; e < d.header.n_events; e += 97)
      for (auto br : branches) {
        const auto& meta = d.header.branches[br];
        cache.get_basket(br, colfmt::locate_basket(meta, d.header.n_events, e));
      }
    return std::make_pair(src.requests(), cache.stats().hit_rate());
  };
  const auto [with, hit_rate] = scan(true);
  const auto [without, unused] = scan(false);
  (void)unused;
  EXPECT_LT(with * 5, without);
  EXPECT_GT(hit_rate, 0.9);
}

// ---------------------------------------------------------------------------
// Throttle

TEST(Throttle, RateAndWindowBound) {
  const double rate = 2e6;
  Throttle t(rate);
  std::vector<std::pair<double, std::uint64_t>> sent;
  const auto t0 = Clock::now();
  const std::uint64_t chunk = 16 * 1024;
  std::uint64_t total = 0;
  while (total < 3'000'000) {
    t.consume(chunk);
    total += chunk;
    sent.emplace_back(seconds_since(t0), chunk);
  }
  const double elapsed = seconds_since(t0);
  const double ideal = static_cast<double>(total - Throttle::kDefaultBurst) / rate;
  EXPECT_NEAR(elapsed, ideal, ideal * 0.15);
  // Any window of at least one second stays under 1.1x the rate.
  for (std::size_t i = 0; i < sent.size(); ++i) {
    std::uint64_t bytes = 0;
    for (std::size_t j = i; j < sent.size(); ++j) {
      bytes += sent[j].second;
      const double window = sent[j].first - sent[i].first;
      if (window >= 1.0) {
        ASSERT_LE(static_cast<double>(bytes) / window, 1.1 * rate);
      }
    }
  }
  EXPECT_THROW(Throttle(0), Error);
}

TEST(Throttle, ServedTransferRate) {
  oracle::TempDir dir;
  oracle::write_file(dir.file("big"), Bytes(3'000'000, 1));
  ServeConfig cfg;
  cfg.root = dir.path();
  cfg.rate = 2e6;
  StorageServer server(cfg);
  server.start();
  HttpRangeSource src(server.url() + "/big");
  const auto t0 = Clock::now();
  auto got = src.read(0, 3'000'000);
  const double elapsed = seconds_since(t0);
  EXPECT_EQ(got.size(), 3'000'000u);
  EXPECT_NEAR(elapsed, 1.5, 1.5 * 0.15);
  EXPECT_EQ(server.bytes_served(), 3'000'000u);
  server.stop();
}
