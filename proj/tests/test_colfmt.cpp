#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "oracle.hpp"
#include "skimlite/bench.hpp"
#include "skimlite/colfmt.hpp"
#include "skimlite/error.hpp"
#include "skimlite/transport.hpp"

using namespace skimlite;
using namespace skimlite::colfmt;

#ifndef SKIMLITE_TEST_DATA
#define SKIMLITE_TEST_DATA "tests/data"
#endif

namespace {

struct Written {
  DatasetHeader header;
  Bytes bytes;
};

Written write(std::span<const BranchSchema> schema, std::span<const ColumnValues> cols,
              std::uint64_t target, Codec codec) {
  MemorySink sink;
  auto h = write_dataset(schema, cols, WriteOptions{target, codec}, sink);
  return {std::move(h), sink.take()};
}

Written write(const oracle::Table& t, std::uint64_t target, Codec codec) {
  return write(t.schema, t.columns, target, codec);
}

void check_branch_invariants(const DatasetHeader& h) {
  std::set<std::string> names;
  for (const auto& b : h.branches) {
    EXPECT_TRUE(names.insert(b.name).second) << "duplicate " << b.name;
    ASSERT_EQ(b.first_event.size(), b.baskets.size());
    if (h.n_events == 0) {
      EXPECT_TRUE(b.baskets.empty());
      continue;
    }
    ASSERT_FALSE(b.baskets.empty()) << b.name;
    // Partition of [0, n_events): contiguous, no gaps, no overlap.
    std::uint64_t next = 0;
    for (std::size_t i = 0; i < b.baskets.size(); ++i) {
      EXPECT_EQ(b.first_event[i], next) << b.name << " basket " << i;
      EXPECT_GT(b.baskets[i].n_entries, 0u);
      EXPECT_GT(b.baskets[i].compressed_len, 0u);
      if (b.baskets[i].codec == Codec::none) {
        EXPECT_EQ(b.baskets[i].compressed_len, b.baskets[i].uncompressed_len);
      }
      EXPECT_EQ(b.basket_end(i, h.n_events) - b.first_event[i], b.baskets[i].n_entries);
      next += b.baskets[i].n_entries;
    }
    EXPECT_EQ(next, h.n_events) << b.name;
    if (b.is_jagged()) {
      auto c = h.find(b.counter_branch);
      ASSERT_TRUE(c.has_value()) << b.name;
      EXPECT_EQ(h.branches[*c].kind, BranchKind::scalar);
      EXPECT_EQ(h.branches[*c].value_type, ValueType::i32);
    }
  }
}

}  // namespace

TEST(Colfmt, EmptyDatasetRoundTrips) {
  std::vector<BranchSchema> schema = {{"a", BranchKind::scalar, ValueType::f32, ""},
                                      {"nX", BranchKind::scalar, ValueType::i32, ""},
                                      {"X_v", BranchKind::jagged, ValueType::f64, "nX"}};
  std::vector<ColumnValues> cols = {std::vector<float>{}, std::vector<std::int32_t>{},
                                    std::vector<double>{}};
  auto w = write(schema, cols, kDefaultBasketTarget, Codec::lz4);
  EXPECT_EQ(w.header.n_events, 0u);
  ASSERT_EQ(w.header.branches.size(), 3u);
  for (const auto& b : w.header.branches) EXPECT_TRUE(b.baskets.empty());
  MemorySource src(w.bytes);
  EXPECT_EQ(read_header(src), w.header);
  check_branch_invariants(w.header);
}

TEST(Colfmt, TenFloatsSixteenByteTarget) {
  std::vector<BranchSchema> schema = {{"x", BranchKind::scalar, ValueType::f32, ""}};
  std::vector<float> v(10);
  for (int i = 0; i < 10; ++i) v[static_cast<std::size_t>(i)] = static_cast<float>(i) * 0.5f;
  std::vector<ColumnValues> cols = {v};
  auto w = write(schema, cols, 16, Codec::none);
  const auto& b = w.header.branches[0];
  EXPECT_EQ(b.first_event, (std::vector<std::uint64_t>{0, 4, 8}));
  EXPECT_EQ(b.baskets[0].n_entries, 4u);
  EXPECT_EQ(b.baskets[2].n_entries, 2u);
  EXPECT_EQ(w.header.basket_target, 16u);
}

TEST(Colfmt, BasketEntryBound) {
  std::mt19937_64 rng(3);
  for (std::uint64_t target : {8ull, 16ull, 100ull, 1000ull}) {
    oracle::TableOptions o;
    o.n_events = 500;
    auto t = oracle::random_table(rng, o);
    auto w = write(t, target, Codec::lz4);
    for (const auto& b : w.header.branches) {
      if (b.is_jagged()) continue;
      const std::uint64_t width = value_width(b.value_type);
      const std::uint64_t cap = (target + width - 1) / width;
      for (const auto& r : b.baskets) EXPECT_LE(r.n_entries, cap) << b.name;
    }
    check_branch_invariants(w.header);
  }
}

TEST(Colfmt, WriteRejectsBadColumns) {
  std::vector<BranchSchema> schema = {{"nX", BranchKind::scalar, ValueType::i32, ""},
                                      {"X_v", BranchKind::jagged, ValueType::f32, "nX"}};
  MemorySink sink;
  // Jagged length does not match the counter sum.
  std::vector<ColumnValues> bad = {std::vector<std::int32_t>{1, 2}, std::vector<float>{1.f, 2.f}};
  EXPECT_ANY_THROW(write_dataset(schema, bad, WriteOptions{}, sink));
  // Scalar lengths disagree.
  std::vector<BranchSchema> two = {{"a", BranchKind::scalar, ValueType::f32, ""},
                                   {"b", BranchKind::scalar, ValueType::f32, ""}};
  std::vector<ColumnValues> uneven = {std::vector<float>{1.f}, std::vector<float>{1.f, 2.f}};
  EXPECT_ANY_THROW(write_dataset(two, uneven, WriteOptions{}, sink));
  // Wrong value type for the schema.
  std::vector<ColumnValues> wrong = {std::vector<double>{1.0}, std::vector<float>{1.f}};
  EXPECT_ANY_THROW(write_dataset(two, wrong, WriteOptions{}, sink));
  // Counter that is not a scalar i32 branch.
  std::vector<BranchSchema> orphan = {{"X_v", BranchKind::jagged, ValueType::f32, "nX"}};
  std::vector<ColumnValues> one = {std::vector<float>{}};
  EXPECT_ANY_THROW(write_dataset(orphan, one, WriteOptions{}, sink));
}

TEST(Colfmt, ReadHeaderEqualsWrittenHeader) {
  std::mt19937_64 rng(11);
  auto t = oracle::random_table(rng, {});
  for (Codec c : {Codec::none, Codec::lz4, Codec::deflate}) {
    auto w = write(t, 256, c);
    MemorySource src(w.bytes);
    EXPECT_EQ(read_header(src), w.header);
  }
}

TEST(Colfmt, ReadHeaderIssuesTwoReads) {
  std::mt19937_64 rng(12);
  auto t = oracle::random_table(rng, {});
  auto w = write(t, 128, Codec::lz4);
  MemorySource mem(w.bytes);
  oracle::RecordingSource rec(mem, true);
  read_header(rec);
  ASSERT_EQ(rec.requests(), 2u);
  EXPECT_EQ(rec.reads()[0], std::make_pair(std::uint64_t{0}, std::uint64_t{kPreambleSize}));
  EXPECT_EQ(rec.reads()[1].first, kPreambleSize);
}

TEST(Colfmt, TruncatedAndCorruptHeaders) {
  MemorySource tiny(Bytes{'S', 'K', 'I', 'M'});
  try {
    read_header(tiny);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos) << e.what();
  }

  std::mt19937_64 rng(13);
  auto t = oracle::random_table(rng, {});
  auto w = write(t, 128, Codec::lz4);

  auto bad_magic = w.bytes;
  bad_magic[0] = 'X';
  MemorySource s1(bad_magic);
  EXPECT_THROW(read_header(s1), FormatError);

  auto bad_version = w.bytes;
  bad_version[8] = 99;
  MemorySource s2(bad_version);
  EXPECT_THROW(read_header(s2), FormatError);

  auto flipped = w.bytes;
  flipped[kPreambleSize + 5] ^= 0x40;
  MemorySource s3(flipped);
  EXPECT_THROW(read_header(s3), FormatError);

  Bytes cut(w.bytes.begin(), w.bytes.begin() + static_cast<std::ptrdiff_t>(kPreambleSize + 10));
  MemorySource s4(cut);
  EXPECT_THROW(read_header(s4), FormatError);
}

TEST(Colfmt, LocateBasketExamples) {
  BranchMeta m;
  m.first_event = {0, 4, 8};
  m.baskets.resize(3);
  EXPECT_EQ(locate_basket(m, 10, 0), 0u);
  EXPECT_EQ(locate_basket(m, 10, 7), 1u);
  EXPECT_EQ(locate_basket(m, 10, 8), 2u);
  EXPECT_EQ(locate_basket(m, 10, 9), 2u);
  EXPECT_ANY_THROW(locate_basket(m, 10, 10));
}

TEST(Colfmt, LocateBasketMatchesLinearScan) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t nb = 1 + rng() % 40;
    BranchMeta m;
    m.baskets.resize(nb);
    std::uint64_t at = 0;
    for (std::size_t i = 0; i < nb; ++i) {
      m.first_event.push_back(at);
      at += 1 + rng() % 50;
    }
    const std::uint64_t n_events = at;
    const std::uint64_t ev = rng() % n_events;
    ASSERT_EQ(locate_basket(m, n_events, ev), oracle::linear_locate(m.first_event, n_events, ev))
        << "trial " << trial;
  }
}

TEST(Colfmt, DecompressBasketNoneIsIdentity) {
  Bytes raw = {1, 2, 3, 4, 5, 6, 7, 8};
  BasketRef ref{0, 8, 8, Codec::none, 2};
  EXPECT_EQ(decompress_basket(raw, ref), raw);
  BasketRef wrong_len{0, 9, 9, Codec::none, 2};
  EXPECT_THROW(decompress_basket(raw, wrong_len), FormatError);
}

TEST(Colfmt, DecompressBasketRoundTripsLz4) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    Bytes in(rng() % 5000);
    for (auto& b : in) b = static_cast<std::uint8_t>(rng() % 7);
    Bytes packed = compress(Codec::lz4, in);
    BasketRef ref{0, packed.size(), in.size(), Codec::lz4, 1};
    EXPECT_EQ(decompress_basket(packed, ref), in);
    // Declaring the wrong codec or size must not silently succeed.
    if (!in.empty()) {
      BasketRef bad{0, packed.size(), in.size() + 1, Codec::lz4, 1};
      EXPECT_THROW(decompress_basket(packed, bad), FormatError);
    }
  }
}

TEST(Colfmt, DeserializeScalarAndJagged) {
  BranchMeta scalar;
  scalar.name = "x";
  scalar.value_type = ValueType::f32;
  scalar.baskets = {BasketRef{0, 16, 16, Codec::none, 4}};
  scalar.first_event = {0};
  Bytes payload(16);
  const float vals[4] = {1.f, -2.f, 3.5f, 0.25f};
  std::memcpy(payload.data(), vals, 16);
  auto s = deserialize_column(payload, scalar, 0);
  ASSERT_EQ(values_size(s.values), 4u);
  EXPECT_EQ(std::get<std::vector<float>>(s.values), std::vector<float>(vals, vals + 4));
  EXPECT_TRUE(s.event_offsets.empty());
  auto one = event_values(s, 2);
  ASSERT_EQ(span_size(one), 1u);
  EXPECT_EQ(span_at(one, 0), 3.5);

  Bytes short_payload(12);
  EXPECT_THROW(deserialize_column(short_payload, scalar, 0), FormatError);

  // Counts [2,0,1]: offsets [0,2,2,3] then three i32 values.
  BranchMeta jag;
  jag.name = "J_v";
  jag.kind = BranchKind::jagged;
  jag.value_type = ValueType::i32;
  jag.counter_branch = "nJ";
  jag.baskets = {BasketRef{0, 28, 28, Codec::none, 3}};
  jag.first_event = {0};
  const std::uint32_t offs[4] = {0, 2, 2, 3};
  const std::int32_t jv[3] = {7, 8, 9};
  Bytes jp(28);
  std::memcpy(jp.data(), offs, 16);
  std::memcpy(jp.data() + 16, jv, 12);
  auto j = deserialize_column(jp, jag, 0);
  EXPECT_EQ(j.event_offsets, (std::vector<std::uint32_t>{0, 2, 2, 3}));
  EXPECT_EQ(span_size(event_values(j, 0)), 2u);
  EXPECT_EQ(span_size(event_values(j, 1)), 0u);
  EXPECT_EQ(span_at(event_values(j, 2), 0), 9.0);
  EXPECT_ANY_THROW(event_values(j, 3));

  // Offsets going backwards.
  const std::uint32_t back[4] = {0, 2, 1, 3};
  std::memcpy(jp.data(), back, 16);
  EXPECT_THROW(deserialize_column(jp, jag, 0), FormatError);
  // Last offset disagreeing with the value count.
  const std::uint32_t over[4] = {0, 2, 2, 4};
  std::memcpy(jp.data(), over, 16);
  EXPECT_THROW(deserialize_column(jp, jag, 0), FormatError);
  // First offset not zero.
  const std::uint32_t shifted[4] = {1, 2, 2, 3};
  std::memcpy(jp.data(), shifted, 16);
  EXPECT_THROW(deserialize_column(jp, jag, 0), FormatError);
}

TEST(Colfmt, RoundTripRandomTablesAllCodecs) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 12; ++trial) {
    oracle::TableOptions o;
    o.n_events = rng() % 3000;
    o.n_scalars = 1 + static_cast<int>(rng() % 5);
    o.n_collections = static_cast<int>(rng() % 3);
    o.fields_per_collection = 1 + static_cast<int>(rng() % 4);
    o.mean_multiplicity = 0.5 + static_cast<double>(rng() % 40) / 10.0;
    o.special_floats = trial % 2 == 0;
    auto t = oracle::random_table(rng, o);
    const std::uint64_t target = 8 + rng() % 4096;
    for (Codec c : {Codec::none, Codec::lz4, Codec::deflate}) {
      auto w = write(t, target, c);
      check_branch_invariants(w.header);
      MemorySource src(w.bytes);
      auto h = read_header(src);
      ASSERT_EQ(h, w.header);
      for (std::size_t b = 0; b < t.schema.size(); ++b) {
        auto slice = read_branch(src, h, t.schema[b].name);
        ASSERT_TRUE(oracle::same_values(slice.values, t.columns[b]))
            << "trial " << trial << " codec " << codec_name(c) << " branch " << t.schema[b].name;
        EXPECT_EQ(slice.n_entries, t.n_events);
        if (t.schema[b].kind == BranchKind::jagged) {
          ASSERT_EQ(slice.event_offsets.size(), t.n_events + 1);
          for (std::uint64_t e = 0; e <= t.n_events; ++e)
            ASSERT_EQ(slice.event_offsets[e], t.offsets[b][e]);
        }
      }
    }
  }
}

TEST(Colfmt, HeaderIndependence) {
  std::mt19937_64 rng(41);
  oracle::TableOptions o;
  o.n_events = 2000;
  auto t = oracle::random_table(rng, o);
  auto w = write(t, 200, Codec::lz4);
  MemorySource mem(w.bytes);
  const std::uint64_t header_end = kPreambleSize + w.header.header_length;
  for (const auto& branch : w.header.branches) {
    oracle::RecordingSource rec(mem, true);
    rec.set_guard([&](std::uint64_t off, std::uint64_t len) {
      if (off + len <= header_end) return;
      for (const auto& r : branch.baskets)
        if (off >= r.file_offset && off + len <= r.file_offset + r.compressed_len) return;
      throw std::runtime_error("read outside header and " + branch.name);
    });
    auto h = read_header(rec);
    auto slice = read_branch(rec, h, branch.name);
    auto idx = static_cast<std::size_t>(t.index(branch.name));
    EXPECT_TRUE(oracle::same_values(slice.values, t.columns[idx])) << branch.name;
  }
}

TEST(Colfmt, GeneratorRoundTrip) {
  bench::GenSpec spec;
  spec.n_events = 100000;
  spec.codec = Codec::lz4;
  auto data = bench::generate_columns(spec);
  ASSERT_GE(data.schema.size(), 200u);
  auto w = write(data.schema, data.columns, spec.basket_target, spec.codec);
  MemorySource src(w.bytes);
  auto h = read_header(src);
  EXPECT_EQ(h.n_events, 100000u);
  check_branch_invariants(h);

  std::mt19937_64 rng(51);
  for (std::size_t b = 0; b < data.schema.size(); ++b) {
    auto slice = read_branch(src, h, data.schema[b].name);
    ASSERT_TRUE(oracle::same_values(slice.values, data.columns[b])) << data.schema[b].name;
    // event_values agrees with direct indexing of the generator stream.
    for (int k = 0; k < 20; ++k) {
      const std::uint64_t ev = rng() % h.n_events;
      auto got = event_values(slice, ev);
      std::size_t begin = ev, end = ev + 1;
      if (data.schema[b].kind == BranchKind::jagged) {
        begin = slice.event_offsets[ev];
        end = slice.event_offsets[ev + 1];
        auto counter = static_cast<std::size_t>(*h.find(data.schema[b].counter_branch));
        ASSERT_EQ(end - begin,
                  static_cast<std::size_t>(std::get<std::vector<std::int32_t>>(data.columns[counter])[ev]));
      }
      ASSERT_EQ(span_size(got), end - begin);
      for (std::size_t i = begin; i < end; ++i) {
        const double want = std::visit([&](const auto& v) { return static_cast<double>(v[i]); },
                                       data.columns[b]);
        const double have = span_at(got, i - begin);
        ASSERT_TRUE(have == want || (have != have && want != want)) << data.schema[b].name;
      }
    }
  }
}

TEST(Colfmt, GoldenDeflateFile) {
  const auto bytes = oracle::read_file(std::string(SKIMLITE_TEST_DATA) + "/golden_deflate.skim");
  MemorySource src(bytes);
  auto h = read_header(src);
  EXPECT_EQ(h.n_events, 5u);
  EXPECT_EQ(h.basket_target, 16u);
  ASSERT_EQ(h.branches.size(), 3u);
  for (const auto& b : h.branches)
    for (const auto& r : b.baskets) EXPECT_EQ(r.codec, Codec::deflate);

  const auto& x = h.branch("x");
  ASSERT_EQ(x.baskets.size(), 2u);
  auto raw = src.read(x.baskets[0].file_offset, x.baskets[0].compressed_len);
  auto payload = decompress_basket(raw, x.baskets[0]);
  const float first4[4] = {1.5f, -2.25f, 3.0f, 4.75f};
  ASSERT_EQ(payload.size(), 16u);
  EXPECT_EQ(std::memcmp(payload.data(), first4, 16), 0);

  EXPECT_EQ(std::get<std::vector<float>>(read_branch(src, h, "x").values),
            (std::vector<float>{1.5f, -2.25f, 3.0f, 4.75f, 1000.0f}));
  EXPECT_EQ(std::get<std::vector<std::int32_t>>(read_branch(src, h, "nJ").values),
            (std::vector<std::int32_t>{2, 0, 1, 3, 0}));
  auto jv = read_branch(src, h, "J_v");
  EXPECT_EQ(std::get<std::vector<std::int32_t>>(jv.values),
            (std::vector<std::int32_t>{10, 20, 30, 40, 50, 60}));
  EXPECT_EQ(jv.event_offsets, (std::vector<std::uint32_t>{0, 2, 2, 3, 6, 6}));
}
