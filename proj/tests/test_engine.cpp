#include <gtest/gtest.h>

#include <random>

#include "oracle.hpp"
#include "skimlite/bench.hpp"
#include "skimlite/engine.hpp"
#include "skimlite/error.hpp"
#include "skimlite/query.hpp"

using namespace skimlite;
using engine::RunPhase;

namespace {

struct Input {
  colfmt::DatasetHeader header;
  Bytes bytes;
};

Input write_table(const oracle::Table& t, std::uint64_t target, Codec codec) {
  colfmt::MemorySink sink;
  auto h = colfmt::write_dataset(t.schema, t.columns, colfmt::WriteOptions{target, codec}, sink);
  return {std::move(h), sink.take()};
}

struct SkimRun {
  engine::SkimResult result;
  Bytes output;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> selection_reads;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> output_reads;
  std::uint64_t requests = 0;
  query::SkimPlan plan;
};

struct RunSpec {
  bool naive = false;
  bool remote = true;
  bool cache = true;
  std::uint64_t budget = 100ull << 20;
  bool guard_phase_one = true;
  bool stage_masks = false;
};

SkimRun run(const Input& in, const std::string& query_json, const RunSpec& spec) {
  SkimRun r;
  MemorySource mem(in.bytes);
  oracle::RecordingSource src(mem, spec.remote);
  const auto header = colfmt::read_header(src);
  r.plan = query::plan_skim(query::parse_query(query_json), header, {});

  // Byte ranges of output-only baskets: phase one must never touch them.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> forbidden;
  for (auto br : r.plan.output_only)
    for (const auto& ref : header.branches[br].baskets)
      forbidden.emplace_back(ref.file_offset, ref.file_offset + ref.compressed_len);

  RunPhase phase = RunPhase::selection;
  src.set_guard([&](std::uint64_t off, std::uint64_t len) {
    if (phase != RunPhase::selection || !spec.guard_phase_one || spec.naive) return;
    for (const auto& [a, b] : forbidden)
      if (off < b && a < off + len) throw std::runtime_error("phase one read an output-only basket");
  });
  src.clear();

  PrefetchCache cache(src, header, CacheConfig{spec.budget, spec.cache, false});
  colfmt::MemorySink sink;
  engine::RunOptions opts;
  opts.record_stage_masks = spec.stage_masks;
  std::size_t split = 0;
  opts.on_phase = [&](RunPhase p) {
    if (p == RunPhase::output) split = src.reads().size();
    phase = p;
  };
  r.result = spec.naive ? engine::run_naive(header, r.plan, cache, sink, {}, opts)
                        : engine::run_skim(header, r.plan, cache, sink, opts);
  if (phase == RunPhase::selection) split = src.reads().size();
  r.selection_reads.assign(src.reads().begin(), src.reads().begin() + static_cast<std::ptrdiff_t>(split));
  r.output_reads.assign(src.reads().begin() + static_cast<std::ptrdiff_t>(split), src.reads().end());
  r.requests = src.requests();
  r.output = sink.take();
  return r;
}

// Checks a run's output file against the brute-force oracle.
void check_against_oracle(const oracle::Table& t, const oracle::Query& q, const SkimRun& r,
                          const std::string& label) {
  const auto want_events = oracle::brute_force(t, q);
  ASSERT_EQ(r.result.passing_events, want_events) << label;
  EXPECT_EQ(r.result.n_passed, want_events.size()) << label;
  EXPECT_EQ(r.result.n_input, t.n_events) << label;
  EXPECT_EQ(r.result.output_bytes, r.output.size()) << label;

  MemorySource out(r.output);
  const auto oh = colfmt::read_header(out);
  EXPECT_EQ(oh.n_events, want_events.size()) << label;
  const auto want_branches = oracle::expected_outputs(t, q);
  ASSERT_EQ(oh.branches.size(), want_branches.size()) << label;
  for (std::size_t i = 0; i < want_branches.size(); ++i) {
    const auto& s = t.schema[want_branches[i]];
    ASSERT_EQ(oh.branches[i].schema(), s) << label;
    const auto slice = colfmt::read_branch(out, oh, s.name);
    ASSERT_TRUE(oracle::same_values(slice.values, oracle::select_events(t, want_branches[i], want_events)))
        << label << " branch " << s.name;
  }
}

std::set<std::pair<std::size_t, std::size_t>> expected_output_baskets(const colfmt::DatasetHeader& h,
                                                                      const query::SkimPlan& plan,
                                                                      const std::vector<std::uint64_t>& passing) {
  std::set<std::pair<std::size_t, std::size_t>> out;
  for (auto br : plan.output_only) {
    const auto& meta = h.branches[br];
    for (std::size_t b = 0; b < meta.baskets.size(); ++b) {
      const auto lo = meta.first_event[b], hi = meta.basket_end(b, h.n_events);
      const auto it = std::lower_bound(passing.begin(), passing.end(), lo);
      if (it != passing.end() && *it < hi) out.insert({br, b});
    }
  }
  return out;
}

std::set<std::pair<std::size_t, std::size_t>> only_branches(std::set<std::pair<std::size_t, std::size_t>> s,
                                                            const std::vector<std::size_t>& branches) {
  std::set<std::size_t> keep(branches.begin(), branches.end());
  std::erase_if(s, [&](const auto& p) { return !keep.contains(p.first); });
  return s;
}

colfmt::DatasetHeader schema_header(const std::vector<colfmt::BranchSchema>& schema) {
  colfmt::DatasetHeader h;
  for (const auto& s : schema) {
    colfmt::BranchMeta m;
    m.name = s.name;
    m.kind = s.kind;
    m.value_type = s.value_type;
    m.counter_branch = s.counter_branch;
    h.branches.push_back(m);
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// Evaluation primitives

class Primitives : public ::testing::Test {
 protected:
  void SetUp() override {
    using colfmt::BranchKind;
    using colfmt::ValueType;
    header_ = schema_header({{"nElectron", BranchKind::scalar, ValueType::i32, ""},
                             {"Electron_pt", BranchKind::jagged, ValueType::f32, "nElectron"},
                             {"nJet", BranchKind::scalar, ValueType::i32, ""},
                             {"Jet_pt", BranchKind::jagged, ValueType::f32, "nJet"}});
  }
  query::BoundSelection bind(const std::string& body) {
    return query::bind_selection(query::parse_query(R"q({"input":"f","output":"o",)q" + body + "}"), header_);
  }
  colfmt::DatasetHeader header_;
};

TEST_F(Primitives, PreselectionCountCut) {
  auto sel = bind(R"q("preselection":"nElectron >= 1")q");
  engine::EventRecord rec(4);
  rec.values[0] = {0};
  EXPECT_FALSE(engine::eval_preselection(sel.preselection[0], rec));
  rec.values[0] = {2};
  EXPECT_TRUE(engine::eval_preselection(sel.preselection[0], rec));
}

TEST_F(Primitives, ObjectSelection) {
  auto sel = bind(R"q("object_selections":[{"collection":"Electron","cut":"pt > 20"}])q");
  engine::EventRecord rec(4);
  rec.values[0] = {2};
  rec.values[1] = {25.0, 10.0};
  auto r = engine::eval_object_selection(sel.objects[0], sel, rec);
  EXPECT_EQ(r.mask, (std::vector<bool>{true, false}));
  EXPECT_TRUE(r.pass);

  rec.values[0] = {0};
  rec.values[1] = {};
  r = engine::eval_object_selection(sel.objects[0], sel, rec);
  EXPECT_TRUE(r.mask.empty());
  EXPECT_FALSE(r.pass);

  // Inconsistent lengths mean a corrupt file.
  rec.values[0] = {3};
  rec.values[1] = {1.0};
  EXPECT_THROW(engine::eval_object_selection(sel.objects[0], sel, rec), FormatError);
}

TEST_F(Primitives, DerivedSumOverMask) {
  auto sel = bind(R"q("object_selections":[{"collection":"Jet","cut":"pt != 20"}],
                     "derived":{"HT":"sum(Jet_pt)","n":"count(Jet)"})q");
  engine::EventRecord rec(4);
  rec.values[2] = {3};
  rec.values[3] = {30.0, 20.0, 10.0};
  engine::CollectionMasks masks(sel.collections.size());
  const auto jet = sel.objects[0].collection;
  masks[jet] = std::vector<bool>{true, false, true};
  EXPECT_EQ(engine::compute_derived(sel.derived[0].expr, masks, rec), 40.0);
  EXPECT_EQ(engine::compute_derived(sel.derived[1].expr, masks, rec), 2.0);
  masks[jet] = std::vector<bool>{false, false, false};
  EXPECT_EQ(engine::compute_derived(sel.derived[0].expr, masks, rec), 0.0);
  // No object selection on a collection: every object counts.
  masks[jet] = std::nullopt;
  EXPECT_EQ(engine::compute_derived(sel.derived[0].expr, masks, rec), 60.0);
  rec.values[2] = {0};
  rec.values[3] = {};
  EXPECT_EQ(engine::compute_derived(sel.derived[0].expr, masks, rec), 0.0);
}

// ---------------------------------------------------------------------------
// Whole runs against the oracle

TEST(Engine, RandomQueriesMatchOracle) {
  std::mt19937_64 rng(2024);
  int selective = 0;
  for (int trial = 0; trial < 40; ++trial) {
    oracle::TableOptions o;
    o.n_events = 200 + rng() % 3000;
    o.n_scalars = 1 + static_cast<int>(rng() % 4);
    o.n_collections = 1 + static_cast<int>(rng() % 3);
    o.special_floats = trial % 4 == 0;
    auto t = oracle::random_table(rng, o);
    auto q = oracle::random_query(rng, t);
    const auto codec = std::array{Codec::none, Codec::lz4, Codec::deflate}[trial % 3];
    const auto in = write_table(t, 64 + rng() % 2048, codec);
    const auto json = oracle::to_json(q, t, "in", "out");
    const auto label = "trial " + std::to_string(trial) + "\n" + json;

    RunSpec spec;
    spec.remote = trial % 2 == 0;
    spec.budget = rng() % 3 == 0 ? 4096 : 100ull << 20;
    const auto skim = run(in, json, spec);
    check_against_oracle(t, q, skim, "skim " + label);

    spec.naive = true;
    const auto naive = run(in, json, spec);
    check_against_oracle(t, q, naive, "naive " + label);
    EXPECT_EQ(skim.output, naive.output) << label;
    if (skim.result.n_passed > 0 && skim.result.n_passed < skim.result.n_input) ++selective;
  }
  // The generator must exercise real selections, not all-or-nothing ones.
  EXPECT_GE(selective, 20);
}

TEST(Engine, FetchMinimalityAndPhaseOneIsolation) {
  std::mt19937_64 rng(77);
  int checked = 0;
  for (int trial = 0; trial < 40; ++trial) {
    oracle::TableOptions o;
    o.n_events = 3000;
    o.n_collections = 2;
    auto t = oracle::random_table(rng, o);
    auto q = oracle::random_query(rng, t);
    const auto in = write_table(t, 256, Codec::lz4);
    const auto json = oracle::to_json(q, t, "in", "out");
    for (bool remote : {true, false}) {
      RunSpec spec;
      spec.remote = remote;
      spec.budget = 16 * 1024;
      SkimRun r;
      ASSERT_NO_THROW(r = run(in, json, spec)) << json;  // guard throws on any phase-one violation
      const auto touched = only_branches(oracle::baskets_touched(in.header, r.output_reads), r.plan.output_only);
      EXPECT_EQ(touched, expected_output_baskets(in.header, r.plan, r.result.passing_events))
          << (remote ? "remote " : "local ") << json;
      EXPECT_TRUE(only_branches(oracle::baskets_touched(in.header, r.selection_reads), r.plan.output_only).empty());
      if (!r.plan.output_only.empty()) ++checked;
    }
  }
  EXPECT_GT(checked, 20);
}

TEST(Engine, PassNothing) {
  std::mt19937_64 rng(5);
  auto t = oracle::random_table(rng, {});
  const auto in = write_table(t, 256, Codec::lz4);
  const std::string json = R"q({"input":"in","output":"out","branches":["C0_*","s1"],"event_selection":"false"})q";
  const auto r = run(in, json, {});
  EXPECT_EQ(r.result.n_passed, 0u);
  EXPECT_TRUE(r.output_reads.empty());
  MemorySource out(r.output);
  const auto oh = colfmt::read_header(out);
  EXPECT_EQ(oh.n_events, 0u);
  EXPECT_EQ(oh.branches.size(), r.plan.output.size());
  for (const auto& b : oh.branches) EXPECT_TRUE(b.baskets.empty());
}

TEST(Engine, IdentitySkim) {
  std::mt19937_64 rng(6);
  oracle::TableOptions o;
  o.n_events = 1500;
  auto t = oracle::random_table(rng, o);
  const auto in = write_table(t, 300, Codec::deflate);
  const std::string json = R"q({"input":"in","output":"out","branches":["s0","C1_*"]})q";
  const auto r = run(in, json, {});
  EXPECT_EQ(r.result.n_passed, t.n_events);
  EXPECT_TRUE(r.plan.criteria.empty());
  MemorySource out(r.output);
  const auto oh = colfmt::read_header(out);
  for (const auto& b : oh.branches) {
    const auto i = static_cast<std::size_t>(t.index(b.name));
    EXPECT_TRUE(oracle::same_values(colfmt::read_branch(out, oh, b.name).values, t.columns[i])) << b.name;
  }
  // Output layout defaults to the input's codec and basket target.
  EXPECT_EQ(oh.dominant_codec(), Codec::deflate);
  EXPECT_EQ(oh.basket_target, 300u);
}

TEST(Engine, OutputOverrides) {
  std::mt19937_64 rng(6);
  auto t = oracle::random_table(rng, {});
  const auto in = write_table(t, 300, Codec::deflate);
  const std::string json =
      R"q({"input":"in","output":"out","branches":["s0"],"output_codec":"none","output_basket_target":64})q";
  const auto r = run(in, json, {});
  MemorySource out(r.output);
  const auto oh = colfmt::read_header(out);
  EXPECT_EQ(oh.dominant_codec(), Codec::none);
  EXPECT_EQ(oh.basket_target, 64u);
}

TEST(Engine, StageMasksAreNested) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    oracle::TableOptions o;
    o.n_events = 1000;
    auto t = oracle::random_table(rng, o);
    auto q = oracle::random_query(rng, t);
    const auto in = write_table(t, 512, Codec::lz4);
    RunSpec spec;
    spec.stage_masks = true;
    const auto r = run(in, oracle::to_json(q, t, "in", "out"), spec);
    const auto& masks = r.result.stage_masks;
    ASSERT_EQ(masks.size(), 3u);
    for (std::size_t s = 0; s < 3; ++s) {
      ASSERT_EQ(masks[s].passing.size(), t.n_events);
      EXPECT_EQ(static_cast<std::size_t>(std::count(masks[s].passing.begin(), masks[s].passing.end(), true)),
                r.result.stage_passed[s]);
    }
    for (std::uint64_t e = 0; e < t.n_events; ++e) {
      ASSERT_LE(masks[1].passing[e], masks[0].passing[e]);
      ASSERT_LE(masks[2].passing[e], masks[1].passing[e]);
    }
    EXPECT_EQ(r.result.stage_passed[2], r.result.n_passed);
    EXPECT_LE(r.result.n_passed, r.result.n_input);
  }
}

TEST(Engine, NaiveReadsAtLeastAsMuch) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    oracle::TableOptions o;
    o.n_events = 2000;
    auto t = oracle::random_table(rng, o);
    auto q = oracle::random_query(rng, t);
    const auto in = write_table(t, 256, Codec::lz4);
    const auto json = oracle::to_json(q, t, "in", "out");
    RunSpec spec;
    spec.cache = false;
    const auto skim = run(in, json, spec);
    spec.naive = true;
    const auto naive = run(in, json, spec);
    EXPECT_GE(naive.requests, skim.requests) << json;
  }
}

TEST(Engine, Deterministic) {
  std::mt19937_64 rng(10);
  auto t = oracle::random_table(rng, {});
  auto q = oracle::random_query(rng, t);
  const auto in = write_table(t, 128, Codec::lz4);
  const auto json = oracle::to_json(q, t, "in", "out");
  const auto a = run(in, json, {});
  const auto b = run(in, json, {});
  EXPECT_EQ(a.output, b.output);
  EXPECT_EQ(a.result.passing_events, b.result.passing_events);
  EXPECT_EQ(a.result.stage_passed, b.result.stage_passed);
  EXPECT_EQ(a.requests, b.requests);
}

TEST(Engine, TransportErrorsPropagate) {
  std::mt19937_64 rng(11);
  auto t = oracle::random_table(rng, {});
  const auto in = write_table(t, 128, Codec::lz4);
  MemorySource mem(in.bytes);
  oracle::RecordingSource src(mem, true);
  const auto header = colfmt::read_header(src);
  auto plan = query::plan_skim(
      query::parse_query(R"q({"input":"in","output":"out","branches":["s0"],"preselection":"s0 > 0"})q"), header, {});
  src.set_guard([](std::uint64_t, std::uint64_t) { throw TransportError("link down"); });
  PrefetchCache cache(src, header);
  colfmt::MemorySink sink;
  EXPECT_THROW(engine::run_skim(header, plan, cache, sink), TransportError);
}

TEST(Engine, CorruptBasketIsReported) {
  std::mt19937_64 rng(12);
  auto t = oracle::random_table(rng, {});
  auto in = write_table(t, 128, Codec::lz4);
  const auto& ref = in.header.branches[0].baskets[0];
  for (std::uint64_t i = 0; i < ref.compressed_len; ++i) in.bytes[ref.file_offset + i] = 0xff;
  MemorySource mem(in.bytes);
  auto plan = query::plan_skim(query::parse_query(R"q({"input":"in","output":"out","branches":["s1"],"preselection":"s0 > 0 || s0 <= 0"})q"),
                               in.header, {});
  PrefetchCache cache(mem, in.header);
  colfmt::MemorySink sink;
  EXPECT_THROW(engine::run_skim(in.header, plan, cache, sink), FormatError);
}

TEST(Engine, TimingPhasesAreConsistent) {
  bench::GenSpec g;
  g.n_events = 20000;
  colfmt::MemorySink gen_sink;
  const auto h = bench::generate(g, gen_sink);
  const Bytes bytes = gen_sink.take();
  const auto query = bench::reference_query_json("in", "out");
  const auto sets = bench::reference_minimal_sets();
  for (bool naive : {false, true}) {
    MemorySource src(bytes);
    auto plan = query::plan_skim(query::parse_query(query), h, sets);
    TimingSink timing;
    engine::RunOptions opts;
    opts.timing = &timing;
    PrefetchCache cache(src, h, {}, &timing);
    colfmt::MemorySink sink;
    const auto r = naive ? engine::run_naive(h, plan, cache, sink, {}, opts)
                         : engine::run_skim(h, plan, cache, sink, opts);
    for (auto p : kAllPhases) EXPECT_GE(r.timing[p], 0.0);
    EXPECT_GT(r.timing.total_wall, 0.0);
    EXPECT_LE(r.timing.phase_sum(), r.timing.total_wall * 1.0001);
    EXPECT_GT(r.timing[Phase::deserialize], 0.0);
    EXPECT_GT(r.timing[Phase::write], 0.0);
  }
}

TEST(Engine, GeneratedWorkloadSkimEqualsNaive) {
  bench::GenSpec g;
  g.n_events = 100000;
  colfmt::MemorySink gen_sink;
  const auto h = bench::generate(g, gen_sink);
  const Bytes bytes = gen_sink.take();
  const auto sets = bench::reference_minimal_sets();
  auto plan = query::plan_skim(query::parse_query(bench::reference_query_json("in", "out")), h, sets);

  std::vector<std::size_t> extra;
  {
    auto all = query::parse_query(bench::reference_query_json("in", "out"));
    all.force_all = true;
    const auto ex = query::expand_wildcards(all.branches, h, sets, true);
    for (const auto& n : query::with_counters(ex.branches, h)) extra.push_back(*h.find(n));
  }

  struct Outcome {
    engine::SkimResult result;
    Bytes out;
    std::uint64_t fetched;
  };
  const auto go = [&](bool naive) {
    MemorySource mem(bytes);
    oracle::RecordingSource src(mem, true);
    TimingSink timing;
    engine::RunOptions opts;
    opts.timing = &timing;
    PrefetchCache cache(src, h, {}, &timing);
    colfmt::MemorySink sink;
    auto r = naive ? engine::run_naive(h, plan, cache, sink, engine::NaiveOptions{extra}, opts)
                   : engine::run_skim(h, plan, cache, sink, opts);
    return Outcome{std::move(r), sink.take(), src.bytes_fetched()};
  };
  const auto skim = go(false);
  const auto naive = go(true);
  EXPECT_EQ(skim.result.n_input, 100000u);
  EXPECT_GT(skim.result.n_passed, 0u);
  EXPECT_EQ(skim.result.passing_events, naive.result.passing_events);
  EXPECT_EQ(skim.out, naive.out);
  EXPECT_GE(naive.fetched, skim.fetched);
  // Loading everything for every event shows up as deserialization time.
  EXPECT_GT(naive.result.timing[Phase::deserialize], skim.result.timing[Phase::deserialize]);
}
