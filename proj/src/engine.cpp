#include "skimlite/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

namespace skimlite::engine {

using query::BoundExpr;
using query::Op;

double evaluate(const BoundExpr& e, const EvalContext& ctx) {
  switch (e.kind) {
    case BoundExpr::Kind::constant: return e.value;
    case BoundExpr::Kind::scalar: return ctx.record.scalar(e.branch);
    case BoundExpr::Kind::field: return ctx.record.values[e.branch][ctx.object];
    case BoundExpr::Kind::derived: return (*ctx.derived)[e.derived];
    case BoundExpr::Kind::sum:
    case BoundExpr::Kind::count: {
      const auto* mask = ctx.masks && e.collection < ctx.masks->size() && (*ctx.masks)[e.collection]
                             ? &*(*ctx.masks)[e.collection]
                             : nullptr;
      if (e.kind == BoundExpr::Kind::count) {
        if (mask) return static_cast<double>(std::count(mask->begin(), mask->end(), true));
        return ctx.record.scalar(e.branch);  // the collection's counter
      }
      const auto& vals = ctx.record.values[e.branch];
      if (mask && mask->size() != vals.size()) {
        throw FormatError("object mask and field lengths disagree");
      }
      double s = 0.0;
      for (std::size_t i = 0; i < vals.size(); ++i) {
        if (!mask || (*mask)[i]) s += vals[i];
      }
      return s;
    }
    case BoundExpr::Kind::abs: return std::fabs(evaluate(e.args[0], ctx));
    case BoundExpr::Kind::unary: {
      const auto v = evaluate(e.args[0], ctx);
      return e.op == Op::lnot ? (v != 0.0 ? 0.0 : 1.0) : -v;
    }
    case BoundExpr::Kind::binary: {
      if (e.op == Op::land) {
        return evaluate(e.args[0], ctx) != 0.0 && evaluate(e.args[1], ctx) != 0.0 ? 1.0 : 0.0;
      }
      if (e.op == Op::lor) {
        return evaluate(e.args[0], ctx) != 0.0 || evaluate(e.args[1], ctx) != 0.0 ? 1.0 : 0.0;
      }
      const auto a = evaluate(e.args[0], ctx);
      const auto b = evaluate(e.args[1], ctx);
      switch (e.op) {
        case Op::add: return a + b;
        case Op::sub: return a - b;
        case Op::mul: return a * b;
        case Op::lt: return a < b ? 1.0 : 0.0;
        case Op::le: return a <= b ? 1.0 : 0.0;
        case Op::gt: return a > b ? 1.0 : 0.0;
        case Op::ge: return a >= b ? 1.0 : 0.0;
        case Op::eq: return a == b ? 1.0 : 0.0;
        case Op::ne: return a != b ? 1.0 : 0.0;
        default: break;
      }
      break;
    }
  }
  throw Error("bad bound expression");
}

bool eval_preselection(const BoundExpr& expr, const EventRecord& record) {
  return evaluate(expr, EvalContext{record}) != 0.0;
}

ObjectResult eval_object_selection(const query::BoundObjectSelection& spec,
                                   const query::BoundSelection& selection,
                                   const EventRecord& record) {
  const auto counter = selection.collections.at(spec.collection).counter;
  const auto n = static_cast<std::size_t>(record.scalar(counter));
  for (auto b : spec.fields) {
    if (record.values[b].size() != n) {
      throw FormatError("collection '" + selection.collections[spec.collection].name + "' has " +
                        std::to_string(n) + " objects but a field holds " +
                        std::to_string(record.values[b].size()) + " values");
    }
  }
  ObjectResult r;
  r.mask.resize(n);
  std::int64_t selected = 0;
  EvalContext ctx{record};
  for (std::size_t i = 0; i < n; ++i) {
    ctx.object = i;
    r.mask[i] = evaluate(spec.cut, ctx) != 0.0;
    selected += r.mask[i] ? 1 : 0;
  }
  r.pass = selected >= spec.min_count;
  return r;
}

double compute_derived(const BoundExpr& aggregate, const CollectionMasks& masks,
                       const EventRecord& record) {
  EvalContext ctx{record, &masks};
  return evaluate(aggregate, ctx);
}

colfmt::WriteOptions output_write_options(const colfmt::DatasetHeader& header,
                                          const query::SkimPlan& plan) {
  colfmt::WriteOptions w;
  w.basket_target = plan.query.output_basket_target.value_or(header.basket_target);
  w.codec = plan.query.output_codec.value_or(header.dominant_codec());
  return w;
}

namespace {

class CountingSink : public colfmt::ByteSink {
 public:
  explicit CountingSink(colfmt::ByteSink& inner) : inner_(inner) {}
  void write(ByteView data) override {
    inner_.write(data);
    bytes_ += data.size();
  }
  std::uint64_t bytes() const { return bytes_; }

 private:
  colfmt::ByteSink& inner_;
  std::uint64_t bytes_ = 0;
};

/// Shared machinery of both run modes: basket cursors, event
/// materialization, stage evaluation and output accumulation.
class Job {
 public:
  Job(const colfmt::DatasetHeader& header, const query::SkimPlan& plan, PrefetchCache& cache,
      const RunOptions& options)
      : header_(header),
        plan_(plan),
        cache_(cache),
        options_(options),
        timing_(options.timing ? options.timing : &own_timing_),
        cursors_(header.branches.size()),
        record_(header.branches.size()),
        masks_(plan.selection.collections.size()),
        derived_(plan.selection.derived.size()) {
    for (auto b : plan.output) {
      columns_.push_back(colfmt::make_values(header.branches[b].value_type));
      output_slot_.emplace(b, columns_.size() - 1);
    }
    if (options.record_stage_masks) {
      for (auto s : {Stage::preselection, Stage::object, Stage::event}) {
        result_.stage_masks.push_back({s, std::vector<bool>(header.n_events, false)});
      }
    }
    result_.n_input = header.n_events;
    result_.warnings = plan.branches.warnings;
  }

  void phase(RunPhase p) const {
    if (options_.on_phase) options_.on_phase(p);
  }

  /// Positions the cursor of `branch` on the basket holding `event`.
  const colfmt::ColumnSlice& ensure(std::size_t branch, std::uint64_t event) {
    auto& cur = cursors_[branch];
    if (cur && cur->contains(event)) return *cur;
    const auto& meta = header_.branches[branch];
    const auto b = colfmt::locate_basket(meta, header_.n_events, event);
    const auto raw = cache_.get_basket(branch, b);
    Bytes payload;
    {
      ScopedPhase t(timing_, Phase::decompress);
      payload = colfmt::decompress_basket(*raw, meta.baskets[b]);
    }
    ScopedPhase t(timing_, Phase::deserialize);
    cur = colfmt::deserialize_column(payload, meta, b);
    return *cur;
  }

  /// GetEntry analog: brings each branch's values for `event` into the
  /// event record.
  void materialize(const std::vector<std::size_t>& branches, std::uint64_t event) {
    for (auto b : branches) ensure(b, event);
    ScopedPhase t(timing_, Phase::deserialize);
    for (auto b : branches) {
      const auto vals = colfmt::event_values(*cursors_[b], event);
      auto& dst = record_.values[b];
      const auto n = colfmt::span_size(vals);
      dst.resize(n);
      std::visit(
          [&dst](const auto& s) {
            for (std::size_t i = 0; i < s.size(); ++i) dst[i] = static_cast<double>(s[i]);
          },
          vals);
    }
  }

  /// Applies the three stages in order with short-circuiting. `load` is
  /// invoked with each stage's branches before the stage runs.
  template <typename Load>
  bool select(std::uint64_t event, Load&& load) {
    const auto& sel = plan_.selection;
    if (!sel.preselection.empty()) {
      load(sel.preselection_branches);
      ScopedPhase t(timing_, Phase::select);
      for (const auto& p : sel.preselection) {
        if (!eval_preselection(p, record_)) return false;
      }
    }
    mark(Stage::preselection, event);

    std::fill(masks_.begin(), masks_.end(), std::nullopt);
    for (const auto& o : sel.objects) {
      load(o.branches);
      ScopedPhase t(timing_, Phase::select);
      auto r = eval_object_selection(o, sel, record_);
      if (!r.pass) return false;
      auto& m = masks_[o.collection];
      if (!m) {
        m = std::move(r.mask);
      } else {
        for (std::size_t i = 0; i < m->size(); ++i) (*m)[i] = (*m)[i] && r.mask[i];
      }
    }
    mark(Stage::object, event);

    if (sel.event || !sel.derived.empty()) {
      load(sel.event_branches);
      ScopedPhase t(timing_, Phase::select);
      for (std::size_t d = 0; d < sel.derived.size(); ++d) {
        derived_[d] = compute_derived(sel.derived[d].expr, masks_, record_);
      }
      if (sel.event) {
        EvalContext ctx{record_, &masks_, &derived_};
        if (evaluate(*sel.event, ctx) == 0.0) return false;
      }
    }
    mark(Stage::event, event);
    return true;
  }

  void append_output(std::size_t branch, std::uint64_t event) {
    const auto& slice = ensure(branch, event);
    ScopedPhase t(timing_, Phase::write);
    colfmt::append_values(columns_[output_slot_.at(branch)], colfmt::event_values(slice, event));
  }

  SkimResult finish(colfmt::ByteSink& sink) {
    {
      ScopedPhase t(timing_, Phase::write);
      std::vector<colfmt::BranchSchema> schema;
      for (auto b : plan_.output) schema.push_back(header_.branches[b].schema());
      CountingSink counting(sink);
      colfmt::write_dataset(schema, columns_, output_write_options(header_, plan_), counting);
      result_.output_bytes = counting.bytes();
    }
    result_.n_passed = result_.passing_events.size();
    result_.timing = timing_->breakdown();
    result_.cache = cache_.stats();
    return std::move(result_);
  }

  SkimResult& result() { return result_; }
  const EventRecord& record() const { return record_; }

 private:
  void mark(Stage s, std::uint64_t event) {
    const auto i = static_cast<std::size_t>(s);
    ++result_.stage_passed[i];
    if (!result_.stage_masks.empty()) result_.stage_masks[i].passing[event] = true;
  }

  const colfmt::DatasetHeader& header_;
  const query::SkimPlan& plan_;
  PrefetchCache& cache_;
  const RunOptions& options_;
  TimingSink own_timing_;
  TimingSink* timing_;
  std::vector<std::optional<colfmt::ColumnSlice>> cursors_;
  EventRecord record_;
  CollectionMasks masks_;
  std::vector<double> derived_;
  std::vector<colfmt::ColumnValues> columns_;
  std::unordered_map<std::size_t, std::size_t> output_slot_;
  SkimResult result_;
};

struct WallAndCpu {
  std::chrono::steady_clock::time_point wall = std::chrono::steady_clock::now();
  double cpu = thread_cpu_seconds();

  void finish(TimingBreakdown& t) const {
    const std::chrono::duration<double> d = std::chrono::steady_clock::now() - wall;
    t.total_wall = d.count();
    t.cpu_time = thread_cpu_seconds() - cpu;
  }
};

}  // namespace

SkimResult run_skim(const colfmt::DatasetHeader& header, const query::SkimPlan& plan,
                    PrefetchCache& cache, colfmt::ByteSink& sink, const RunOptions& options) {
  const WallAndCpu clock;
  Job job(header, plan, cache, options);

  std::set<std::size_t> crit(plan.criteria.begin(), plan.criteria.end());
  std::vector<std::size_t> criteria_outputs;
  for (auto b : plan.output) {
    if (crit.contains(b)) criteria_outputs.push_back(b);
  }

  // Phase one: criteria branches only.
  job.phase(RunPhase::selection);
  cache.clear_wanted();
  cache.set_enabled(plan.criteria);
  auto load = [&job](std::uint64_t e) {
    return [&job, e](const std::vector<std::size_t>& branches) { job.materialize(branches, e); };
  };
  for (std::uint64_t e = 0; e < header.n_events; ++e) {
    if (!job.select(e, load(e))) continue;
    job.result().passing_events.push_back(e);
    // Every criteria branch was loaded for this event on its way through
    // the stages, so the cursors already sit on it.
    for (auto b : criteria_outputs) job.append_output(b, e);
  }

  // Phase two: output-only baskets holding at least one passing event.
  job.phase(RunPhase::output);
  const auto& passing = job.result().passing_events;
  cache.clear_wanted();
  for (auto b : plan.output_only) {
    const auto& meta = header.branches[b];
    std::vector<bool> wanted(meta.baskets.size(), false);
    for (auto e : passing) wanted[colfmt::locate_basket(meta, header.n_events, e)] = true;
    cache.set_wanted(b, std::move(wanted));
  }
  cache.set_enabled(plan.output_only);
  for (auto e : passing) {
    job.materialize(plan.output_only, e);
    for (auto b : plan.output_only) job.append_output(b, e);
  }
  cache.clear_wanted();

  auto result = job.finish(sink);
  clock.finish(result.timing);
  job.phase(RunPhase::finished);
  return result;
}

SkimResult run_naive(const colfmt::DatasetHeader& header, const query::SkimPlan& plan,
                     PrefetchCache& cache, colfmt::ByteSink& sink, const NaiveOptions& naive,
                     const RunOptions& options) {
  const WallAndCpu clock;
  Job job(header, plan, cache, options);

  std::set<std::size_t> load_set(plan.criteria.begin(), plan.criteria.end());
  load_set.insert(plan.output.begin(), plan.output.end());
  load_set.insert(naive.extra_load.begin(), naive.extra_load.end());
  const std::vector<std::size_t> load(load_set.begin(), load_set.end());

  job.phase(RunPhase::selection);
  cache.clear_wanted();
  cache.set_enabled(load);
  auto nothing = [](const std::vector<std::size_t>&) {};
  for (std::uint64_t e = 0; e < header.n_events; ++e) {
    job.materialize(load, e);
    if (!job.select(e, nothing)) continue;
    job.result().passing_events.push_back(e);
    for (auto b : plan.output) job.append_output(b, e);
  }

  auto result = job.finish(sink);
  clock.finish(result.timing);
  job.phase(RunPhase::finished);
  return result;
}

}  // namespace skimlite::engine
