#pragma once

// Staged event selection and output writing.
//
// run_skim works in two phases. Phase one walks every event and applies the
// stages in order (preselection, object-level, event-level), loading a
// stage's branches only when an event reaches it. Phase two then fetches
// only the output-only baskets that hold a passing event and writes the
// reduced file. run_naive is the single-phase baseline that loads every
// selected branch for every event before evaluating anything.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "skimlite/colfmt.hpp"
#include "skimlite/query.hpp"
#include "skimlite/timing.hpp"
#include "skimlite/transport.hpp"

namespace skimlite::engine {

enum class Stage : std::uint8_t { preselection = 0, object = 1, event = 2 };

/// Per-branch values of the current event, widened to double. Only the
/// branches loaded for the current stage are meaningful.
struct EventRecord {
  std::vector<std::vector<double>> values;  // indexed by branch

  explicit EventRecord(std::size_t n_branches = 0) : values(n_branches) {}
  double scalar(std::size_t branch) const { return values[branch].front(); }
};

/// Object masks by collection index; nullopt means "no object selection on
/// this collection", i.e. every object counts.
using CollectionMasks = std::vector<std::optional<std::vector<bool>>>;

struct EvalContext {
  const EventRecord& record;
  const CollectionMasks* masks = nullptr;
  const std::vector<double>* derived = nullptr;
  std::size_t object = 0;  // index for field references
};

double evaluate(const query::BoundExpr& e, const EvalContext& ctx);

bool eval_preselection(const query::BoundExpr& expr, const EventRecord& record);

struct ObjectResult {
  std::vector<bool> mask;
  bool pass = false;
};

ObjectResult eval_object_selection(const query::BoundObjectSelection& spec,
                                   const query::BoundSelection& selection,
                                   const EventRecord& record);

/// Evaluates a derived-variable expression (typically sum() or count())
/// over the objects passing each collection's mask.
double compute_derived(const query::BoundExpr& aggregate, const CollectionMasks& masks,
                       const EventRecord& record);

struct StageMask {
  Stage stage = Stage::preselection;
  std::vector<bool> passing;  // over all input events
};

enum class RunPhase : std::uint8_t { selection, output, finished };

struct RunOptions {
  TimingSink* timing = nullptr;
  /// Called at the start of each phase.
  std::function<void(RunPhase)> on_phase;
  bool record_stage_masks = false;
};

struct SkimResult {
  std::uint64_t n_input = 0;
  std::uint64_t n_passed = 0;
  std::uint64_t output_bytes = 0;
  TimingBreakdown timing;
  std::vector<std::string> warnings;
  std::vector<std::uint64_t> passing_events;
  std::array<std::uint64_t, 3> stage_passed{};  // events surviving each stage
  std::vector<StageMask> stage_masks;           // when record_stage_masks
  CacheStats cache;
};

SkimResult run_skim(const colfmt::DatasetHeader& header, const query::SkimPlan& plan,
                    PrefetchCache& cache, colfmt::ByteSink& sink, const RunOptions& options = {});

struct NaiveOptions {
  /// Branches a traditional script enables but never writes, e.g. the full
  /// expansion of its wildcards. Loaded for every event like the rest.
  std::vector<std::size_t> extra_load;
};

SkimResult run_naive(const colfmt::DatasetHeader& header, const query::SkimPlan& plan,
                     PrefetchCache& cache, colfmt::ByteSink& sink,
                     const NaiveOptions& naive = {}, const RunOptions& options = {});

/// Output layout for a plan: the planned output branches with the query's
/// codec/basket overrides, defaulting to the input's.
colfmt::WriteOptions output_write_options(const colfmt::DatasetHeader& header,
                                          const query::SkimPlan& plan);

}  // namespace skimlite::engine
