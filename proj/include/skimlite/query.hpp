#pragma once

// Skim query language: JSON request, selection expressions, wildcard
// expansion and the split of branches into selection ("criteria") and
// output-only groups.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "skimlite/codec.hpp"
#include "skimlite/colfmt.hpp"
#include "skimlite/error.hpp"

namespace skimlite::query {

enum class ExprKind : std::uint8_t { number, boolean, ident, unary, binary, call };

enum class Op : std::uint8_t {
  none,
  add, sub, mul,
  lt, le, gt, ge, eq, ne,
  land, lor,
  lnot, neg,
};

std::string_view op_symbol(Op op);

/// Parsed expression. Positions are byte offsets into the source text and
/// do not take part in equality.
struct ExprNode {
  ExprKind kind = ExprKind::number;
  Op op = Op::none;
  double number = 0.0;
  bool boolean = false;
  std::string name;  // identifier or function name
  std::vector<ExprNode> args;
  std::size_t position = 0;

  bool operator==(const ExprNode& o) const;
};

/// Grammar, loosest to tightest:
///   or      := and (('||' | 'or') and)*
///   and     := cmp (('&&' | 'and') cmp)*
///   cmp     := sum (('<'|'<='|'>'|'>='|'=='|'!=') sum)?
///   sum     := product (('+'|'-') product)*
///   product := unary ('*' unary)*
///   unary   := ('!' | 'not' | '-') unary | primary
///   primary := number | 'true' | 'false' | ident | func '(' or ')' | '(' or ')'
/// with func one of abs, sum, count.
ExprNode parse_expression(std::string_view text);

/// Fully parenthesized rendering; parse_expression(to_string(e)) == e.
std::string to_string(const ExprNode& e);

struct ObjectSelection {
  std::string collection;  // e.g. "Electron"; fields are Electron_<name>
  ExprNode cut;
  std::string cut_text;
  std::int64_t min_count = 1;
};

struct DerivedVariable {
  std::string name;
  ExprNode expr;
  std::string text;
};

struct SkimQuery {
  std::string input;
  std::string output;
  std::vector<std::string> branches;
  bool force_all = false;
  std::vector<ExprNode> preselection;
  std::vector<std::string> preselection_text;
  std::vector<ObjectSelection> object_selections;
  std::optional<ExprNode> event_selection;
  std::string event_selection_text;
  std::vector<DerivedVariable> derived;
  std::optional<Codec> output_codec;
  std::optional<std::uint64_t> output_basket_target;
  /// Treat literal branch names missing from the input as errors.
  bool strict_branches = false;

  bool has_selection() const {
    return !preselection.empty() || !object_selections.empty() || event_selection.has_value();
  }
};

struct ParseOptions {
  /// Reject unknown top-level keys.
  bool strict = true;
};

SkimQuery parse_query(std::string_view payload, const ParseOptions& options = {});

/// Wildcard pattern → predefined branch list.
using MinimalSets = std::map<std::string, std::vector<std::string>>;

MinimalSets parse_minimal_sets(std::string_view json_text);
MinimalSets load_minimal_sets(const std::string& path);

struct Expansion {
  std::vector<std::string> branches;  // schema order, deduplicated
  std::vector<std::string> warnings;
  std::vector<std::string> missing;   // literal names absent from the schema
  std::map<std::string, std::size_t> excluded;  // minimized pattern → excluded count
};

bool is_wildcard(std::string_view pattern);

Expansion expand_wildcards(const std::vector<std::string>& patterns,
                           const colfmt::DatasetHeader& schema, const MinimalSets& minimal_sets,
                           bool force_all);

struct BranchPlan {
  std::vector<std::string> criteria_branches;  // schema order
  std::vector<std::string> output_branches;    // schema order
  std::vector<std::string> warnings;

  std::vector<std::string> output_only() const;
};

// ---------------------------------------------------------------------------
// Bound (schema-resolved, type-checked) selections.

enum class ValueKind : std::uint8_t { number, boolean };

struct BoundExpr {
  enum class Kind : std::uint8_t {
    constant,
    scalar,   // branch: scalar branch index
    field,    // branch: jagged field of the object being evaluated
    derived,  // index into BoundSelection::derived
    sum,      // branch: jagged field; collection: index
    count,    // collection: index; branch: its counter
    abs,
    unary,
    binary,
  };
  Kind kind = Kind::constant;
  Op op = Op::none;
  ValueKind type = ValueKind::number;
  double value = 0.0;
  std::size_t branch = 0;
  std::size_t collection = 0;
  std::size_t derived = 0;
  std::vector<BoundExpr> args;
};

struct Collection {
  std::string name;
  std::size_t counter = 0;  // scalar i32 branch index
};

struct BoundObjectSelection {
  std::size_t collection = 0;
  BoundExpr cut;
  std::int64_t min_count = 1;
  std::vector<std::size_t> branches;  // counter, fields, scalars used by the cut
  std::vector<std::size_t> fields;    // the jagged subset of branches
};

struct BoundDerived {
  std::string name;
  BoundExpr expr;
};

struct BoundSelection {
  std::vector<Collection> collections;
  std::vector<BoundExpr> preselection;
  std::vector<std::size_t> preselection_branches;
  std::vector<BoundObjectSelection> objects;
  std::vector<BoundDerived> derived;
  std::optional<BoundExpr> event;
  std::vector<std::size_t> event_branches;  // includes every derived dependency
  /// Union of all of the above, sorted.
  std::vector<std::size_t> criteria;
};

/// Resolves identifiers against the schema and type-checks every
/// expression. Throws PlanError.
BoundSelection bind_selection(const SkimQuery& query, const colfmt::DatasetHeader& schema);

/// Adds the counter of every jagged branch in `branches`; schema order.
std::vector<std::string> with_counters(const std::vector<std::string>& branches,
                                       const colfmt::DatasetHeader& schema);

BranchPlan classify_branches(const SkimQuery& query, const std::vector<std::string>& resolved,
                             const colfmt::DatasetHeader& schema);

/// Everything an engine run needs: the query, its branch split, the bound
/// selection, and branch indices for each group.
struct SkimPlan {
  SkimQuery query;
  BranchPlan branches;
  BoundSelection selection;
  std::vector<std::size_t> criteria;     // branch indices
  std::vector<std::size_t> output;       // branch indices, output file order
  std::vector<std::size_t> output_only;  // output minus criteria
};

/// expand_wildcards → classify_branches → bind_selection. Missing literal
/// branches become warnings unless query.strict_branches is set.
SkimPlan plan_skim(const SkimQuery& query, const colfmt::DatasetHeader& schema,
                   const MinimalSets& minimal_sets);

}  // namespace skimlite::query
