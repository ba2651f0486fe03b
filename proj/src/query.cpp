#include "skimlite/query.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

namespace skimlite::query {

using nlohmann::json;

std::string_view op_symbol(Op op) {
  switch (op) {
    case Op::add: return "+";
    case Op::sub: return "-";
    case Op::mul: return "*";
    case Op::lt: return "<";
    case Op::le: return "<=";
    case Op::gt: return ">";
    case Op::ge: return ">=";
    case Op::eq: return "==";
    case Op::ne: return "!=";
    case Op::land: return "&&";
    case Op::lor: return "||";
    case Op::lnot: return "!";
    case Op::neg: return "-";
    case Op::none: break;
  }
  return "?";
}

bool ExprNode::operator==(const ExprNode& o) const {
  if (kind != o.kind) return false;
  switch (kind) {
    case ExprKind::number: return number == o.number;
    case ExprKind::boolean: return boolean == o.boolean;
    case ExprKind::ident: return name == o.name;
    case ExprKind::unary:
    case ExprKind::binary: return op == o.op && args == o.args;
    case ExprKind::call: return name == o.name && args == o.args;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Lexer / parser

namespace {

enum class Tok { end, number, ident, lparen, rparen, op };

struct Token {
  Tok kind = Tok::end;
  std::string_view text;
  std::size_t pos = 0;
  double number = 0.0;
  Op op = Op::none;
};

bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }
bool digit(char c) { return c >= '0' && c <= '9'; }

class Lexer {
 public:
  explicit Lexer(std::string_view src) : src_(src) {}

  Token next() {
    while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    Token t;
    t.pos = pos_;
    if (pos_ >= src_.size()) return t;
    const char c = src_[pos_];
    if (digit(c) || (c == '.' && pos_ + 1 < src_.size() && digit(src_[pos_ + 1]))) return number();
    if (ident_start(c)) {
      auto end = pos_;
      while (end < src_.size() && ident_char(src_[end])) ++end;
      t.kind = Tok::ident;
      t.text = src_.substr(pos_, end - pos_);
      pos_ = end;
      if (t.text == "and") return as_op(t, Op::land);
      if (t.text == "or") return as_op(t, Op::lor);
      if (t.text == "not") return as_op(t, Op::lnot);
      return t;
    }
    if (c == '(' || c == ')') {
      t.kind = c == '(' ? Tok::lparen : Tok::rparen;
      t.text = src_.substr(pos_++, 1);
      return t;
    }
    const auto two = src_.substr(pos_, 2);
    static constexpr std::pair<std::string_view, Op> kTwo[] = {
        {"<=", Op::le}, {">=", Op::ge}, {"==", Op::eq},
        {"!=", Op::ne}, {"&&", Op::land}, {"||", Op::lor}};
    for (const auto& [s, op] : kTwo) {
      if (two == s) {
        t.text = two;
        pos_ += 2;
        return as_op(t, op);
      }
    }
    static constexpr std::pair<char, Op> kOne[] = {{'<', Op::lt}, {'>', Op::gt}, {'+', Op::add},
                                                   {'-', Op::sub}, {'*', Op::mul}, {'!', Op::lnot}};
    for (const auto& [ch, op] : kOne) {
      if (c == ch) {
        t.text = src_.substr(pos_++, 1);
        return as_op(t, op);
      }
    }
    throw QueryError(std::string("unexpected character '") + c + "'", pos_);
  }

 private:
  static Token as_op(Token t, Op op) {
    t.kind = Tok::op;
    t.op = op;
    return t;
  }

  Token number() {
    Token t;
    t.pos = pos_;
    auto end = pos_;
    while (end < src_.size() && digit(src_[end])) ++end;
    if (end < src_.size() && src_[end] == '.') {
      ++end;
      while (end < src_.size() && digit(src_[end])) ++end;
    }
    if (end < src_.size() && (src_[end] == 'e' || src_[end] == 'E')) {
      auto exp = end + 1;
      if (exp < src_.size() && (src_[exp] == '+' || src_[exp] == '-')) ++exp;
      if (exp < src_.size() && digit(src_[exp])) {
        end = exp;
        while (end < src_.size() && digit(src_[end])) ++end;
      }
    }
    if (end < src_.size() && ident_char(src_[end])) {
      throw QueryError("malformed number", pos_);
    }
    t.kind = Tok::number;
    t.text = src_.substr(pos_, end - pos_);
    const auto* first = src_.data() + pos_;
    const auto* last = src_.data() + end;
    const auto [ptr, ec] = std::from_chars(first, last, t.number);
    if (ec != std::errc() || ptr != last) throw QueryError("number out of range", pos_);
    pos_ = end;
    return t;
  }

  std::string_view src_;
  std::size_t pos_ = 0;
};

bool is_function(std::string_view name) {
  return name == "abs" || name == "sum" || name == "count";
}

class Parser {
 public:
  explicit Parser(std::string_view src) : lex_(src) { advance(); }

  ExprNode parse() {
    if (cur_.kind == Tok::end) throw QueryError("empty expression", cur_.pos);
    auto e = parse_or();
    if (cur_.kind != Tok::end) {
      throw QueryError("unexpected '" + std::string(cur_.text) + "'", cur_.pos);
    }
    return e;
  }

 private:
  void advance() { cur_ = lex_.next(); }

  bool at_op(Op op) const { return cur_.kind == Tok::op && cur_.op == op; }

  static ExprNode binary(Op op, ExprNode a, ExprNode b, std::size_t pos) {
    ExprNode n;
    n.kind = ExprKind::binary;
    n.op = op;
    n.position = pos;
    n.args.push_back(std::move(a));
    n.args.push_back(std::move(b));
    return n;
  }

  ExprNode parse_or() {
    auto lhs = parse_and();
    while (at_op(Op::lor)) {
      const auto pos = cur_.pos;
      advance();
      lhs = binary(Op::lor, std::move(lhs), parse_and(), pos);
    }
    return lhs;
  }

  ExprNode parse_and() {
    auto lhs = parse_cmp();
    while (at_op(Op::land)) {
      const auto pos = cur_.pos;
      advance();
      lhs = binary(Op::land, std::move(lhs), parse_cmp(), pos);
    }
    return lhs;
  }

  static bool is_cmp(Op op) {
    return op == Op::lt || op == Op::le || op == Op::gt || op == Op::ge || op == Op::eq ||
           op == Op::ne;
  }

  ExprNode parse_cmp() {
    auto lhs = parse_sum();
    if (cur_.kind == Tok::op && is_cmp(cur_.op)) {
      const auto op = cur_.op;
      const auto pos = cur_.pos;
      advance();
      lhs = binary(op, std::move(lhs), parse_sum(), pos);
      if (cur_.kind == Tok::op && is_cmp(cur_.op)) {
        throw QueryError("chained comparison; use parentheses", cur_.pos);
      }
    }
    return lhs;
  }

  ExprNode parse_sum() {
    auto lhs = parse_product();
    while (at_op(Op::add) || at_op(Op::sub)) {
      const auto op = cur_.op;
      const auto pos = cur_.pos;
      advance();
      lhs = binary(op, std::move(lhs), parse_product(), pos);
    }
    return lhs;
  }

  ExprNode parse_product() {
    auto lhs = parse_unary();
    while (at_op(Op::mul)) {
      const auto pos = cur_.pos;
      advance();
      lhs = binary(Op::mul, std::move(lhs), parse_unary(), pos);
    }
    return lhs;
  }

  ExprNode parse_unary() {
    if (at_op(Op::lnot) || at_op(Op::sub)) {
      ExprNode n;
      n.kind = ExprKind::unary;
      n.op = cur_.op == Op::lnot ? Op::lnot : Op::neg;
      n.position = cur_.pos;
      advance();
      n.args.push_back(parse_unary());
      return n;
    }
    return parse_primary();
  }

  ExprNode parse_primary() {
    ExprNode n;
    n.position = cur_.pos;
    switch (cur_.kind) {
      case Tok::number:
        n.kind = ExprKind::number;
        n.number = cur_.number;
        advance();
        return n;
      case Tok::ident: {
        const auto name = cur_.text;
        advance();
        if (name == "true" || name == "false") {
          n.kind = ExprKind::boolean;
          n.boolean = name == "true";
          return n;
        }
        if (cur_.kind == Tok::lparen) {
          if (!is_function(name)) {
            throw QueryError("unknown function '" + std::string(name) + "'", n.position);
          }
          advance();
          n.kind = ExprKind::call;
          n.name = std::string(name);
          n.args.push_back(parse_or());
          expect_rparen();
          return n;
        }
        n.kind = ExprKind::ident;
        n.name = std::string(name);
        return n;
      }
      case Tok::lparen: {
        advance();
        auto inner = parse_or();
        expect_rparen();
        return inner;
      }
      case Tok::end: throw QueryError("unexpected end of expression", cur_.pos);
      default: throw QueryError("unexpected '" + std::string(cur_.text) + "'", cur_.pos);
    }
  }

  void expect_rparen() {
    if (cur_.kind != Tok::rparen) {
      throw QueryError(cur_.kind == Tok::end ? "missing ')'"
                                             : "expected ')' before '" + std::string(cur_.text) + "'",
                       cur_.pos);
    }
    advance();
  }

  Lexer lex_;
  Token cur_;
};

}  // namespace

ExprNode parse_expression(std::string_view text) { return Parser(text).parse(); }

std::string to_string(const ExprNode& e) {
  switch (e.kind) {
    case ExprKind::number: {
      char buf[64];
      const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, e.number);
      std::string s(buf, ec == std::errc() ? ptr : buf);
      // Keep the literal lexable as a number, never an identifier.
      if (s.find_first_of(".eE") == std::string::npos && s.find("inf") == std::string::npos) s += ".0";
      return s;
    }
    case ExprKind::boolean: return e.boolean ? "true" : "false";
    case ExprKind::ident: return e.name;
    case ExprKind::unary: return "(" + std::string(op_symbol(e.op)) + to_string(e.args[0]) + ")";
    case ExprKind::binary:
      return "(" + to_string(e.args[0]) + " " + std::string(op_symbol(e.op)) + " " +
             to_string(e.args[1]) + ")";
    case ExprKind::call: return e.name + "(" + to_string(e.args[0]) + ")";
  }
  return {};
}

// ---------------------------------------------------------------------------
// JSON query

namespace {

const std::set<std::string, std::less<>> kTopLevelKeys = {
    "input",         "output",         "branches",           "force_all",
    "preselection",  "object_selections", "event_selection", "derived",
    "output_codec",  "output_basket_target", "strict_branches"};

ExprNode parse_in_context(const std::string& text, const std::string& context) {
  try {
    return parse_expression(text);
  } catch (const QueryError& e) {
    throw QueryError(context + ": " + e.message(), e.position());
  }
}

std::string require_string(const json& j, const std::string& what) {
  if (!j.is_string()) throw QueryError("'" + what + "' must be a string", 0);
  return j.get<std::string>();
}

}  // namespace

SkimQuery parse_query(std::string_view payload, const ParseOptions& options) {
  json doc;
  try {
    doc = json::parse(payload);
  } catch (const json::parse_error& e) {
    throw QueryError(std::string("malformed JSON: ") + e.what(), e.byte);
  }
  if (!doc.is_object()) throw QueryError("query must be a JSON object", 0);

  if (options.strict) {
    for (const auto& [key, _] : doc.items()) {
      if (!kTopLevelKeys.contains(key)) throw QueryError("unknown key '" + key + "'", 0);
    }
  }

  SkimQuery q;
  if (!doc.contains("input")) throw QueryError("missing 'input'", 0);
  q.input = require_string(doc["input"], "input");
  if (q.input.empty()) throw QueryError("'input' must not be empty", 0);
  if (!doc.contains("output")) throw QueryError("missing 'output'", 0);
  q.output = require_string(doc["output"], "output");
  if (q.output.empty()) throw QueryError("'output' must not be empty", 0);

  if (doc.contains("branches")) {
    const auto& b = doc["branches"];
    if (!b.is_array()) throw QueryError("'branches' must be an array of strings", 0);
    for (const auto& p : b) {
      auto pattern = require_string(p, "branches[]");
      const auto star = pattern.find('*');
      if (pattern.empty() || (star != std::string::npos && star != pattern.size() - 1)) {
        throw QueryError("bad branch pattern '" + pattern + "' (only a trailing '*' is allowed)", 0);
      }
      q.branches.push_back(std::move(pattern));
    }
  }
  if (doc.contains("force_all")) {
    if (!doc["force_all"].is_boolean()) throw QueryError("'force_all' must be a boolean", 0);
    q.force_all = doc["force_all"].get<bool>();
  }
  if (doc.contains("strict_branches")) {
    if (!doc["strict_branches"].is_boolean()) {
      throw QueryError("'strict_branches' must be a boolean", 0);
    }
    q.strict_branches = doc["strict_branches"].get<bool>();
  }

  if (doc.contains("preselection")) {
    const auto& p = doc["preselection"];
    std::vector<std::string> texts;
    if (p.is_string()) {
      texts.push_back(p.get<std::string>());
    } else if (p.is_array()) {
      for (const auto& t : p) texts.push_back(require_string(t, "preselection[]"));
    } else {
      throw QueryError("'preselection' must be a string or an array of strings", 0);
    }
    for (std::size_t i = 0; i < texts.size(); ++i) {
      q.preselection.push_back(parse_in_context(texts[i], "preselection[" + std::to_string(i) + "]"));
      q.preselection_text.push_back(texts[i]);
    }
  }

  if (doc.contains("object_selections")) {
    const auto& arr = doc["object_selections"];
    if (!arr.is_array()) throw QueryError("'object_selections' must be an array", 0);
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const auto& o = arr[i];
      const auto ctx = "object_selections[" + std::to_string(i) + "]";
      if (!o.is_object()) throw QueryError(ctx + " must be an object", 0);
      for (const auto& [key, _] : o.items()) {
        if (key != "collection" && key != "cut" && key != "min_count") {
          throw QueryError(ctx + ": unknown key '" + key + "'", 0);
        }
      }
      ObjectSelection sel;
      if (!o.contains("collection")) throw QueryError(ctx + ": missing 'collection'", 0);
      sel.collection = require_string(o["collection"], ctx + ".collection");
      if (!o.contains("cut")) throw QueryError(ctx + ": missing 'cut'", 0);
      sel.cut_text = require_string(o["cut"], ctx + ".cut");
      sel.cut = parse_in_context(sel.cut_text, ctx + ".cut");
      if (o.contains("min_count")) {
        if (!o["min_count"].is_number_integer() || o["min_count"].get<std::int64_t>() < 0) {
          throw QueryError(ctx + ": 'min_count' must be an integer >= 0", 0);
        }
        sel.min_count = o["min_count"].get<std::int64_t>();
      }
      q.object_selections.push_back(std::move(sel));
    }
  }

  if (doc.contains("derived")) {
    const auto& d = doc["derived"];
    if (!d.is_object()) throw QueryError("'derived' must be an object of name: expression", 0);
    for (const auto& [name, expr] : d.items()) {
      const auto text = require_string(expr, "derived." + name);
      q.derived.push_back({name, parse_in_context(text, "derived." + name), text});
    }
  }

  if (doc.contains("event_selection") && !doc["event_selection"].is_null()) {
    q.event_selection_text = require_string(doc["event_selection"], "event_selection");
    q.event_selection = parse_in_context(q.event_selection_text, "event_selection");
  }

  if (doc.contains("output_codec")) {
    const auto name = require_string(doc["output_codec"], "output_codec");
    q.output_codec = codec_from_name(name);
    if (!q.output_codec) throw QueryError("unknown codec '" + name + "'", 0);
  }
  if (doc.contains("output_basket_target")) {
    const auto& t = doc["output_basket_target"];
    if (!t.is_number_unsigned() || t.get<std::uint64_t>() == 0) {
      throw QueryError("'output_basket_target' must be a positive integer", 0);
    }
    q.output_basket_target = t.get<std::uint64_t>();
  }
  return q;
}

MinimalSets parse_minimal_sets(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw QueryError(std::string("malformed minimal-set config: ") + e.what(), e.byte);
  }
  if (!doc.is_object()) throw QueryError("minimal-set config must be an object", 0);
  MinimalSets sets;
  for (const auto& [pattern, list] : doc.items()) {
    if (!is_wildcard(pattern)) {
      throw QueryError("minimal-set key '" + pattern + "' is not a trailing-* wildcard", 0);
    }
    if (!list.is_array()) throw QueryError("minimal set '" + pattern + "' must be an array", 0);
    auto& out = sets[pattern];
    for (const auto& b : list) out.push_back(require_string(b, pattern + "[]"));
  }
  return sets;
}

MinimalSets load_minimal_sets(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read minimal-set config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_minimal_sets(ss.str());
}

// ---------------------------------------------------------------------------
// Wildcards and classification

bool is_wildcard(std::string_view pattern) {
  return !pattern.empty() && pattern.back() == '*' &&
         pattern.find('*') == pattern.size() - 1;
}

Expansion expand_wildcards(const std::vector<std::string>& patterns,
                           const colfmt::DatasetHeader& schema, const MinimalSets& minimal_sets,
                           bool force_all) {
  std::vector<bool> chosen(schema.branches.size(), false);
  Expansion out;
  for (const auto& pattern : patterns) {
    if (!is_wildcard(pattern)) {
      if (const auto i = schema.find(pattern)) {
        chosen[*i] = true;
      } else {
        out.missing.push_back(pattern);
        out.warnings.push_back("branch '" + pattern + "' not found in input; skipped");
      }
      continue;
    }
    const auto prefix = std::string_view(pattern).substr(0, pattern.size() - 1);
    std::vector<std::size_t> matches;
    for (std::size_t i = 0; i < schema.branches.size(); ++i) {
      if (schema.branches[i].name.starts_with(prefix)) matches.push_back(i);
    }
    const auto set = minimal_sets.find(pattern);
    if (force_all || set == minimal_sets.end()) {
      for (auto i : matches) chosen[i] = true;
      continue;
    }
    std::set<std::string_view> keep(set->second.begin(), set->second.end());
    std::size_t kept = 0;
    std::vector<std::string_view> excluded;
    for (std::size_t i = 0; i < schema.branches.size(); ++i) {
      const auto& name = schema.branches[i].name;
      if (keep.contains(name)) {
        chosen[i] = true;
        if (name.starts_with(prefix)) ++kept;
      }
    }
    for (auto i : matches) {
      if (!keep.contains(schema.branches[i].name)) excluded.push_back(schema.branches[i].name);
    }
    std::string msg = "wildcard '" + pattern + "' mapped to its minimal set: kept " +
                      std::to_string(kept) + " of " + std::to_string(matches.size()) +
                      " matching branches, excluded " + std::to_string(excluded.size());
    if (!excluded.empty()) {
      msg += " (e.g.";
      for (std::size_t k = 0; k < std::min<std::size_t>(3, excluded.size()); ++k) {
        msg += " " + std::string(excluded[k]);
      }
      msg += "); set \"force_all\": true to keep them";
    }
    out.warnings.push_back(std::move(msg));
    out.excluded[pattern] = excluded.size();
  }
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    if (chosen[i]) out.branches.push_back(schema.branches[i].name);
  }
  return out;
}

std::vector<std::string> BranchPlan::output_only() const {
  std::set<std::string_view> crit(criteria_branches.begin(), criteria_branches.end());
  std::vector<std::string> out;
  for (const auto& b : output_branches) {
    if (!crit.contains(b)) out.push_back(b);
  }
  return out;
}

std::vector<std::string> with_counters(const std::vector<std::string>& branches,
                                       const colfmt::DatasetHeader& schema) {
  std::vector<bool> chosen(schema.branches.size(), false);
  for (const auto& name : branches) {
    const auto i = schema.find(name);
    if (!i) throw PlanError("branch '" + name + "' is not in the input schema");
    chosen[*i] = true;
    const auto& meta = schema.branches[*i];
    if (meta.is_jagged()) chosen[*schema.find(meta.counter_branch)] = true;
  }
  std::vector<std::string> out;
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    if (chosen[i]) out.push_back(schema.branches[i].name);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binding

namespace {

enum class Scope { preselection, object, event, derived };

std::string_view scope_name(Scope s) {
  switch (s) {
    case Scope::preselection: return "preselection";
    case Scope::object: return "object selection";
    case Scope::event: return "event selection";
    case Scope::derived: return "derived variable";
  }
  return "";
}

class Binder {
 public:
  Binder(const colfmt::DatasetHeader& schema, BoundSelection& out,
         const std::vector<DerivedVariable>& derived)
      : schema_(schema), out_(out), derived_(derived) {}

  BoundExpr bind_top(const ExprNode& e, Scope scope, ValueKind want, const std::string& context,
                     std::set<std::size_t>& refs, std::optional<std::size_t> collection = {}) {
    scope_ = scope;
    collection_ = collection;
    refs_ = &refs;
    context_ = context;
    auto b = bind(e);
    if (b.type != want) {
      fail(e, std::string("expression must be ") +
                  (want == ValueKind::boolean ? "boolean" : "numeric"));
    }
    return b;
  }

  std::size_t collection_by_name(const std::string& name, const ExprNode* at) {
    for (std::size_t i = 0; i < out_.collections.size(); ++i) {
      if (out_.collections[i].name == name) return i;
    }
    const auto counter = schema_.find("n" + name);
    if (!counter || schema_.branches[*counter].is_jagged() ||
        schema_.branches[*counter].value_type != colfmt::ValueType::i32) {
      const auto msg = "unknown collection '" + name + "' (no scalar i32 counter 'n" + name + "')";
      if (at) fail(*at, msg);
      throw PlanError(context_ + ": " + msg);
    }
    out_.collections.push_back({name, *counter});
    return out_.collections.size() - 1;
  }

 private:
  [[noreturn]] void fail(const ExprNode& at, const std::string& msg) const {
    throw PlanError(context_ + ": " + msg + " (at position " + std::to_string(at.position) + ")");
  }

  std::size_t collection_of(std::size_t jagged_branch) {
    const auto& counter = schema_.branches[jagged_branch].counter_branch;
    const auto name = counter.size() > 1 && counter[0] == 'n' ? counter.substr(1) : counter;
    for (std::size_t i = 0; i < out_.collections.size(); ++i) {
      if (out_.collections[i].counter == *schema_.find(counter)) return i;
    }
    out_.collections.push_back({name, *schema_.find(counter)});
    return out_.collections.size() - 1;
  }

  ValueKind branch_kind(std::size_t i) const {
    return schema_.branches[i].value_type == colfmt::ValueType::boolean ? ValueKind::boolean
                                                                        : ValueKind::number;
  }

  void ref_jagged(std::size_t i) {
    refs_->insert(i);
    refs_->insert(*schema_.find(schema_.branches[i].counter_branch));
  }

  BoundExpr bind_ident(const ExprNode& e) {
    BoundExpr b;
    if (scope_ == Scope::object) {
      const auto& coll = out_.collections[*collection_];
      for (const auto& candidate : {coll.name + "_" + e.name, e.name}) {
        const auto i = schema_.find(candidate);
        if (i && schema_.branches[*i].is_jagged() &&
            *schema_.find(schema_.branches[*i].counter_branch) == coll.counter) {
          b.kind = BoundExpr::Kind::field;
          b.branch = *i;
          b.type = branch_kind(*i);
          ref_jagged(*i);
          return b;
        }
      }
    }
    if (scope_ == Scope::event) {
      for (std::size_t d = 0; d < out_.derived.size(); ++d) {
        if (out_.derived[d].name == e.name) {
          b.kind = BoundExpr::Kind::derived;
          b.derived = d;
          b.type = out_.derived[d].expr.type;
          return b;
        }
      }
    }
    if (scope_ == Scope::derived) {
      for (const auto& d : derived_) {
        if (d.name == e.name) fail(e, "derived variables may not reference each other ('" + e.name + "')");
      }
    }
    const auto i = schema_.find(e.name);
    if (!i) fail(e, "unknown branch '" + e.name + "'");
    const auto& meta = schema_.branches[*i];
    if (meta.is_jagged()) {
      if (scope_ == Scope::object) {
        fail(e, "'" + e.name + "' belongs to another collection");
      }
      fail(e, "jagged branch '" + e.name + "' is not allowed in " + std::string(scope_name(scope_)) +
                  "; use sum()/count() or an object selection");
    }
    b.kind = BoundExpr::Kind::scalar;
    b.branch = *i;
    b.type = branch_kind(*i);
    refs_->insert(*i);
    return b;
  }

  BoundExpr bind_call(const ExprNode& e) {
    BoundExpr b;
    const auto& arg = e.args.at(0);
    if (e.name == "abs") {
      b.kind = BoundExpr::Kind::abs;
      b.args.push_back(bind(arg));
      if (b.args[0].type != ValueKind::number) fail(e, "abs() needs a numeric argument");
      return b;
    }
    if (scope_ == Scope::preselection || scope_ == Scope::object) {
      fail(e, e.name + "() is not allowed in " + std::string(scope_name(scope_)));
    }
    if (arg.kind != ExprKind::ident) fail(arg, e.name + "() takes a branch or collection name");
    if (e.name == "count") {
      b.kind = BoundExpr::Kind::count;
      if (const auto i = schema_.find(arg.name); i && schema_.branches[*i].is_jagged()) {
        b.collection = collection_of(*i);
      } else {
        b.collection = collection_by_name(arg.name, &arg);
      }
      b.branch = out_.collections[b.collection].counter;
      refs_->insert(b.branch);
      return b;
    }
    // sum
    const auto i = schema_.find(arg.name);
    if (!i) fail(arg, "unknown branch '" + arg.name + "'");
    const auto& meta = schema_.branches[*i];
    if (!meta.is_jagged()) fail(arg, "sum() needs a jagged branch, '" + arg.name + "' is scalar");
    if (meta.value_type == colfmt::ValueType::boolean) fail(arg, "sum() over a boolean branch");
    b.kind = BoundExpr::Kind::sum;
    b.branch = *i;
    b.collection = collection_of(*i);
    ref_jagged(*i);
    return b;
  }

  BoundExpr bind(const ExprNode& e) {
    BoundExpr b;
    switch (e.kind) {
      case ExprKind::number:
        b.kind = BoundExpr::Kind::constant;
        b.value = e.number;
        return b;
      case ExprKind::boolean:
        b.kind = BoundExpr::Kind::constant;
        b.type = ValueKind::boolean;
        b.value = e.boolean ? 1.0 : 0.0;
        return b;
      case ExprKind::ident: return bind_ident(e);
      case ExprKind::call: return bind_call(e);
      case ExprKind::unary: {
        b.kind = BoundExpr::Kind::unary;
        b.op = e.op;
        b.args.push_back(bind(e.args[0]));
        const auto want = e.op == Op::lnot ? ValueKind::boolean : ValueKind::number;
        if (b.args[0].type != want) {
          fail(e, std::string("operator '") + std::string(op_symbol(e.op)) + "' needs a " +
                      (want == ValueKind::boolean ? "boolean" : "numeric") + " operand");
        }
        b.type = want;
        return b;
      }
      case ExprKind::binary: {
        b.kind = BoundExpr::Kind::binary;
        b.op = e.op;
        b.args.push_back(bind(e.args[0]));
        b.args.push_back(bind(e.args[1]));
        const auto lt = b.args[0].type;
        const auto rt = b.args[1].type;
        const auto sym = std::string(op_symbol(e.op));
        switch (e.op) {
          case Op::add:
          case Op::sub:
          case Op::mul:
            if (lt != ValueKind::number || rt != ValueKind::number) {
              fail(e, "operator '" + sym + "' needs numeric operands");
            }
            b.type = ValueKind::number;
            break;
          case Op::lt:
          case Op::le:
          case Op::gt:
          case Op::ge:
            if (lt != ValueKind::number || rt != ValueKind::number) {
              fail(e, "operator '" + sym + "' needs numeric operands");
            }
            b.type = ValueKind::boolean;
            break;
          case Op::eq:
          case Op::ne:
            if (lt != rt) fail(e, "operator '" + sym + "' compares a boolean with a number");
            b.type = ValueKind::boolean;
            break;
          case Op::land:
          case Op::lor:
            if (lt != ValueKind::boolean || rt != ValueKind::boolean) {
              fail(e, "operator '" + sym + "' needs boolean operands");
            }
            b.type = ValueKind::boolean;
            break;
          default: fail(e, "bad binary operator");
        }
        return b;
      }
    }
    fail(e, "bad expression node");
  }

  const colfmt::DatasetHeader& schema_;
  BoundSelection& out_;
  const std::vector<DerivedVariable>& derived_;
  Scope scope_ = Scope::event;
  std::optional<std::size_t> collection_;
  std::set<std::size_t>* refs_ = nullptr;
  std::string context_;
};

std::vector<std::size_t> sorted(const std::set<std::size_t>& s) { return {s.begin(), s.end()}; }

}  // namespace

BoundSelection bind_selection(const SkimQuery& query, const colfmt::DatasetHeader& schema) {
  BoundSelection out;
  Binder binder(schema, out, query.derived);

  std::set<std::size_t> pre_refs;
  for (std::size_t i = 0; i < query.preselection.size(); ++i) {
    out.preselection.push_back(binder.bind_top(query.preselection[i], Scope::preselection,
                                               ValueKind::boolean,
                                               "preselection[" + std::to_string(i) + "]", pre_refs));
  }
  out.preselection_branches = sorted(pre_refs);

  for (std::size_t i = 0; i < query.object_selections.size(); ++i) {
    const auto& sel = query.object_selections[i];
    const auto ctx = "object_selections[" + std::to_string(i) + "]";
    std::set<std::size_t> refs;
    BoundObjectSelection b;
    b.collection = binder.collection_by_name(sel.collection, nullptr);
    refs.insert(out.collections[b.collection].counter);
    b.cut = binder.bind_top(sel.cut, Scope::object, ValueKind::boolean, ctx, refs, b.collection);
    b.min_count = sel.min_count;
    b.branches = sorted(refs);
    for (auto r : b.branches) {
      if (schema.branches[r].is_jagged()) b.fields.push_back(r);
    }
    out.objects.push_back(std::move(b));
  }

  std::set<std::size_t> event_refs;
  std::set<std::string> names;
  for (const auto& d : query.derived) {
    if (!names.insert(d.name).second) throw PlanError("derived variable '" + d.name + "' defined twice");
    if (schema.find(d.name)) {
      throw PlanError("derived variable '" + d.name + "' shadows a branch of the same name");
    }
    auto bound = binder.bind_top(d.expr, Scope::derived, ValueKind::number, "derived." + d.name,
                                 event_refs);
    out.derived.push_back({d.name, std::move(bound)});
  }
  if (query.event_selection) {
    out.event = binder.bind_top(*query.event_selection, Scope::event, ValueKind::boolean,
                                "event_selection", event_refs);
  }
  out.event_branches = sorted(event_refs);

  std::set<std::size_t> all(pre_refs.begin(), pre_refs.end());
  for (const auto& o : out.objects) all.insert(o.branches.begin(), o.branches.end());
  all.insert(event_refs.begin(), event_refs.end());
  out.criteria = sorted(all);
  return out;
}

BranchPlan classify_branches(const SkimQuery& query, const std::vector<std::string>& resolved,
                             const colfmt::DatasetHeader& schema) {
  const auto sel = bind_selection(query, schema);
  BranchPlan plan;
  for (auto i : sel.criteria) plan.criteria_branches.push_back(schema.branches[i].name);
  plan.output_branches = with_counters(resolved, schema);
  return plan;
}

SkimPlan plan_skim(const SkimQuery& query, const colfmt::DatasetHeader& schema,
                   const MinimalSets& minimal_sets) {
  auto expansion = expand_wildcards(query.branches, schema, minimal_sets, query.force_all);
  if (query.strict_branches && !expansion.missing.empty()) {
    std::string names;
    for (const auto& m : expansion.missing) names += (names.empty() ? "" : ", ") + m;
    throw PlanError("branches not found in input: " + names);
  }
  SkimPlan plan;
  plan.query = query;
  plan.selection = bind_selection(query, schema);
  plan.branches = classify_branches(query, expansion.branches, schema);
  plan.branches.warnings = std::move(expansion.warnings);
  plan.criteria = plan.selection.criteria;
  std::set<std::size_t> crit(plan.criteria.begin(), plan.criteria.end());
  for (const auto& name : plan.branches.output_branches) {
    const auto i = *schema.find(name);
    plan.output.push_back(i);
    if (!crit.contains(i)) plan.output_only.push_back(i);
  }
  return plan;
}

}  // namespace skimlite::query
