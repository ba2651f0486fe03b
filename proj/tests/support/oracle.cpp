#include "oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "json.hpp"

namespace oracle {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Tables

void Table::finalize() {
  offsets.assign(schema.size(), {});
  for (std::size_t b = 0; b < schema.size(); ++b) {
    if (schema[b].kind != BranchKind::jagged) continue;
    const int c = index(schema[b].counter_branch);
    auto& off = offsets[b];
    off.assign(n_events + 1, 0);
    for (std::uint64_t e = 0; e < n_events; ++e) {
      off[e + 1] = off[e] + static_cast<std::size_t>(value(static_cast<std::size_t>(c), e));
    }
  }
}

int Table::index(const std::string& name) const {
  for (std::size_t i = 0; i < schema.size(); ++i) {
    if (schema[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

double Table::value(std::size_t branch, std::size_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v[i]); }, columns[branch]);
}

std::size_t Table::count(std::size_t branch, std::uint64_t event) const {
  return offsets[branch][event + 1] - offsets[branch][event];
}

namespace {

ColumnValues empty_values(ValueType t) {
  switch (t) {
    case ValueType::f32: return std::vector<float>{};
    case ValueType::f64: return std::vector<double>{};
    case ValueType::i32: return std::vector<std::int32_t>{};
    case ValueType::u8:
    case ValueType::boolean: return std::vector<std::uint8_t>{};
  }
  return std::vector<float>{};
}

template <typename T>
T bits_as(std::uint64_t bits) {
  T v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

void push_random(ColumnValues& col, ValueType t, std::mt19937_64& rng, bool special) {
  std::uniform_real_distribution<double> real(-10.0, 100.0);
  switch (t) {
    case ValueType::f32: {
      auto& v = std::get<std::vector<float>>(col);
      if (special && rng() % 8 == 0) {
        static const float specials[] = {std::numeric_limits<float>::quiet_NaN(),
                                         std::numeric_limits<float>::infinity(),
                                         -std::numeric_limits<float>::infinity(), -0.0f,
                                         std::numeric_limits<float>::denorm_min(),
                                         std::numeric_limits<float>::max()};
        v.push_back(rng() % 2 ? specials[rng() % 6] : bits_as<float>(rng() & 0xffffffffu));
      } else {
        v.push_back(static_cast<float>(real(rng)));
      }
      break;
    }
    case ValueType::f64: {
      auto& v = std::get<std::vector<double>>(col);
      if (special && rng() % 8 == 0) {
        v.push_back(bits_as<double>(rng()));
      } else {
        v.push_back(real(rng));
      }
      break;
    }
    case ValueType::i32: {
      auto& v = std::get<std::vector<std::int32_t>>(col);
      if (special && rng() % 8 == 0) {
        v.push_back(static_cast<std::int32_t>(rng()));
      } else {
        v.push_back(static_cast<std::int32_t>(rng() % 101) - 50);
      }
      break;
    }
    case ValueType::u8: std::get<std::vector<std::uint8_t>>(col).push_back(static_cast<std::uint8_t>(rng())); break;
    case ValueType::boolean: std::get<std::vector<std::uint8_t>>(col).push_back(static_cast<std::uint8_t>(rng() % 2)); break;
  }
}

ValueType random_type(std::mt19937_64& rng) {
  static const ValueType types[] = {ValueType::f32, ValueType::f64, ValueType::i32, ValueType::u8,
                                    ValueType::boolean};
  return types[rng() % 5];
}

}  // namespace

Table random_table(std::mt19937_64& rng, const TableOptions& o) {
  Table t;
  t.n_events = o.n_events;
  std::vector<std::pair<std::size_t, std::vector<std::size_t>>> colls;  // counter, fields
  for (int s = 0; s < o.n_scalars; ++s) {
    t.schema.push_back({"s" + std::to_string(s), BranchKind::scalar, s == 0 ? ValueType::f32 : random_type(rng), ""});
  }
  for (int c = 0; c < o.n_collections; ++c) {
    const auto name = "C" + std::to_string(c);
    t.schema.push_back({"n" + name, BranchKind::scalar, ValueType::i32, ""});
    std::vector<std::size_t> fields;
    const auto counter = t.schema.size() - 1;
    for (int f = 0; f < o.fields_per_collection; ++f) {
      t.schema.push_back({name + "_f" + std::to_string(f), BranchKind::jagged,
                          f == 0 ? ValueType::f32 : random_type(rng), "n" + name});
      fields.push_back(t.schema.size() - 1);
    }
    colls.emplace_back(counter, fields);
  }
  for (const auto& b : t.schema) t.columns.push_back(empty_values(b.value_type));

  std::poisson_distribution<int> mult(o.mean_multiplicity);
  for (std::uint64_t e = 0; e < o.n_events; ++e) {
    for (int s = 0; s < o.n_scalars; ++s) {
      push_random(t.columns[static_cast<std::size_t>(s)], t.schema[static_cast<std::size_t>(s)].value_type, rng,
                  o.special_floats);
    }
    for (const auto& [counter, fields] : colls) {
      const int n = std::min(mult(rng), 12);
      std::get<std::vector<std::int32_t>>(t.columns[counter]).push_back(n);
      for (auto f : fields) {
        for (int k = 0; k < n; ++k) push_random(t.columns[f], t.schema[f].value_type, rng, o.special_floats);
      }
    }
  }
  t.finalize();
  return t;
}

bool same_values(const ColumnValues& a, const ColumnValues& b) {
  if (a.index() != b.index()) return false;
  return std::visit(
      [&b](const auto& va) {
        using V = std::decay_t<decltype(va)>;
        const auto& vb = std::get<V>(b);
        return va.size() == vb.size() &&
               (va.empty() || std::memcmp(va.data(), vb.data(), va.size() * sizeof(va[0])) == 0);
      },
      a);
}

ColumnValues select_events(const Table& t, std::size_t branch, const std::vector<std::uint64_t>& events) {
  ColumnValues out = empty_values(t.schema[branch].value_type);
  std::visit(
      [&](auto& dst) {
        const auto& src = std::get<std::decay_t<decltype(dst)>>(t.columns[branch]);
        for (auto e : events) {
          if (t.schema[branch].kind == BranchKind::scalar) {
            dst.push_back(src[e]);
          } else {
            for (auto i = t.offsets[branch][e]; i < t.offsets[branch][e + 1]; ++i) dst.push_back(src[i]);
          }
        }
      },
      out);
  return out;
}

// ---------------------------------------------------------------------------
// Queries

Collections collections_of(const Table& t) {
  Collections c;
  for (std::size_t b = 0; b < t.schema.size(); ++b) {
    const auto& s = t.schema[b];
    if (s.kind != BranchKind::jagged) continue;
    const auto name = s.counter_branch.substr(1);
    auto it = std::find(c.names.begin(), c.names.end(), name);
    if (it == c.names.end()) {
      c.names.push_back(name);
      c.counter.push_back(t.index(s.counter_branch));
      c.fields.emplace_back();
      it = c.names.end() - 1;
    }
    c.fields[static_cast<std::size_t>(it - c.names.begin())].push_back(static_cast<int>(b));
  }
  return c;
}

namespace {

using Kind = Expr::Kind;

ExprPtr make(Expr e) { return std::make_shared<const Expr>(std::move(e)); }

ExprPtr number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  Expr e;
  e.kind = Kind::number;
  e.literal = buf;
  return make(e);
}

ExprPtr binary(std::string op, ExprPtr a, ExprPtr b) {
  Expr e;
  e.kind = Kind::binary;
  e.op = std::move(op);
  e.args = {std::move(a), std::move(b)};
  return make(e);
}

ExprPtr unary(Kind k, ExprPtr a) {
  Expr e;
  e.kind = k;
  e.args = {std::move(a)};
  return make(e);
}

bool is_bool(const Table& t, int branch) {
  return t.schema[static_cast<std::size_t>(branch)].value_type == ValueType::boolean;
}

struct Scope {
  enum { pre, object, derived, event } where = pre;
  int collection = -1;
  int n_derived = 0;
};

struct Ctx {
  const Table& t;
  const Collections& colls;
  std::uint64_t event = 0;
  std::size_t object = 0;
  const std::vector<std::vector<bool>>* masks = nullptr;  // per collection
  const std::vector<double>* derived = nullptr;
};

double eval(const Expr& e, const Ctx& c) {
  switch (e.kind) {
    case Kind::number: return std::strtod(e.literal.c_str(), nullptr);
    case Kind::boolean: return e.flag ? 1.0 : 0.0;
    case Kind::scalar: return c.t.scalar(static_cast<std::size_t>(e.branch), c.event);
    case Kind::field: return c.t.field(static_cast<std::size_t>(e.branch), c.event, c.object);
    case Kind::derived: return (*c.derived)[static_cast<std::size_t>(e.derived)];
    case Kind::sum: {
      const auto& mask = (*c.masks)[static_cast<std::size_t>(e.collection)];
      double s = 0.0;
      for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) s += c.t.field(static_cast<std::size_t>(e.branch), c.event, i);
      }
      return s;
    }
    case Kind::count: {
      const auto& mask = (*c.masks)[static_cast<std::size_t>(e.collection)];
      return static_cast<double>(std::count(mask.begin(), mask.end(), true));
    }
    case Kind::abs: return std::abs(eval(*e.args[0], c));
    case Kind::neg: return -eval(*e.args[0], c);
    case Kind::lnot: return eval(*e.args[0], c) != 0.0 ? 0.0 : 1.0;
    case Kind::binary: {
      const double a = eval(*e.args[0], c);
      const double b = eval(*e.args[1], c);
      const auto& op = e.op;
      if (op == "+") return a + b;
      if (op == "-") return a - b;
      if (op == "*") return a * b;
      if (op == "<") return a < b;
      if (op == "<=") return a <= b;
      if (op == ">") return a > b;
      if (op == ">=") return a >= b;
      if (op == "==") return a == b;
      if (op == "!=") return a != b;
      if (op == "&&") return (a != 0.0) && (b != 0.0);
      if (op == "||") return (a != 0.0) || (b != 0.0);
      throw std::logic_error("bad op " + op);
    }
  }
  throw std::logic_error("bad expr");
}

class Builder {
 public:
  Builder(std::mt19937_64& rng, const Table& t, const Collections& colls)
      : rng_(rng), t_(t), colls_(colls) {}

  int pick(int n) { return static_cast<int>(rng_() % static_cast<std::uint64_t>(n)); }
  bool coin(double p) { return std::uniform_real_distribution<double>(0, 1)(rng_) < p; }

  std::vector<int> scalars(bool boolean) const {
    std::vector<int> out;
    for (std::size_t b = 0; b < t_.schema.size(); ++b) {
      if (t_.schema[b].kind == BranchKind::scalar && is_bool(t_, static_cast<int>(b)) == boolean) {
        out.push_back(static_cast<int>(b));
      }
    }
    return out;
  }

  std::vector<int> fields(int coll, bool boolean) const {
    std::vector<int> out;
    for (int f : colls_.fields[static_cast<std::size_t>(coll)]) {
      if (is_bool(t_, f) == boolean) out.push_back(f);
    }
    return out;
  }

  ExprPtr num_leaf(const Scope& s) {
    for (;;) {
      const int choice = pick(4);
      if (choice == 0) return number(std::uniform_real_distribution<double>(-5, 50)(rng_));
      if (choice == 1) {
        const auto sc = scalars(false);
        if (sc.empty()) continue;
        Expr e;
        e.kind = Kind::scalar;
        e.branch = sc[static_cast<std::size_t>(pick(static_cast<int>(sc.size())))];
        return make(e);
      }
      if (s.where == Scope::object) {
        const auto f = fields(s.collection, false);
        Expr e;
        e.kind = Kind::field;
        e.branch = f[static_cast<std::size_t>(pick(static_cast<int>(f.size())))];
        return make(e);
      }
      if (s.where == Scope::pre || colls_.names.empty()) continue;
      if (s.where == Scope::event && s.n_derived > 0 && choice == 3) {
        Expr e;
        e.kind = Kind::derived;
        e.derived = pick(s.n_derived);
        return make(e);
      }
      Expr e;
      e.collection = pick(static_cast<int>(colls_.names.size()));
      const auto f = fields(e.collection, false);
      if (coin(0.5)) {
        e.kind = Kind::sum;
        e.branch = f[static_cast<std::size_t>(pick(static_cast<int>(f.size())))];
      } else {
        e.kind = Kind::count;
      }
      return make(e);
    }
  }

  ExprPtr num(const Scope& s, int depth) {
    if (depth <= 0 || coin(0.5)) return num_leaf(s);
    switch (pick(4)) {
      case 0: return unary(Kind::abs, num(s, depth - 1));
      case 1: return unary(Kind::neg, num(s, depth - 1));
      default: {
        static const char* ops[] = {"+", "-", "*"};
        return binary(ops[pick(3)], num(s, depth - 1), num(s, depth - 1));
      }
    }
  }

  ExprPtr bool_leaf(const Scope& s) {
    std::vector<int> pool;
    if (s.where == Scope::object) pool = fields(s.collection, true);
    if (pool.empty() || coin(0.5)) pool = scalars(true);
    if (pool.empty() || coin(0.1)) {
      Expr e;
      e.kind = Kind::boolean;
      e.flag = coin(0.7);
      return make(e);
    }
    Expr e;
    e.kind = s.where == Scope::object && !is_bool_scalar(pool.front()) ? Kind::field : Kind::scalar;
    e.branch = pool[static_cast<std::size_t>(pick(static_cast<int>(pool.size())))];
    return make(e);
  }

  bool is_bool_scalar(int b) const { return t_.schema[static_cast<std::size_t>(b)].kind == BranchKind::scalar; }

  /// Comparison with a threshold drawn from the data so cuts are neither
  /// always true nor always false.
  ExprPtr comparison(const Scope& s, int depth, const std::function<std::optional<double>(const Expr&)>& sample) {
    auto lhs = num(s, depth);
    while (lhs->kind == Kind::number) lhs = num(s, depth);  // literal vs literal is constant
    static const char* ops[] = {"<", "<=", ">", ">=", "==", "!="};
    const auto v = sample(*lhs);
    const double threshold = v && std::isfinite(*v) ? std::round(*v * 100) / 100
                                                    : std::uniform_real_distribution<double>(-5, 50)(rng_);
    const char* op = ops[pick(coin(0.9) ? 4 : 6)];
    return coin(0.8) ? binary(op, lhs, number(threshold)) : binary(op, lhs, num(s, depth));
  }

  ExprPtr boolean(const Scope& s, int depth, const std::function<std::optional<double>(const Expr&)>& sample) {
    if (depth <= 0) return coin(0.8) ? comparison(s, 0, sample) : bool_leaf(s);
    switch (pick(6)) {
      case 0: return unary(Kind::lnot, boolean(s, depth - 1, sample));
      case 1: return binary("&&", boolean(s, depth - 1, sample), boolean(s, depth - 1, sample));
      case 2: return binary("||", boolean(s, depth - 1, sample), boolean(s, depth - 1, sample));
      case 3: return bool_leaf(s);
      default: return comparison(s, depth - 1, sample);
    }
  }

 private:
  std::mt19937_64& rng_;
  const Table& t_;
  const Collections& colls_;
};

std::vector<std::vector<bool>> all_true_masks(const Table& t, const Collections& colls, std::uint64_t e) {
  std::vector<std::vector<bool>> masks;
  for (std::size_t c = 0; c < colls.names.size(); ++c) {
    const auto n = static_cast<std::size_t>(t.scalar(static_cast<std::size_t>(colls.counter[c]), e));
    masks.emplace_back(n, true);
  }
  return masks;
}

std::string field_name(const Table& t, int branch) { return t.schema[static_cast<std::size_t>(branch)].name; }

}  // namespace

std::string render(const Expr& e, const Table& t, const Query& q, int scope_collection) {
  const auto colls = collections_of(t);
  switch (e.kind) {
    case Kind::number: return e.literal;
    case Kind::boolean: return e.flag ? "true" : "false";
    case Kind::scalar: return field_name(t, e.branch);
    case Kind::field: {
      const auto name = field_name(t, e.branch);
      if (scope_collection >= 0) {
        const auto prefix = colls.names[static_cast<std::size_t>(scope_collection)] + "_";
        if (name.starts_with(prefix)) return name.substr(prefix.size());
      }
      return name;
    }
    case Kind::derived: return q.derived[static_cast<std::size_t>(e.derived)].first;
    case Kind::sum: return "sum(" + field_name(t, e.branch) + ")";
    case Kind::count: return "count(" + colls.names[static_cast<std::size_t>(e.collection)] + ")";
    case Kind::abs: return "abs(" + render(*e.args[0], t, q, scope_collection) + ")";
    case Kind::neg: return "(-" + render(*e.args[0], t, q, scope_collection) + ")";
    case Kind::lnot: return "(!" + render(*e.args[0], t, q, scope_collection) + ")";
    case Kind::binary:
      return "(" + render(*e.args[0], t, q, scope_collection) + " " + e.op + " " +
             render(*e.args[1], t, q, scope_collection) + ")";
  }
  return "?";
}

std::string to_json(const Query& q, const Table& t, const std::string& input, const std::string& output) {
  const auto colls = collections_of(t);
  json j{{"input", input}, {"output", output}, {"branches", q.branches}};
  if (!q.preselection.empty()) {
    json pre = json::array();
    for (const auto& p : q.preselection) pre.push_back(render(*p, t, q));
    j["preselection"] = pre;
  }
  if (!q.objects.empty()) {
    json arr = json::array();
    for (const auto& o : q.objects) {
      arr.push_back({{"collection", colls.names[static_cast<std::size_t>(o.collection)]},
                     {"cut", render(*o.cut, t, q, o.collection)},
                     {"min_count", o.min_count}});
    }
    j["object_selections"] = arr;
  }
  if (!q.derived.empty()) {
    json d = json::object();
    for (const auto& [name, e] : q.derived) d[name] = render(*e, t, q);
    j["derived"] = d;
  }
  if (q.event) j["event_selection"] = render(*q.event, t, q);
  return j.dump(2);
}

Query random_query(std::mt19937_64& rng, const Table& t) {
  const auto colls = collections_of(t);
  Builder b(rng, t, colls);
  Query q;

  // Output branches: literals and whole-collection wildcards.
  for (std::size_t i = 0; i < t.schema.size(); ++i) {
    if (b.coin(0.3)) q.branches.push_back(t.schema[i].name);
  }
  if (!colls.names.empty() && b.coin(0.5)) {
    q.branches.push_back(colls.names[static_cast<std::size_t>(b.pick(static_cast<int>(colls.names.size())))] + "_*");
  }
  if (q.branches.empty()) q.branches.push_back(t.schema.front().name);

  const auto sample_event = [&]() -> std::uint64_t {
    return t.n_events == 0 ? 0 : rng() % t.n_events;
  };

  const int n_pre = b.pick(3);
  for (int i = 0; i < n_pre; ++i) {
    Scope s;
    s.where = Scope::pre;
    q.preselection.push_back(b.boolean(s, b.pick(3), [&](const Expr& e) -> std::optional<double> {
      if (t.n_events == 0) return std::nullopt;
      return eval(e, Ctx{t, colls, sample_event()});
    }));
  }

  std::vector<int> order(colls.names.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::shuffle(order.begin(), order.end(), rng);
  const int n_obj = colls.names.empty() ? 0 : b.pick(static_cast<int>(colls.names.size()) + 1);
  for (int i = 0; i < n_obj; ++i) {
    Scope s;
    s.where = Scope::object;
    s.collection = order[static_cast<std::size_t>(i)];
    const int counter = colls.counter[static_cast<std::size_t>(s.collection)];
    auto cut = b.boolean(s, b.pick(3), [&](const Expr& e) -> std::optional<double> {
      for (int tries = 0; tries < 20 && t.n_events > 0; ++tries) {
        const auto ev = sample_event();
        const auto n = static_cast<std::size_t>(t.scalar(static_cast<std::size_t>(counter), ev));
        if (n == 0) continue;
        Ctx c{t, colls, ev, static_cast<std::size_t>(rng() % n)};
        return eval(e, c);
      }
      return std::nullopt;
    });
    q.objects.push_back({s.collection, cut, b.pick(2)});
  }

  const int n_derived = colls.names.empty() ? 0 : b.pick(3);
  for (int i = 0; i < n_derived; ++i) {
    Scope s;
    s.where = Scope::derived;
    auto expr = b.num(s, b.pick(3));
    q.derived.emplace_back("d" + std::to_string(i), expr);
  }

  if (b.coin(0.8)) {
    Scope s;
    s.where = Scope::event;
    s.n_derived = n_derived;
    q.event = b.boolean(s, b.pick(3), [&](const Expr& e) -> std::optional<double> {
      if (t.n_events == 0) return std::nullopt;
      const auto ev = sample_event();
      const auto masks = all_true_masks(t, colls, ev);
      std::vector<double> derived;
      Ctx c{t, colls, ev, 0, &masks};
      for (const auto& d : q.derived) derived.push_back(eval(*d.second, c));
      c.derived = &derived;
      return eval(e, c);
    });
  }
  return q;
}

std::vector<std::uint64_t> brute_force(const Table& t, const Query& q) {
  const auto colls = collections_of(t);
  std::vector<std::uint64_t> out;
  for (std::uint64_t e = 0; e < t.n_events; ++e) {
    const Ctx base{t, colls, e};
    bool pass = true;
    for (const auto& p : q.preselection) pass = pass && eval(*p, base) != 0.0;
    if (!pass) continue;

    auto masks = all_true_masks(t, colls, e);
    for (const auto& o : q.objects) {
      auto& mask = masks[static_cast<std::size_t>(o.collection)];
      int n = 0;
      for (std::size_t i = 0; i < mask.size(); ++i) {
        Ctx c{t, colls, e, i};
        mask[i] = eval(*o.cut, c) != 0.0;
        n += mask[i] ? 1 : 0;
      }
      pass = pass && n >= o.min_count;
    }
    if (!pass) continue;

    Ctx c{t, colls, e, 0, &masks};
    std::vector<double> derived;
    for (const auto& d : q.derived) derived.push_back(eval(*d.second, c));
    c.derived = &derived;
    if (q.event && eval(*q.event, c) == 0.0) continue;
    out.push_back(e);
  }
  return out;
}

std::vector<std::size_t> expected_outputs(const Table& t, const Query& q) {
  std::vector<bool> chosen(t.schema.size(), false);
  for (const auto& p : q.branches) {
    for (std::size_t i = 0; i < t.schema.size(); ++i) {
      const auto& name = t.schema[i].name;
      const bool match = p.ends_with('*') ? name.starts_with(p.substr(0, p.size() - 1)) : name == p;
      if (!match) continue;
      chosen[i] = true;
      if (t.schema[i].kind == BranchKind::jagged) chosen[static_cast<std::size_t>(t.index(t.schema[i].counter_branch))] = true;
    }
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    if (chosen[i]) out.push_back(i);
  }
  return out;
}

std::size_t linear_locate(const std::vector<std::uint64_t>& first_event, std::uint64_t n_events,
                          std::uint64_t event) {
  if (event >= n_events) throw std::out_of_range("event");
  std::size_t found = 0;
  for (std::size_t b = 0; b < first_event.size(); ++b) {
    if (first_event[b] <= event) found = b;
  }
  return found;
}

std::set<std::pair<std::size_t, std::size_t>> baskets_touched(
    const skimlite::colfmt::DatasetHeader& h,
    const std::vector<std::pair<std::uint64_t, std::uint64_t>>& reads) {
  std::set<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t b = 0; b < h.branches.size(); ++b) {
    const auto& baskets = h.branches[b].baskets;
    for (std::size_t k = 0; k < baskets.size(); ++k) {
      const auto lo = baskets[k].file_offset;
      const auto hi = lo + baskets[k].compressed_len;
      for (const auto& [off, len] : reads) {
        if (off < hi && lo < off + len) {
          out.emplace(b, k);
          break;
        }
      }
    }
  }
  return out;
}

TempDir::TempDir() {
  std::string tmpl = (fs::temp_directory_path() / "skimlite-test-XXXXXX").string();
  if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
  path_ = tmpl;
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

Bytes read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const Bytes& data) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
}

// ---------------------------------------------------------------------------
// Reference analysis

namespace {

class ReferenceCuts {
 public:
  explicit ReferenceCuts(const oracle::Table& t) : t_(t) {}

  bool pass(std::uint64_t e) const {
    const auto n_ele = count("Electron_pt", e), n_mu = count("Muon_pt", e);
    if (n_ele + n_mu < 1) return false;
    int leptons = 0;
    for (std::size_t i = 0; i < n_ele; ++i) {
      leptons += f("Electron_pt", e, i) > 25 && std::abs(f("Electron_eta", e, i)) < 2.5 &&
                 f("Electron_cutBased", e, i) >= 3 && f("Electron_pfRelIso03_all", e, i) < 0.15 &&
                 std::abs(f("Electron_dxy", e, i)) < 0.05 && std::abs(f("Electron_dz", e, i)) < 0.1;
    }
    for (std::size_t i = 0; i < n_mu; ++i) {
      leptons += f("Muon_pt", e, i) > 25 && std::abs(f("Muon_eta", e, i)) < 2.4 && f("Muon_tightId", e, i) != 0 &&
                 f("Muon_pfRelIso04_all", e, i) < 0.15 && std::abs(f("Muon_dxy", e, i)) < 0.05 &&
                 std::abs(f("Muon_dz", e, i)) < 0.1;
    }
    double ht = 0;
    for (std::size_t i = 0, n = count("Jet_pt", e); i < n; ++i) {
      const double pt = f("Jet_pt", e, i);
      if (pt > 30 && std::abs(f("Jet_eta", e, i)) < 2.4 && f("Jet_jetId", e, i) >= 2 &&
          (pt > 50 || f("Jet_puId", e, i) >= 4))
        ht += pt;
    }
    bool trig = false;
    for (const char* h : {"HLT_IsoMu24", "HLT_IsoMu27", "HLT_Ele32_WPTight_Gsf", "HLT_Ele35_WPTight_Gsf", "HLT_Mu50"})
      trig = trig || s(h, e) != 0;
    return leptons >= 1 && ht > 200 && s("MET_pt", e) > 40 && s("Flag_goodVertices", e) != 0 &&
           s("Flag_METFilters", e) != 0 && trig;
  }

  std::vector<std::uint64_t> passing() const {
    std::vector<std::uint64_t> out;
    for (std::uint64_t e = 0; e < t_.n_events; ++e)
      if (pass(e)) out.push_back(e);
    return out;
  }

 private:
  std::size_t idx(const std::string& name) const {
    const int i = t_.index(name);
    if (i < 0) throw std::runtime_error("no branch " + name);
    return static_cast<std::size_t>(i);
  }
  std::size_t count(const std::string& field, std::uint64_t e) const { return t_.count(idx(field), e); }
  double f(const std::string& name, std::uint64_t e, std::size_t i) const { return t_.field(idx(name), e, i); }
  double s(const std::string& name, std::uint64_t e) const { return t_.scalar(idx(name), e); }

  const oracle::Table& t_;
};

}  // namespace

std::vector<std::uint64_t> reference_passing(const Table& t) { return ReferenceCuts(t).passing(); }

}  // namespace oracle
