#include "skimlite/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "httplib.h"
#include "json.hpp"
#include "skimlite/digest.hpp"
#include "skimlite/engine.hpp"
#include "skimlite/service.hpp"

namespace skimlite::bench {

namespace fs = std::filesystem;
using colfmt::BranchKind;
using colfmt::BranchSchema;
using colfmt::ValueType;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Layout

namespace {

enum class Dist : std::uint8_t { constant, uniform, expo, normal, integer, bernoulli, sign, poisson };

struct FieldDef {
  std::string name;
  ValueType type;
  Dist dist;
  double a = 0.0;
  double b = 0.0;
};

constexpr double kPi = std::numbers::pi;

const std::map<std::string, std::vector<FieldDef>>& core_fields() {
  using enum ValueType;
  static const std::map<std::string, std::vector<FieldDef>> table = {
      {"Electron",
       {{"pt", f32, Dist::expo, 5, 15},
        {"eta", f32, Dist::uniform, -2.5, 2.5},
        {"phi", f32, Dist::uniform, -kPi, kPi},
        {"mass", f32, Dist::constant, 0.000511},
        {"charge", i32, Dist::sign, 1},
        {"cutBased", i32, Dist::integer, 0, 4},
        {"pfRelIso03_all", f32, Dist::expo, 0, 0.12},
        {"dxy", f32, Dist::normal, 0, 0.02},
        {"dz", f32, Dist::normal, 0, 0.04},
        {"sip3d", f32, Dist::expo, 0, 2},
        {"mvaIso_WP90", boolean, Dist::bernoulli, 0.7},
        {"jetIdx", i32, Dist::integer, -1, 5},
        {"pdgId", i32, Dist::sign, 11},
        {"r9", f32, Dist::uniform, 0.5, 1.0},
        {"sieie", f32, Dist::expo, 0.005, 0.005}}},
      {"Muon",
       {{"pt", f32, Dist::expo, 3, 15},
        {"eta", f32, Dist::uniform, -2.4, 2.4},
        {"phi", f32, Dist::uniform, -kPi, kPi},
        {"mass", f32, Dist::constant, 0.1057},
        {"charge", i32, Dist::sign, 1},
        {"tightId", boolean, Dist::bernoulli, 0.75},
        {"pfRelIso04_all", f32, Dist::expo, 0, 0.12},
        {"dxy", f32, Dist::normal, 0, 0.02},
        {"dz", f32, Dist::normal, 0, 0.04},
        {"sip3d", f32, Dist::expo, 0, 2},
        {"mediumId", boolean, Dist::bernoulli, 0.85},
        {"jetIdx", i32, Dist::integer, -1, 5},
        {"pdgId", i32, Dist::sign, 13},
        {"ptErr", f32, Dist::expo, 0, 0.5},
        {"nStations", i32, Dist::integer, 0, 4}}},
      {"Jet",
       {{"pt", f32, Dist::expo, 15, 35},
        {"eta", f32, Dist::uniform, -4.7, 4.7},
        {"phi", f32, Dist::uniform, -kPi, kPi},
        {"mass", f32, Dist::expo, 2, 8},
        {"jetId", i32, Dist::integer, 0, 6},
        {"btagDeepFlavB", f32, Dist::uniform, 0, 1},
        {"area", f32, Dist::normal, 0.5, 0.05},
        {"nConstituents", i32, Dist::poisson, 20},
        {"puId", i32, Dist::integer, 0, 7},
        {"hadronFlavour", i32, Dist::integer, 0, 5},
        {"chEmEF", f32, Dist::uniform, 0, 1},
        {"neEmEF", f32, Dist::uniform, 0, 1},
        {"chHEF", f32, Dist::uniform, 0, 1},
        {"neHEF", f32, Dist::uniform, 0, 1},
        {"rawFactor", f32, Dist::uniform, 0, 0.3}}},
      {"Tau",
       {{"pt", f32, Dist::expo, 20, 20},
        {"eta", f32, Dist::uniform, -2.3, 2.3},
        {"phi", f32, Dist::uniform, -kPi, kPi},
        {"mass", f32, Dist::expo, 0.5, 0.5},
        {"charge", i32, Dist::sign, 1},
        {"decayMode", i32, Dist::integer, 0, 11},
        {"idDeepTau2017v2p1VSjet", u8, Dist::integer, 0, 255},
        {"idDeepTau2017v2p1VSe", u8, Dist::integer, 0, 255},
        {"idDeepTau2017v2p1VSmu", u8, Dist::integer, 0, 15},
        {"dz", f32, Dist::normal, 0, 0.05},
        {"dxy", f32, Dist::normal, 0, 0.02},
        {"rawIso", f32, Dist::expo, 0, 3}}},
      {"Photon",
       {{"pt", f32, Dist::expo, 15, 20},
        {"eta", f32, Dist::uniform, -2.5, 2.5},
        {"phi", f32, Dist::uniform, -kPi, kPi},
        {"mass", f32, Dist::constant, 0},
        {"cutBased", i32, Dist::integer, 0, 3},
        {"pfRelIso03_all", f32, Dist::expo, 0, 0.2},
        {"r9", f32, Dist::uniform, 0.5, 1.0},
        {"sieie", f32, Dist::expo, 0.008, 0.004},
        {"hoe", f32, Dist::expo, 0, 0.05},
        {"electronVeto", boolean, Dist::bernoulli, 0.9},
        {"pixelSeed", boolean, Dist::bernoulli, 0.1},
        {"mvaID", f32, Dist::uniform, -1, 1}}},
      {"FatJet",
       {{"pt", f32, Dist::expo, 170, 100},
        {"eta", f32, Dist::uniform, -2.4, 2.4},
        {"phi", f32, Dist::uniform, -kPi, kPi},
        {"mass", f32, Dist::expo, 20, 60},
        {"msoftdrop", f32, Dist::expo, 10, 50},
        {"tau1", f32, Dist::uniform, 0, 0.5},
        {"tau2", f32, Dist::uniform, 0, 0.4},
        {"tau3", f32, Dist::uniform, 0, 0.3},
        {"btagDDBvLV2", f32, Dist::uniform, 0, 1},
        {"jetId", i32, Dist::integer, 0, 6}}},
  };
  return table;
}

std::vector<FieldDef> collection_fields(const CollectionSpec& c) {
  static const std::vector<FieldDef> generic = {
      {"pt", ValueType::f32, Dist::expo, 10, 20},
      {"eta", ValueType::f32, Dist::uniform, -2.5, 2.5},
      {"phi", ValueType::f32, Dist::uniform, -kPi, kPi},
      {"mass", ValueType::f32, Dist::expo, 0, 5},
  };
  const auto it = core_fields().find(c.name);
  const auto& core = it != core_fields().end() ? it->second : generic;
  const auto n = static_cast<std::size_t>(std::max(0, c.n_fields));
  std::vector<FieldDef> out(core.begin(), core.begin() + std::min(n, core.size()));
  for (std::size_t k = 0; out.size() < n; ++k) {
    out.push_back({"var" + std::to_string(k), ValueType::f32, Dist::normal, 0, 1});
  }
  return out;
}

// luminosityBlock and event are filled from the event number.
std::vector<FieldDef> scalar_fields(const GenSpec& spec) {
  using enum ValueType;
  std::vector<FieldDef> out = {
      {"run", i32, Dist::constant, 1},
      {"luminosityBlock", i32, Dist::constant, 0},
      {"event", i32, Dist::constant, 0},
      {"PV_npvs", i32, Dist::poisson, 30},
      {"PV_z", f32, Dist::normal, 0, 4},
      {"MET_pt", f32, Dist::expo, 0, 30},
      {"MET_phi", f32, Dist::uniform, -kPi, kPi},
      {"MET_sumEt", f32, Dist::expo, 200, 400},
      {"fixedGridRhoFastjetAll", f32, Dist::expo, 5, 10},
      {"genWeight", f32, Dist::constant, 1},
  };
  for (int k = 0; k < spec.extra_scalars; ++k) {
    out.push_back({"scalar_var" + std::to_string(k), f32, Dist::normal, 0, 1});
  }
  return out;
}

const std::vector<std::string>& flag_names() {
  static const std::vector<std::string> names = {
      "Flag_goodVertices",
      "Flag_METFilters",
      "Flag_globalSuperTightHalo2016Filter",
      "Flag_HBHENoiseFilter",
      "Flag_HBHENoiseIsoFilter",
      "Flag_EcalDeadCellTriggerPrimitiveFilter",
      "Flag_BadPFMuonFilter",
      "Flag_BadPFMuonDzFilter",
      "Flag_eeBadScFilter",
      "Flag_ecalBadCalibFilter",
      "Flag_hfNoisyHitsFilter",
  };
  return names;
}

std::vector<std::string> hlt_branch_names(int n) {
  std::vector<std::string> out;
  const auto& ref = reference_triggers();
  for (int k = 0; k < n; ++k) {
    out.push_back(static_cast<std::size_t>(k) < ref.size()
                      ? ref[static_cast<std::size_t>(k)]
                      : "HLT_Path" + std::to_string(k - static_cast<int>(ref.size())));
  }
  return out;
}

std::vector<std::string> flag_branch_names(int n) {
  std::vector<std::string> out;
  const auto& ref = flag_names();
  for (int k = 0; k < n; ++k) {
    out.push_back(static_cast<std::size_t>(k) < ref.size()
                      ? ref[static_cast<std::size_t>(k)]
                      : "Flag_extra" + std::to_string(k - static_cast<int>(ref.size())));
  }
  return out;
}

// The five triggers and the object cuts of the reference query. The
// generator builds events against these; the query text below states the
// same thresholds.
const std::vector<std::string> kQueryTriggers = {"HLT_IsoMu24", "HLT_IsoMu27", "HLT_Ele32_WPTight_Gsf",
                                                 "HLT_Ele35_WPTight_Gsf", "HLT_Mu50"};

}  // namespace

const std::vector<std::string>& reference_triggers() {
  static const std::vector<std::string> names = {
      "HLT_IsoMu24",
      "HLT_IsoMu27",
      "HLT_Mu50",
      "HLT_TkMu100",
      "HLT_OldMu100",
      "HLT_Ele32_WPTight_Gsf",
      "HLT_Ele35_WPTight_Gsf",
      "HLT_Ele115_CaloIdVT_GsfTrkIdT",
      "HLT_Photon200",
      "HLT_Mu17_TrkIsoVVL_Mu8_TrkIsoVVL_DZ_Mass3p8",
      "HLT_Ele23_Ele12_CaloIdL_TrackIdL_IsoVL",
      "HLT_Mu23_TrkIsoVVL_Ele12_CaloIdL_TrackIdL_IsoVL_DZ",
      "HLT_Mu8_TrkIsoVVL_Ele23_CaloIdL_TrackIdL_IsoVL_DZ",
      "HLT_PFMET120_PFMHT120_IDTight",
      "HLT_PFMETNoMu120_PFMHTNoMu120_IDTight",
      "HLT_PFHT1050",
      "HLT_AK8PFJet400_TrimMass30",
      "HLT_PFJet500",
      "HLT_DoubleEle25_CaloIdL_MW",
      "HLT_DoubleMu4_3_Jpsi",
      "HLT_Mu12_DoublePhoton20",
      "HLT_TripleMu_12_10_5",
      "HLT_Diphoton30_22_R9Id_OR_IsoCaloId_AND_HE_R9Id_Mass90",
  };
  return names;
}

query::MinimalSets reference_minimal_sets() { return {{"HLT_*", reference_triggers()}}; }

std::string reference_minimal_sets_json() {
  return json{{"HLT_*", reference_triggers()}}.dump(2) + "\n";
}

std::string reference_query_json(const std::string& input, const std::string& output) {
  json q = {
      {"input", input},
      {"output", output},
      {"branches",
       {"run", "luminosityBlock", "event", "PV_npvs", "MET_*", "Electron_*", "Muon_*", "Jet_*",
        "HLT_*", "Flag_*"}},
      {"preselection", "nElectron + nMuon >= 1"},
      {"object_selections",
       json::array({
           {{"collection", "Electron"},
            {"cut", "pt > 25 && abs(eta) < 2.5 && cutBased >= 3 && pfRelIso03_all < 0.15 && "
                    "abs(dxy) < 0.05 && abs(dz) < 0.1"},
            {"min_count", 0}},
           {{"collection", "Muon"},
            {"cut", "pt > 25 && abs(eta) < 2.4 && tightId && pfRelIso04_all < 0.15 && "
                    "abs(dxy) < 0.05 && abs(dz) < 0.1"},
            {"min_count", 0}},
           {{"collection", "Jet"},
            {"cut", "pt > 30 && abs(eta) < 2.4 && jetId >= 2 && (pt > 50 || puId >= 4)"},
            {"min_count", 0}},
       })},
      {"derived", {{"nLep", "count(Electron) + count(Muon)"}, {"HT", "sum(Jet_pt)"}}},
      {"event_selection",
       "nLep >= 1 && HT > 200 && MET_pt > 40 && Flag_goodVertices && Flag_METFilters && "
       "(HLT_IsoMu24 || HLT_IsoMu27 || HLT_Ele32_WPTight_Gsf || HLT_Ele35_WPTight_Gsf || "
       "HLT_Mu50)"},
  };
  return q.dump(2) + "\n";
}

std::size_t GenSpec::branch_count() const {
  std::size_t n = 10 + static_cast<std::size_t>(std::max(0, extra_scalars));
  for (const auto& c : collections) n += 1 + static_cast<std::size_t>(std::max(0, c.n_fields));
  return n + static_cast<std::size_t>(std::max(0, n_hlt)) + static_cast<std::size_t>(std::max(0, n_flags));
}

GenSpec parse_gen_spec(const std::string& json_text) {
  GenSpec s;
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(std::string("gen spec: ") + e.what());
  }
  if (!j.is_object()) throw Error("gen spec: expected an object");
  try {
    s.n_events = j.value("n_events", s.n_events);
    s.seed = j.value("seed", s.seed);
    if (j.contains("codec")) {
      const auto name = j.at("codec").get<std::string>();
      const auto codec = codec_from_name(name);
      if (!codec) throw Error("gen spec: unknown codec '" + name + "'");
      s.codec = *codec;
    }
    s.basket_target = j.value("basket_target", s.basket_target);
    s.target_efficiency = j.value("target_efficiency", s.target_efficiency);
    s.extra_scalars = j.value("extra_scalars", s.extra_scalars);
    s.n_hlt = j.value("n_hlt", s.n_hlt);
    s.hlt_fire_rate = j.value("hlt_fire_rate", s.hlt_fire_rate);
    s.n_flags = j.value("n_flags", s.n_flags);
    if (j.contains("collections")) {
      s.collections.clear();
      for (const auto& c : j.at("collections")) {
        s.collections.push_back({c.at("name").get<std::string>(), c.value("n_fields", 4),
                                 c.value("mean_multiplicity", 1.0)});
      }
    }
  } catch (const json::exception& e) {
    throw Error(std::string("gen spec: ") + e.what());
  }
  if (s.basket_target == 0) throw Error("gen spec: basket_target must be positive");
  if (s.target_efficiency < 0 || s.target_efficiency > 1) {
    throw Error("gen spec: target_efficiency must be in [0, 1]");
  }
  for (const auto& c : s.collections) {
    if (c.name.empty() || c.mean_multiplicity < 0) throw Error("gen spec: bad collection " + c.name);
  }
  return s;
}

std::string gen_spec_to_json(const GenSpec& s) {
  json cols = json::array();
  for (const auto& c : s.collections) {
    cols.push_back({{"name", c.name}, {"n_fields", c.n_fields}, {"mean_multiplicity", c.mean_multiplicity}});
  }
  return json{{"n_events", s.n_events},
              {"seed", s.seed},
              {"codec", std::string(codec_name(s.codec))},
              {"basket_target", s.basket_target},
              {"target_efficiency", s.target_efficiency},
              {"extra_scalars", s.extra_scalars},
              {"collections", cols},
              {"n_hlt", s.n_hlt},
              {"hlt_fire_rate", s.hlt_fire_rate},
              {"n_flags", s.n_flags}}
             .dump(2) +
         "\n";
}

std::vector<BranchSchema> build_schema(const GenSpec& spec) {
  std::vector<BranchSchema> out;
  for (const auto& f : scalar_fields(spec)) out.push_back({f.name, BranchKind::scalar, f.type, ""});
  for (const auto& c : spec.collections) {
    const auto counter = "n" + c.name;
    out.push_back({counter, BranchKind::scalar, ValueType::i32, ""});
    for (const auto& f : collection_fields(c)) {
      out.push_back({c.name + "_" + f.name, BranchKind::jagged, f.type, counter});
    }
  }
  for (const auto& n : hlt_branch_names(spec.n_hlt)) out.push_back({n, BranchKind::scalar, ValueType::boolean, ""});
  for (const auto& n : flag_branch_names(spec.n_flags)) {
    out.push_back({n, BranchKind::scalar, ValueType::boolean, ""});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generator

namespace {

/// std:: distributions are implementation-defined, so draws are built from
/// raw mt19937_64 output to keep files identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double a, double b) { return a + (b - a) * uniform(); }
  double expo(double mean) { return -mean * std::log1p(-uniform()); }
  double normal(double mu, double sigma) {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return mu + sigma * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }
  bool bernoulli(double p) { return uniform() < p; }
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(uniform() * static_cast<double>(hi - lo + 1));
  }
  int poisson(double mean) {
    const double limit = std::exp(-mean);
    int k = 0;
    double p = uniform();
    while (p > limit && k < 256) {
      ++k;
      p *= uniform();
    }
    return k;
  }

 private:
  std::mt19937_64 engine_;
};

/// Rounds to a float with 10 explicit mantissa bits, like the lossy float
/// storage common in analysis ntuples. Makes payloads compressible.
double quantize(double v, ValueType t) {
  switch (t) {
    case ValueType::f32: {
      float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      if ((bits & 0x7f800000u) != 0x7f800000u) bits = (bits + 0x1000u) & ~0x1fffu;
      std::memcpy(&f, &bits, sizeof f);
      return f;
    }
    case ValueType::f64:
      return v;
    case ValueType::i32:
      return static_cast<double>(static_cast<std::int32_t>(std::lround(v)));
    case ValueType::u8:
      return static_cast<double>(static_cast<std::uint8_t>(std::clamp<long>(std::lround(v), 0, 255)));
    case ValueType::boolean:
      return v != 0.0 ? 1.0 : 0.0;
  }
  return v;
}

double draw(Rng& rng, const FieldDef& f) {
  double v = 0.0;
  switch (f.dist) {
    case Dist::constant: v = f.a; break;
    case Dist::uniform: v = rng.uniform(f.a, f.b); break;
    case Dist::expo: v = f.a + rng.expo(f.b); break;
    case Dist::normal: v = rng.normal(f.a, f.b); break;
    case Dist::integer:
      v = static_cast<double>(rng.integer(static_cast<std::int64_t>(f.a), static_cast<std::int64_t>(f.b)));
      break;
    case Dist::bernoulli: v = rng.bernoulli(f.a) ? 1.0 : 0.0; break;
    case Dist::sign: v = rng.bernoulli(0.5) ? f.a : -f.a; break;
    case Dist::poisson: v = rng.poisson(f.a); break;
  }
  return quantize(v, f.type);
}

void push_value(colfmt::ColumnValues& col, double v) {
  std::visit(
      [v](auto& vec) {
        using T = typename std::decay_t<decltype(vec)>::value_type;
        vec.push_back(static_cast<T>(v));
      },
      col);
}

using Object = std::vector<double>;

struct CollectionGen {
  CollectionSpec spec;
  std::vector<FieldDef> fields;
  std::size_t counter_column = 0;
  std::size_t first_field_column = 0;

  int field(std::string_view name) const {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (fields[i].name == name) return static_cast<int>(i);
    }
    return -1;
  }
};

/// Field indices used by the reference query's object cuts; -1 if absent.
struct LeptonFields {
  int pt = -1, eta = -1, id = -1, iso = -1, dxy = -1, dz = -1;
  double eta_max = 2.5;
  bool id_is_flag = false;  // tightId (bool) vs cutBased >= 3

  static LeptonFields of(const CollectionGen& c, bool muon) {
    LeptonFields f;
    f.pt = c.field("pt");
    f.eta = c.field("eta");
    f.id = c.field(muon ? "tightId" : "cutBased");
    f.iso = c.field(muon ? "pfRelIso04_all" : "pfRelIso03_all");
    f.dxy = c.field("dxy");
    f.dz = c.field("dz");
    f.eta_max = muon ? 2.4 : 2.5;
    f.id_is_flag = muon;
    return f;
  }

  static double get(const Object& o, int i, double fallback) {
    return i < 0 ? fallback : o[static_cast<std::size_t>(i)];
  }

  bool good(const Object& o) const {
    const double id_v = get(o, id, id_is_flag ? 1.0 : 4.0);
    return get(o, pt, 100) > 25 && std::abs(get(o, eta, 0)) < eta_max &&
           (id_is_flag ? id_v != 0.0 : id_v >= 3) && get(o, iso, 0) < 0.15 &&
           std::abs(get(o, dxy, 0)) < 0.05 && std::abs(get(o, dz, 0)) < 0.1;
  }
};

struct JetFields {
  int pt = -1, eta = -1, jet_id = -1, pu_id = -1;

  static JetFields of(const CollectionGen& c) {
    return {c.field("pt"), c.field("eta"), c.field("jetId"), c.field("puId")};
  }

  bool good(const Object& o) const {
    const double p = LeptonFields::get(o, pt, 0);
    return p > 30 && std::abs(LeptonFields::get(o, eta, 0)) < 2.4 &&
           LeptonFields::get(o, jet_id, 6) >= 2 && (p > 50 || LeptonFields::get(o, pu_id, 7) >= 4);
  }

  double ht(const std::vector<Object>& jets) const {
    double sum = 0.0;
    for (const auto& j : jets) {
      if (good(j)) sum += LeptonFields::get(j, pt, 0);
    }
    return sum;
  }
};

void set_field(Object& o, const CollectionGen& c, int idx, double v) {
  if (idx >= 0) o[static_cast<std::size_t>(idx)] = quantize(v, c.fields[static_cast<std::size_t>(idx)].type);
}

enum class EventClass : std::uint8_t { signal, no_lepton, bad_leptons, low_ht, no_trigger };

EventClass pick_class(Rng& rng, double efficiency) {
  if (rng.uniform() < efficiency) return EventClass::signal;
  const double u = rng.uniform();
  if (u < 0.45) return EventClass::no_lepton;
  if (u < 0.70) return EventClass::bad_leptons;
  if (u < 0.85) return EventClass::low_ht;
  return EventClass::no_trigger;
}

}  // namespace

GeneratedColumns generate_columns(const GenSpec& spec) {
  auto schema = build_schema(spec);
  std::vector<colfmt::ColumnValues> columns;
  columns.reserve(schema.size());
  for (const auto& b : schema) columns.push_back(colfmt::make_values(b.value_type));

  const auto scalars = scalar_fields(spec);
  std::vector<CollectionGen> colls;
  std::size_t col = scalars.size();
  for (const auto& c : spec.collections) {
    CollectionGen g{c, collection_fields(c), col, col + 1};
    col += 1 + g.fields.size();
    colls.push_back(std::move(g));
  }
  const auto hlt_names = hlt_branch_names(spec.n_hlt);
  const auto flag_list = flag_branch_names(spec.n_flags);
  const std::size_t hlt_column = col;
  const std::size_t flag_column = col + hlt_names.size();

  auto find_coll = [&](std::string_view name) -> CollectionGen* {
    for (auto& c : colls) {
      if (c.spec.name == name) return &c;
    }
    return nullptr;
  };
  CollectionGen* electron = find_coll("Electron");
  CollectionGen* muon = find_coll("Muon");
  CollectionGen* jet = find_coll("Jet");
  const auto ele_f = electron ? LeptonFields::of(*electron, false) : LeptonFields{};
  const auto mu_f = muon ? LeptonFields::of(*muon, true) : LeptonFields{};
  const auto jet_f = jet ? JetFields::of(*jet) : JetFields{};

  std::vector<std::size_t> query_trigger_slots;
  for (const auto& t : kQueryTriggers) {
    const auto it = std::find(hlt_names.begin(), hlt_names.end(), t);
    if (it != hlt_names.end()) query_trigger_slots.push_back(static_cast<std::size_t>(it - hlt_names.begin()));
  }
  std::size_t met_slot = scalars.size();
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].name == "MET_pt") met_slot = i;
  }

  Rng rng(spec.seed);
  std::vector<double> scalar_values(scalars.size());
  std::vector<std::vector<Object>> objects(colls.size());
  std::vector<double> hlt(hlt_names.size());
  std::vector<double> flags(flag_list.size());

  for (std::uint64_t e = 0; e < spec.n_events; ++e) {
    const auto cls = pick_class(rng, spec.target_efficiency);

    for (std::size_t i = 0; i < scalars.size(); ++i) scalar_values[i] = draw(rng, scalars[i]);
    scalar_values[1] = static_cast<double>(1 + e / 1000);
    scalar_values[2] = static_cast<double>(static_cast<std::int32_t>(e + 1));

    for (std::size_t c = 0; c < colls.size(); ++c) {
      const int n = std::min(rng.poisson(colls[c].spec.mean_multiplicity), 64);
      objects[c].assign(static_cast<std::size_t>(n), Object{});
      for (auto& o : objects[c]) {
        o.resize(colls[c].fields.size());
        for (std::size_t f = 0; f < o.size(); ++f) o[f] = draw(rng, colls[c].fields[f]);
      }
    }
    for (std::size_t i = 0; i < hlt.size(); ++i) hlt[i] = rng.bernoulli(spec.hlt_fire_rate) ? 1.0 : 0.0;
    for (std::size_t i = 0; i < flags.size(); ++i) {
      const double p = i == 0 ? 0.99 : i == 1 ? 0.98 : 0.995;
      flags[i] = rng.bernoulli(p) ? 1.0 : 0.0;
    }

    // Shape the event so it meets or misses the reference query by design.
    auto* eles = electron ? &objects[static_cast<std::size_t>(electron - colls.data())] : nullptr;
    auto* mus = muon ? &objects[static_cast<std::size_t>(muon - colls.data())] : nullptr;
    auto* jets = jet ? &objects[static_cast<std::size_t>(jet - colls.data())] : nullptr;
    auto random_object = [&](CollectionGen& c) {
      Object o(c.fields.size());
      for (std::size_t f = 0; f < o.size(); ++f) o[f] = draw(rng, c.fields[f]);
      return o;
    };

    if (eles && mus) {
      if (cls == EventClass::no_lepton) {
        eles->clear();
        mus->clear();
      } else if (eles->empty() && mus->empty()) {
        if (rng.bernoulli(0.5)) {
          eles->push_back(random_object(*electron));
        } else {
          mus->push_back(random_object(*muon));
        }
      }
      if (cls == EventClass::bad_leptons) {
        for (auto& o : *eles) {
          if (ele_f.good(o)) set_field(o, *electron, ele_f.iso, 0.3 + rng.expo(0.2));
        }
        for (auto& o : *mus) {
          if (mu_f.good(o)) set_field(o, *muon, mu_f.iso, 0.3 + rng.expo(0.2));
        }
      } else if (cls != EventClass::no_lepton) {
        const bool use_muon = eles->empty() || (!mus->empty() && rng.bernoulli(0.5));
        auto& coll = use_muon ? *muon : *electron;
        const auto& f = use_muon ? mu_f : ele_f;
        auto& o = use_muon ? mus->front() : eles->front();
        set_field(o, coll, f.pt, 26 + rng.expo(20));
        set_field(o, coll, f.eta, rng.uniform(-2.3, 2.3));
        set_field(o, coll, f.id, use_muon ? 1.0 : 4.0);
        set_field(o, coll, f.iso, rng.uniform(0, 0.1));
        set_field(o, coll, f.dxy, rng.uniform(-0.04, 0.04));
        set_field(o, coll, f.dz, rng.uniform(-0.08, 0.08));
      }
    }

    if (jets) {
      const double ht = jet_f.ht(*jets);
      if ((cls == EventClass::signal || cls == EventClass::no_trigger) && ht <= 200) {
        if (jets->empty()) jets->push_back(random_object(*jet));
        auto& j0 = jets->front();
        const double rest = ht - (jet_f.good(j0) ? LeptonFields::get(j0, jet_f.pt, 0) : 0.0);
        set_field(j0, *jet, jet_f.pt, 200 - rest + 10 + rng.expo(50));
        set_field(j0, *jet, jet_f.eta, rng.uniform(-2.0, 2.0));
        set_field(j0, *jet, jet_f.jet_id, 6);
        set_field(j0, *jet, jet_f.pu_id, 7);
      } else if (cls == EventClass::low_ht && ht >= 200) {
        const double scale = 0.9 * 200 / ht;
        for (auto& j : *jets) {
          if (jet_f.good(j)) set_field(j, *jet, jet_f.pt, LeptonFields::get(j, jet_f.pt, 0) * scale);
        }
      }
    }

    if (cls == EventClass::signal) {
      if (met_slot < scalars.size()) scalar_values[met_slot] = quantize(41 + rng.expo(40), ValueType::f32);
      for (std::size_t i = 0; i < std::min<std::size_t>(2, flags.size()); ++i) flags[i] = 1.0;
      if (!query_trigger_slots.empty()) {
        const auto k = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(query_trigger_slots.size()) - 1));
        hlt[query_trigger_slots[k]] = 1.0;
      }
    } else if (cls == EventClass::no_trigger) {
      for (auto slot : query_trigger_slots) hlt[slot] = 0.0;
    }

    for (std::size_t i = 0; i < scalars.size(); ++i) push_value(columns[i], scalar_values[i]);
    for (std::size_t c = 0; c < colls.size(); ++c) {
      const auto& g = colls[c];
      push_value(columns[g.counter_column], static_cast<double>(objects[c].size()));
      for (const auto& o : objects[c]) {
        for (std::size_t f = 0; f < o.size(); ++f) push_value(columns[g.first_field_column + f], o[f]);
      }
    }
    for (std::size_t i = 0; i < hlt.size(); ++i) push_value(columns[hlt_column + i], hlt[i]);
    for (std::size_t i = 0; i < flags.size(); ++i) push_value(columns[flag_column + i], flags[i]);
  }

  return {std::move(schema), std::move(columns)};
}

colfmt::DatasetHeader generate(const GenSpec& spec, colfmt::ByteSink& sink) {
  const auto data = generate_columns(spec);
  colfmt::WriteOptions options{spec.basket_target, spec.codec};
  return colfmt::write_dataset(data.schema, data.columns, options, sink);
}

colfmt::DatasetHeader generate(const GenSpec& spec, const std::string& path) {
  colfmt::FileSink sink(path);
  auto header = generate(spec, sink);
  sink.close();
  return header;
}

// ---------------------------------------------------------------------------
// Harness

std::string mode_name(Mode m) {
  switch (m) {
    case Mode::client_naive: return "client_naive";
    case Mode::client_opt: return "client_opt";
    case Mode::server_side: return "server_side";
    case Mode::near_storage: return "near_storage";
  }
  return "?";
}

Mode mode_from_name(const std::string& name) {
  for (auto m : kAllModes) {
    if (mode_name(m) == name) return m;
  }
  throw Error("unknown mode '" + name + "'");
}

std::vector<Mode> parse_modes(const std::string& list) {
  if (list == "all") return {std::begin(kAllModes), std::end(kAllModes)};
  std::vector<Mode> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(mode_from_name(item));
  }
  if (out.empty()) throw Error("no modes given");
  return out;
}

struct BenchHarness::Servers {
  std::unique_ptr<StorageServer> client_storage;  // throttled
  std::unique_ptr<StorageServer> daemon_storage;  // unthrottled
  std::unique_ptr<service::SkimDaemon> daemon;
};

namespace {

struct Stopwatch {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double cpu0 = thread_cpu_seconds();
  double wall() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  double cpu() const { return thread_cpu_seconds() - cpu0; }
};

std::string output_name(const query::SkimQuery& q) {
  const auto base = fs::path(q.output).filename().string();
  return base.empty() ? "output.skim" : base;
}

std::uint64_t header_u64(const httplib::Response& res, const char* key) {
  const auto v = res.get_header_value(key);
  return v.empty() ? 0 : std::stoull(v);
}

void write_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw TransportError("cannot write " + path);
}

}  // namespace

BenchHarness::BenchHarness(BenchConfig config)
    : config_(std::move(config)), servers_(std::make_unique<Servers>()) {
  query_ = query::parse_query(config_.query_json);
  if (!config_.minimal_sets_path.empty()) minimal_sets_ = query::load_minimal_sets(config_.minimal_sets_path);
  fs::create_directories(config_.work_dir);

  ServeConfig wan{config_.storage_dir, "127.0.0.1", 0, config_.rate, config_.storage, 8};
  servers_->client_storage = std::make_unique<StorageServer>(wan);
  servers_->client_storage->start();

  ServeConfig lan{config_.storage_dir, "127.0.0.1", 0, 0.0, config_.storage, 8};
  servers_->daemon_storage = std::make_unique<StorageServer>(lan);
  servers_->daemon_storage->start();

  service::DaemonConfig d;
  d.storage = servers_->daemon_storage->url();
  d.minimal_sets_path = config_.minimal_sets_path;
  d.workers = config_.daemon_workers;
  d.rate = config_.rate;
  d.cache = config_.cache;
  servers_->daemon = std::make_unique<service::SkimDaemon>(d);
  servers_->daemon->start();
}

BenchHarness::~BenchHarness() {
  if (servers_->daemon) servers_->daemon->stop();
  if (servers_->daemon_storage) servers_->daemon_storage->stop();
  if (servers_->client_storage) servers_->client_storage->stop();
}

std::string BenchHarness::client_storage_url() const { return servers_->client_storage->url(); }
std::string BenchHarness::daemon_url() const { return servers_->daemon->url(); }

ModeReport BenchHarness::run(Mode mode) {
  try {
    ModeReport r;
    switch (mode) {
      case Mode::client_naive:
      case Mode::client_opt: r = run_client(mode); break;
      case Mode::server_side: r = run_server_side(); break;
      case Mode::near_storage: r = run_near_storage(); break;
    }
    r.mode = mode;
    r.rate = config_.rate;
    r.output_sha256 = sha256_file(r.output_path);
    return r;
  } catch (const std::exception& e) {
    throw Error(mode_name(mode) + " failed: " + e.what());
  }
}

ModeReport BenchHarness::run_client(Mode mode) {
  ModeReport r;
  const Stopwatch clock;
  HttpRangeSource source(client_storage_url() + "/" + query_.input);
  TimingSink timing;
  colfmt::DatasetHeader header;
  {
    ScopedPhase fetch(&timing, Phase::basket_fetch);
    header = colfmt::read_header(source);
  }
  const auto plan = query::plan_skim(query_, header, minimal_sets_);
  auto cache_config = config_.cache;
  cache_config.enabled = config_.client_cache;
  PrefetchCache cache(source, header, cache_config, &timing);

  r.output_path = (fs::path(config_.work_dir) / (mode_name(mode) + "_" + output_name(query_))).string();
  colfmt::FileSink sink(r.output_path);
  engine::RunOptions options;
  options.timing = &timing;
  engine::SkimResult result;
  if (mode == Mode::client_naive) {
    // A traditional script enables every branch its wildcards match, with
    // no minimal-set reduction, and writes the planned outputs.
    const auto all = query::expand_wildcards(query_.branches, header, minimal_sets_, true);
    engine::NaiveOptions naive;
    for (const auto& name : query::with_counters(all.branches, header)) naive.extra_load.push_back(*header.find(name));
    result = engine::run_naive(header, plan, cache, sink, naive, options);
  } else {
    result = engine::run_skim(header, plan, cache, sink, options);
  }
  sink.close();

  r.timing = timing.breakdown();
  r.timing.total_wall = clock.wall();
  r.timing.cpu_time = clock.cpu();
  r.cpu_ratio = r.timing.cpu_time / r.timing.total_wall;
  r.client_cpu_ratio = r.cpu_ratio;
  r.client_link_bytes = source.bytes_fetched();
  r.storage_link_bytes = source.bytes_fetched();
  r.requests = source.requests();
  r.n_input = result.n_input;
  r.n_passed = result.n_passed;
  r.output_bytes = result.output_bytes;
  r.cache_hit_rate = result.cache.hit_rate();
  return r;
}

ModeReport BenchHarness::run_server_side() {
  ModeReport r;
  const Stopwatch clock;

  // On the storage host: local reads, no prefetch.
  const auto input = (fs::path(config_.storage_dir) / query_.input).string();
  if (!fs::is_regular_file(input)) throw NotFoundError("no such dataset: " + query_.input);
  const auto staging_dir = fs::path(config_.storage_dir) / ".skimlite-out";
  fs::create_directories(staging_dir);
  const auto staged = staging_dir / output_name(query_);
  LocalFileSource source(input, config_.storage);
  TimingSink timing;
  colfmt::DatasetHeader header;
  {
    ScopedPhase fetch(&timing, Phase::basket_fetch);
    header = colfmt::read_header(source);
  }
  const auto plan = query::plan_skim(query_, header, minimal_sets_);
  PrefetchCache cache(source, header, config_.cache, &timing);
  colfmt::FileSink sink(staged.string());
  engine::RunOptions options;
  options.timing = &timing;
  const auto result = engine::run_skim(header, plan, cache, sink, options);
  sink.close();
  const double server_cpu = clock.cpu();

  // The client pulls the result over the throttled link.
  const Stopwatch transfer;
  r.output_path = (fs::path(config_.work_dir) / ("server_side_" + output_name(query_))).string();
  std::ofstream out(r.output_path, std::ios::binary);
  httplib::Client client("127.0.0.1", servers_->client_storage->port());
  client.set_tcp_nodelay(true);
  client.set_read_timeout(600);
  std::uint64_t received = 0;
  auto res = client.Get("/.skimlite-out/" + output_name(query_), [&](const char* data, std::size_t n) {
    out.write(data, static_cast<std::streamsize>(n));
    received += n;
    return true;
  });
  out.close();
  if (!res || res->status != 200) throw TransportError("result download failed");
  timing.add(Phase::result_transfer, transfer.wall());
  const double client_cpu = transfer.cpu();
  fs::remove(staged);

  r.timing = timing.breakdown();
  r.timing.total_wall = clock.wall();
  r.timing.cpu_time = server_cpu;
  r.cpu_ratio = server_cpu / r.timing.total_wall;
  r.client_cpu_ratio = client_cpu / r.timing.total_wall;
  r.client_link_bytes = received;
  r.storage_link_bytes = source.bytes_fetched();
  r.requests = source.requests();
  r.n_input = result.n_input;
  r.n_passed = result.n_passed;
  r.output_bytes = result.output_bytes;
  r.cache_hit_rate = result.cache.hit_rate();
  return r;
}

ModeReport BenchHarness::run_near_storage() {
  ModeReport r;
  const Stopwatch clock;
  httplib::Client client("127.0.0.1", servers_->daemon->port());
  client.set_tcp_nodelay(true);
  client.set_read_timeout(600);
  client.set_write_timeout(600);
  auto res = client.Post("/skim", config_.query_json, "application/json");
  if (!res) throw TransportError("daemon unreachable: " + httplib::to_string(res.error()));
  if (res->status != 200) {
    throw Error("daemon returned " + std::to_string(res->status) + ": " + res->body);
  }
  const double wall = clock.wall();
  const double client_cpu = clock.cpu();

  r.output_path = (fs::path(config_.work_dir) / ("near_storage_" + output_name(query_))).string();
  write_file(r.output_path, res->body);

  r.timing = service::timing_from_json(res->get_header_value(service::kHeaderTiming));
  const double daemon_wall = r.timing.total_wall;
  r.timing[Phase::result_transfer] = std::max(0.0, wall - daemon_wall);
  r.timing.total_wall = wall;
  r.cpu_ratio = r.timing.cpu_time / wall;
  r.client_cpu_ratio = client_cpu / wall;
  r.request_bytes = config_.query_json.size();
  std::uint64_t header_bytes = 0;
  for (const auto& [k, v] : res->headers) header_bytes += k.size() + v.size() + 4;
  r.client_link_bytes = r.request_bytes + res->body.size() + header_bytes;
  r.storage_link_bytes = header_u64(*res, service::kHeaderStorageBytes);
  r.requests = header_u64(*res, service::kHeaderStorageRequests);
  r.n_input = header_u64(*res, service::kHeaderInput);
  r.n_passed = header_u64(*res, service::kHeaderPassed);
  r.output_bytes = res->body.size();
  return r;
}

// ---------------------------------------------------------------------------
// Reports

std::vector<double> speedups(const std::vector<ModeReport>& rows) {
  std::vector<double> out(rows.size(), 1.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const ModeReport* base = nullptr;
    for (const auto& r : rows) {
      if (r.rate != rows[i].rate) continue;
      if (!base) base = &r;
      if (r.mode == Mode::client_naive) {
        base = &r;
        break;
      }
    }
    out[i] = rows[i].timing.total_wall > 0 ? base->timing.total_wall / rows[i].timing.total_wall : 0.0;
  }
  return out;
}

std::string report_json(const std::vector<ModeReport>& rows) {
  const auto sp = speedups(rows);
  json arr = json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    json phases = json::object();
    for (auto p : kAllPhases) phases[std::string(phase_name(p))] = r.timing[p];
    arr.push_back({{"mode", mode_name(r.mode)},
                   {"rate_bytes_per_sec", r.rate},
                   {"total_wall", r.timing.total_wall},
                   {"cpu_time", r.timing.cpu_time},
                   {"cpu_ratio", r.cpu_ratio},
                   {"client_cpu_ratio", r.client_cpu_ratio},
                   {"phases", phases},
                   {"client_link_bytes", r.client_link_bytes},
                   {"storage_link_bytes", r.storage_link_bytes},
                   {"requests", r.requests},
                   {"n_input", r.n_input},
                   {"n_passed", r.n_passed},
                   {"output_bytes", r.output_bytes},
                   {"request_bytes", r.request_bytes},
                   {"output_sha256", r.output_sha256},
                   {"cache_hit_rate", r.cache_hit_rate},
                   {"speedup", sp[i]}});
  }
  return json{{"format", "skimlite-bench-report"}, {"version", 1}, {"rows", arr}}.dump(2) + "\n";
}

std::string report_csv(const std::vector<ModeReport>& rows) {
  const auto sp = speedups(rows);
  std::ostringstream out;
  out << "mode,rate_bytes_per_sec,total_wall,cpu_time,cpu_ratio,client_cpu_ratio";
  for (auto p : kAllPhases) out << ',' << phase_name(p);
  out << ",client_link_bytes,storage_link_bytes,requests,n_input,n_passed,output_bytes,"
         "request_bytes,output_sha256,cache_hit_rate,speedup\n";
  out.precision(9);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    out << mode_name(r.mode) << ',' << r.rate << ',' << r.timing.total_wall << ',' << r.timing.cpu_time << ','
        << r.cpu_ratio << ',' << r.client_cpu_ratio;
    for (auto p : kAllPhases) out << ',' << r.timing[p];
    out << ',' << r.client_link_bytes << ',' << r.storage_link_bytes << ',' << r.requests << ','
        << r.n_input << ',' << r.n_passed << ',' << r.output_bytes << ',' << r.request_bytes << ','
        << r.output_sha256 << ',' << r.cache_hit_rate << ',' << sp[i] << '\n';
  }
  return out.str();
}

std::string report_table(const std::vector<ModeReport>& rows) {
  const auto sp = speedups(rows);
  std::string out;
  char line[512];
  std::snprintf(line, sizeof line, "%-13s %8s %9s %8s %8s %8s %8s %8s %8s %10s %10s %8s %6s %8s %8s\n", "mode",
                "MB/s", "total_s", "fetch", "decomp", "deser", "select", "write", "xfer", "client_MB",
                "storage_MB", "requests", "cpu%", "passed", "speedup");
  out += line;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const auto& t = r.timing;
    std::snprintf(line, sizeof line,
                  "%-13s %8.2f %9.3f %8.3f %8.3f %8.3f %8.3f %8.3f %8.3f %10.3f %10.3f %8llu %6.1f %8llu %7.2fx\n",
                  mode_name(r.mode).c_str(), r.rate / 1e6, t.total_wall, t[Phase::basket_fetch],
                  t[Phase::decompress], t[Phase::deserialize], t[Phase::select], t[Phase::write],
                  t[Phase::result_transfer], static_cast<double>(r.client_link_bytes) / 1e6,
                  static_cast<double>(r.storage_link_bytes) / 1e6,
                  static_cast<unsigned long long>(r.requests), 100.0 * r.cpu_ratio,
                  static_cast<unsigned long long>(r.n_passed), sp[i]);
    out += line;
  }
  return out;
}

void write_report(const std::vector<ModeReport>& rows, const std::string& dir) {
  fs::create_directories(dir);
  write_file((fs::path(dir) / "report.json").string(), report_json(rows));
  write_file((fs::path(dir) / "report.csv").string(), report_csv(rows));
  write_file((fs::path(dir) / "report.txt").string(), report_table(rows));
}

}  // namespace skimlite::bench
