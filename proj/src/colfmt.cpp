#include "skimlite/colfmt.hpp"

#include <zlib.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <set>
#include <type_traits>

#include "skimlite/transport.hpp"

namespace skimlite::colfmt {

std::size_t value_width(ValueType t) {
  switch (t) {
    case ValueType::f32: return 4;
    case ValueType::f64: return 8;
    case ValueType::i32: return 4;
    case ValueType::u8: return 1;
    case ValueType::boolean: return 1;
  }
  throw FormatError("unknown value type");
}

std::string_view value_type_name(ValueType t) {
  switch (t) {
    case ValueType::f32: return "f32";
    case ValueType::f64: return "f64";
    case ValueType::i32: return "i32";
    case ValueType::u8: return "u8";
    case ValueType::boolean: return "bool";
  }
  return "unknown";
}

std::optional<ValueType> value_type_from_name(std::string_view name) {
  for (auto t : {ValueType::f32, ValueType::f64, ValueType::i32, ValueType::u8,
                 ValueType::boolean}) {
    if (value_type_name(t) == name) return t;
  }
  return std::nullopt;
}

std::string_view kind_name(BranchKind k) {
  return k == BranchKind::scalar ? "scalar" : "jagged";
}

ColumnValues make_values(ValueType t) {
  switch (t) {
    case ValueType::f32: return std::vector<float>{};
    case ValueType::f64: return std::vector<double>{};
    case ValueType::i32: return std::vector<std::int32_t>{};
    case ValueType::u8:
    case ValueType::boolean: return std::vector<std::uint8_t>{};
  }
  throw FormatError("unknown value type");
}

std::size_t values_size(const ColumnValues& v) {
  return std::visit([](const auto& vec) { return vec.size(); }, v);
}

std::size_t span_size(const ValueSpan& v) {
  return std::visit([](const auto& s) { return s.size(); }, v);
}

double span_at(const ValueSpan& v, std::size_t i) {
  return std::visit([i](const auto& s) { return static_cast<double>(s[i]); }, v);
}

void append_values(ColumnValues& dst, const ValueSpan& src) {
  std::visit(
      [&dst](const auto& s) {
        using T = typename std::decay_t<decltype(s)>::value_type;
        auto* vec = std::get_if<std::vector<std::remove_const_t<T>>>(&dst);
        if (!vec) throw FormatError("append_values: value type mismatch");
        vec->insert(vec->end(), s.begin(), s.end());
      },
      src);
}

std::optional<std::size_t> DatasetHeader::find(std::string_view name) const {
  for (std::size_t i = 0; i < branches.size(); ++i) {
    if (branches[i].name == name) return i;
  }
  return std::nullopt;
}

const BranchMeta& DatasetHeader::branch(std::string_view name) const {
  const auto i = find(name);
  if (!i) throw FormatError("no branch named '" + std::string(name) + "'");
  return branches[*i];
}

Codec DatasetHeader::dominant_codec() const {
  for (const auto& b : branches) {
    if (!b.baskets.empty()) return b.baskets.front().codec;
  }
  return Codec::lz4;
}

std::uint64_t DatasetHeader::compressed_bytes(std::span<const std::size_t> branch_indices) const {
  std::uint64_t total = 0;
  for (auto i : branch_indices) {
    for (const auto& ref : branches.at(i).baskets) total += ref.compressed_len;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Sinks

FileSink::FileSink(const std::string& path) : path_(path) {
  file_ = std::fopen(path.c_str(), "wb");
  if (!file_) throw TransportError("cannot open '" + path + "' for writing: " + std::strerror(errno));
}

FileSink::~FileSink() {
  if (file_) std::fclose(file_);
}

void FileSink::write(ByteView data) {
  if (!file_) throw TransportError("write to closed sink '" + path_ + "'");
  if (!data.empty() && std::fwrite(data.data(), 1, data.size(), file_) != data.size()) {
    throw TransportError("write to '" + path_ + "' failed: " + std::strerror(errno));
  }
}

void FileSink::close() {
  if (file_ && std::fclose(file_) != 0) {
    file_ = nullptr;
    throw TransportError("closing '" + path_ + "' failed");
  }
  file_ = nullptr;
}

// ---------------------------------------------------------------------------
// Writer

namespace {

bool values_match_type(const ColumnValues& v, ValueType t) {
  switch (t) {
    case ValueType::f32: return std::holds_alternative<std::vector<float>>(v);
    case ValueType::f64: return std::holds_alternative<std::vector<double>>(v);
    case ValueType::i32: return std::holds_alternative<std::vector<std::int32_t>>(v);
    case ValueType::u8:
    case ValueType::boolean: return std::holds_alternative<std::vector<std::uint8_t>>(v);
  }
  return false;
}

struct EventRange {
  std::uint64_t begin;
  std::uint64_t end;
};

std::uint64_t ceil_div(std::uint64_t a, std::uint64_t b) { return (a + b - 1) / b; }

std::vector<EventRange> partition_scalar(std::uint64_t n_events, std::size_t width,
                                         std::uint64_t target) {
  std::vector<EventRange> out;
  const auto per = std::max<std::uint64_t>(1, ceil_div(target, width));
  for (std::uint64_t e = 0; e < n_events; e += per) {
    out.push_back({e, std::min(n_events, e + per)});
  }
  return out;
}

// Greedy: extend the basket while [offsets][values] stays within target.
std::vector<EventRange> partition_jagged(const std::vector<std::int32_t>& counts, std::size_t width,
                                         std::uint64_t target) {
  std::vector<EventRange> out;
  const std::uint64_t n = counts.size();
  const auto max_events = std::max<std::uint64_t>(1, ceil_div(target, width));
  std::uint64_t e = 0;
  while (e < n) {
    std::uint64_t begin = e;
    std::uint64_t values = static_cast<std::uint64_t>(counts[e]);
    ++e;
    while (e < n && e - begin < max_events) {
      const auto next_values = values + static_cast<std::uint64_t>(counts[e]);
      const auto bytes = 4 * (e - begin + 2) + width * next_values;
      if (bytes > target) break;
      values = next_values;
      ++e;
    }
    out.push_back({begin, e});
  }
  return out;
}

Bytes encode_scalar(const ColumnValues& v, EventRange r) {
  return std::visit(
      [r](const auto& vec) {
        using T = typename std::decay_t<decltype(vec)>::value_type;
        Bytes out((r.end - r.begin) * sizeof(T));
        std::memcpy(out.data(), vec.data() + r.begin, out.size());
        return out;
      },
      v);
}

Bytes encode_jagged(const ColumnValues& v, const std::vector<std::uint64_t>& prefix, EventRange r) {
  const auto v0 = prefix[r.begin];
  const auto v1 = prefix[r.end];
  Bytes out;
  out.reserve(4 * (r.end - r.begin + 1));
  for (auto e = r.begin; e <= r.end; ++e) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(prefix[e] - v0));
  }
  std::visit(
      [&](const auto& vec) {
        using T = typename std::decay_t<decltype(vec)>::value_type;
        const auto pos = out.size();
        out.resize(pos + (v1 - v0) * sizeof(T));
        if (v1 > v0) std::memcpy(out.data() + pos, vec.data() + v0, (v1 - v0) * sizeof(T));
      },
      v);
  return out;
}

constexpr std::size_t kBasketRecordSize = 8 * 5 + 1;

Bytes encode_body(const DatasetHeader& h) {
  Bytes body;
  put_le<std::uint64_t>(body, h.basket_target);
  put_le<std::uint32_t>(body, static_cast<std::uint32_t>(h.branches.size()));
  for (const auto& b : h.branches) {
    put_string(body, b.name);
    put_le<std::uint8_t>(body, static_cast<std::uint8_t>(b.kind));
    put_le<std::uint8_t>(body, static_cast<std::uint8_t>(b.value_type));
    put_string(body, b.counter_branch);
    put_le<std::uint32_t>(body, static_cast<std::uint32_t>(b.baskets.size()));
    for (std::size_t i = 0; i < b.baskets.size(); ++i) {
      const auto& r = b.baskets[i];
      put_le<std::uint64_t>(body, b.first_event[i]);
      put_le<std::uint64_t>(body, r.file_offset);
      put_le<std::uint64_t>(body, r.compressed_len);
      put_le<std::uint64_t>(body, r.uncompressed_len);
      put_le<std::uint64_t>(body, r.n_entries);
      put_le<std::uint8_t>(body, static_cast<std::uint8_t>(r.codec));
    }
  }
  const auto crc = crc32(0L, body.data(), static_cast<uInt>(body.size()));
  put_le<std::uint32_t>(body, static_cast<std::uint32_t>(crc));
  return body;
}

std::size_t body_size(std::span<const BranchSchema> schema,
                      const std::vector<std::vector<EventRange>>& parts) {
  std::size_t n = 8 + 4 + 4;  // basket_target, n_branches, crc
  for (std::size_t i = 0; i < schema.size(); ++i) {
    n += 2 + schema[i].name.size() + 1 + 1 + 2 + schema[i].counter_branch.size() + 4;
    n += parts[i].size() * kBasketRecordSize;
  }
  return n;
}

Bytes encode_preamble(const DatasetHeader& h) {
  Bytes out(kMagic.begin(), kMagic.end());
  put_le<std::uint32_t>(out, h.format_version);
  put_le<std::uint32_t>(out, 0);
  put_le<std::uint64_t>(out, h.header_length);
  put_le<std::uint64_t>(out, h.n_events);
  return out;
}

}  // namespace

DatasetHeader write_dataset(std::span<const BranchSchema> schema,
                            std::span<const ColumnValues> columns, const WriteOptions& options,
                            ByteSink& sink) {
  if (schema.size() != columns.size()) {
    throw FormatError("schema has " + std::to_string(schema.size()) + " branches but " +
                      std::to_string(columns.size()) + " columns were given");
  }
  if (options.basket_target == 0) throw FormatError("basket_target must be positive");
  if (static_cast<std::uint8_t>(options.codec) > static_cast<std::uint8_t>(Codec::deflate)) {
    throw FormatError("unknown codec id " + std::to_string(static_cast<int>(options.codec)));
  }

  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < schema.size(); ++i) {
    if (schema[i].name.empty()) throw FormatError("empty branch name");
    if (schema[i].name.size() > 0xFFFF) throw FormatError("branch name too long");
    if (!index.emplace(schema[i].name, i).second) {
      throw FormatError("duplicate branch name '" + schema[i].name + "'");
    }
    if (!values_match_type(columns[i], schema[i].value_type)) {
      throw FormatError("column for '" + schema[i].name + "' does not hold " +
                        std::string(value_type_name(schema[i].value_type)) + " values");
    }
  }

  std::optional<std::uint64_t> n_events;
  for (std::size_t i = 0; i < schema.size(); ++i) {
    if (schema[i].kind != BranchKind::scalar) continue;
    const auto n = values_size(columns[i]);
    if (n_events && *n_events != n) {
      throw FormatError("column-length mismatch: '" + schema[i].name + "' has " +
                        std::to_string(n) + " values, expected " + std::to_string(*n_events));
    }
    n_events = n;
  }
  const std::uint64_t n = n_events.value_or(0);

  // Per-jagged-branch prefix sums of the counter column.
  std::vector<std::vector<std::uint64_t>> prefix(schema.size());
  std::vector<std::vector<EventRange>> parts(schema.size());
  for (std::size_t i = 0; i < schema.size(); ++i) {
    const auto& s = schema[i];
    const auto width = value_width(s.value_type);
    if (s.kind == BranchKind::scalar) {
      if (!s.counter_branch.empty()) {
        throw FormatError("scalar branch '" + s.name + "' must not name a counter");
      }
      parts[i] = partition_scalar(n, width, options.basket_target);
      continue;
    }
    const auto it = index.find(s.counter_branch);
    if (it == index.end()) {
      throw FormatError("jagged branch '" + s.name + "' names missing counter '" +
                        s.counter_branch + "'");
    }
    const auto& cs = schema[it->second];
    if (cs.kind != BranchKind::scalar || cs.value_type != ValueType::i32) {
      throw FormatError("counter '" + cs.name + "' of '" + s.name + "' is not a scalar i32 branch");
    }
    const auto& counts = std::get<std::vector<std::int32_t>>(columns[it->second]);
    auto& pre = prefix[i];
    pre.resize(n + 1, 0);
    for (std::uint64_t e = 0; e < n; ++e) {
      if (counts[e] < 0) {
        throw FormatError("counter '" + cs.name + "' is negative at event " + std::to_string(e));
      }
      pre[e + 1] = pre[e] + static_cast<std::uint64_t>(counts[e]);
    }
    if (pre[n] != values_size(columns[i])) {
      throw FormatError("column-length mismatch: jagged '" + s.name + "' has " +
                        std::to_string(values_size(columns[i])) + " values but '" + cs.name +
                        "' sums to " + std::to_string(pre[n]));
    }
    parts[i] = partition_jagged(counts, width, options.basket_target);
  }

  DatasetHeader header;
  header.n_events = n;
  header.basket_target = options.basket_target;
  header.header_length = body_size(schema, parts);

  std::uint64_t offset = kPreambleSize + header.header_length;
  std::vector<std::vector<Bytes>> payloads(schema.size());
  for (std::size_t i = 0; i < schema.size(); ++i) {
    BranchMeta meta{schema[i].name, schema[i].kind, schema[i].value_type,
                    schema[i].counter_branch, {}, {}};
    for (const auto& r : parts[i]) {
      const Bytes raw = schema[i].kind == BranchKind::scalar
                            ? encode_scalar(columns[i], r)
                            : encode_jagged(columns[i], prefix[i], r);
      Bytes packed = compress(options.codec, raw);
      BasketRef ref{offset, packed.size(), raw.size(), options.codec, r.end - r.begin};
      offset += packed.size();
      meta.baskets.push_back(ref);
      meta.first_event.push_back(r.begin);
      payloads[i].push_back(std::move(packed));
    }
    header.branches.push_back(std::move(meta));
  }

  const Bytes body = encode_body(header);
  if (body.size() != header.header_length) {
    throw FormatError("internal error: header length estimate mismatch");
  }
  sink.write(encode_preamble(header));
  sink.write(body);
  for (const auto& branch : payloads) {
    for (const auto& p : branch) sink.write(p);
  }
  return header;
}

// ---------------------------------------------------------------------------
// Reader

DatasetHeader parse_header(ByteView preamble, ByteView body) {
  if (preamble.size() < kPreambleSize) throw FormatError("truncated header: short preamble");
  if (!std::equal(kMagic.begin(), kMagic.end(), preamble.begin(),
                  [](char a, std::uint8_t b) { return static_cast<std::uint8_t>(a) == b; })) {
    throw FormatError("bad magic: not a skimlite file");
  }
  ByteReader pre(preamble.subspan(kMagic.size()));
  DatasetHeader h;
  h.format_version = pre.get<std::uint32_t>();
  if (h.format_version != kFormatVersion) {
    throw FormatError("unsupported format_version " + std::to_string(h.format_version));
  }
  (void)pre.get<std::uint32_t>();
  h.header_length = pre.get<std::uint64_t>();
  h.n_events = pre.get<std::uint64_t>();
  if (body.size() != h.header_length) {
    throw FormatError("truncated header: body has " + std::to_string(body.size()) +
                      " bytes, expected " + std::to_string(h.header_length));
  }
  if (body.size() < 4) throw FormatError("truncated header: missing checksum");

  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, body.data() + body.size() - 4, 4);
  const auto crc = crc32(0L, body.data(), static_cast<uInt>(body.size() - 4));
  if (static_cast<std::uint32_t>(crc) != stored_crc) throw FormatError("header checksum mismatch");

  ByteReader r(body.first(body.size() - 4));
  h.basket_target = r.get<std::uint64_t>();
  const auto n_branches = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_branches; ++i) {
    BranchMeta b;
    b.name = r.get_string();
    const auto kind = r.get<std::uint8_t>();
    if (kind > 1) throw FormatError("branch '" + b.name + "': bad kind " + std::to_string(kind));
    b.kind = static_cast<BranchKind>(kind);
    const auto vt = r.get<std::uint8_t>();
    if (vt > static_cast<std::uint8_t>(ValueType::boolean)) {
      throw FormatError("branch '" + b.name + "': bad value type " + std::to_string(vt));
    }
    b.value_type = static_cast<ValueType>(vt);
    b.counter_branch = r.get_string();
    const auto n_baskets = r.get<std::uint32_t>();
    if (static_cast<std::size_t>(n_baskets) * kBasketRecordSize > r.remaining()) {
      throw FormatError("truncated header: basket table of '" + b.name + "'");
    }
    b.baskets.reserve(n_baskets);
    b.first_event.reserve(n_baskets);
    for (std::uint32_t k = 0; k < n_baskets; ++k) {
      b.first_event.push_back(r.get<std::uint64_t>());
      BasketRef ref;
      ref.file_offset = r.get<std::uint64_t>();
      ref.compressed_len = r.get<std::uint64_t>();
      ref.uncompressed_len = r.get<std::uint64_t>();
      ref.n_entries = r.get<std::uint64_t>();
      ref.codec = codec_from_id(r.get<std::uint8_t>());
      b.baskets.push_back(ref);
    }
    h.branches.push_back(std::move(b));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes in header body");
  return h;
}

void validate_header(const DatasetHeader& h, std::uint64_t file_size) {
  std::set<std::string_view> names;
  const auto data_start = kPreambleSize + h.header_length;
  for (const auto& b : h.branches) {
    if (!names.insert(b.name).second) throw FormatError("duplicate branch name '" + b.name + "'");
  }
  for (const auto& b : h.branches) {
    const auto where = "branch '" + b.name + "': ";
    if (b.baskets.size() != b.first_event.size()) {
      throw FormatError(where + "first_event and basket list lengths differ");
    }
    if (h.n_events > 0 && b.baskets.empty()) throw FormatError(where + "no baskets");
    if (h.n_events == 0 && !b.baskets.empty()) throw FormatError(where + "baskets in empty file");
    std::uint64_t expected = 0;
    for (std::size_t k = 0; k < b.baskets.size(); ++k) {
      const auto& ref = b.baskets[k];
      if (b.first_event[k] != expected) {
        throw FormatError(where + "basket " + std::to_string(k) +
                          " does not start where the previous one ended");
      }
      if (ref.n_entries == 0) throw FormatError(where + "empty basket");
      expected += ref.n_entries;
      if (ref.compressed_len == 0) throw FormatError(where + "zero-length basket");
      if (ref.codec == Codec::none && ref.compressed_len != ref.uncompressed_len) {
        throw FormatError(where + "uncompressed basket with differing lengths");
      }
      if (ref.file_offset < data_start || ref.file_offset + ref.compressed_len > file_size ||
          ref.file_offset + ref.compressed_len < ref.file_offset) {
        throw FormatError(where + "basket " + std::to_string(k) + " lies outside the data section");
      }
    }
    if (expected != h.n_events) {
      throw FormatError(where + "baskets cover " + std::to_string(expected) + " events, file has " +
                        std::to_string(h.n_events));
    }
    if (b.kind == BranchKind::jagged) {
      const auto c = h.find(b.counter_branch);
      if (!c) throw FormatError(where + "counter '" + b.counter_branch + "' does not exist");
      const auto& cb = h.branches[*c];
      if (cb.kind != BranchKind::scalar || cb.value_type != ValueType::i32) {
        throw FormatError(where + "counter '" + cb.name + "' is not a scalar i32 branch");
      }
    } else if (!b.counter_branch.empty()) {
      throw FormatError(where + "scalar branch with a counter");
    }
  }
}

DatasetHeader read_header(RangeSource& source) {
  const auto size = source.size();
  if (size < kPreambleSize) {
    throw FormatError("truncated header: source has only " + std::to_string(size) + " bytes");
  }
  const Bytes preamble = source.read(0, kPreambleSize);
  if (!std::equal(kMagic.begin(), kMagic.end(), preamble.begin(),
                  [](char a, std::uint8_t b) { return static_cast<std::uint8_t>(a) == b; })) {
    throw FormatError("bad magic: not a skimlite file");
  }
  std::uint64_t header_length;
  std::memcpy(&header_length, preamble.data() + 16, 8);
  if (header_length > size - kPreambleSize) {
    throw FormatError("truncated header: header_length " + std::to_string(header_length) +
                      " exceeds source size " + std::to_string(size));
  }
  const Bytes body = source.read(kPreambleSize, header_length);
  auto h = parse_header(preamble, body);
  validate_header(h, size);
  return h;
}

std::size_t locate_basket(const BranchMeta& meta, std::uint64_t n_events, std::uint64_t event) {
  if (event >= n_events || meta.first_event.empty()) {
    throw Error("event " + std::to_string(event) + " out of range for branch '" + meta.name +
                "' (" + std::to_string(n_events) + " events)");
  }
  const auto it = std::upper_bound(meta.first_event.begin(), meta.first_event.end(), event);
  return static_cast<std::size_t>(std::distance(meta.first_event.begin(), it)) - 1;
}

Bytes decompress_basket(ByteView raw, const BasketRef& ref) {
  if (raw.size() != ref.compressed_len) {
    throw FormatError("basket length mismatch: got " + std::to_string(raw.size()) +
                      " bytes, header says " + std::to_string(ref.compressed_len));
  }
  return decompress(ref.codec, raw, ref.uncompressed_len);
}

ColumnSlice deserialize_column(ByteView payload, const BranchMeta& meta, std::size_t basket_index) {
  const auto& ref = meta.baskets.at(basket_index);
  const auto width = value_width(meta.value_type);
  const auto n = ref.n_entries;
  ColumnSlice slice;
  slice.branch = meta.name;
  slice.first_event = meta.first_event.at(basket_index);
  slice.n_entries = n;
  slice.values = make_values(meta.value_type);

  ByteView values_bytes;
  if (meta.kind == BranchKind::scalar) {
    if (payload.size() != n * width) {
      throw FormatError("branch '" + meta.name + "': scalar payload of " +
                        std::to_string(payload.size()) + " bytes for " + std::to_string(n) +
                        " entries");
    }
    values_bytes = payload;
  } else {
    const auto table = 4 * (n + 1);
    if (payload.size() < table) {
      throw FormatError("branch '" + meta.name + "': payload shorter than its offset table");
    }
    slice.event_offsets.resize(n + 1);
    std::memcpy(slice.event_offsets.data(), payload.data(), table);
    if (slice.event_offsets[0] != 0) {
      throw FormatError("branch '" + meta.name + "': offset table does not start at 0");
    }
    for (std::uint64_t k = 0; k < n; ++k) {
      if (slice.event_offsets[k + 1] < slice.event_offsets[k]) {
        throw FormatError("branch '" + meta.name + "': offset table is not monotonic");
      }
    }
    const auto n_values = slice.event_offsets[n];
    if (payload.size() != table + static_cast<std::uint64_t>(n_values) * width) {
      throw FormatError("branch '" + meta.name + "': payload length mismatch for " +
                        std::to_string(n_values) + " values");
    }
    values_bytes = payload.subspan(table);
  }
  std::visit(
      [&](auto& vec) {
        using T = typename std::decay_t<decltype(vec)>::value_type;
        vec.resize(values_bytes.size() / sizeof(T));
        if (!vec.empty()) std::memcpy(vec.data(), values_bytes.data(), values_bytes.size());
      },
      slice.values);
  return slice;
}

ValueSpan event_values(const ColumnSlice& slice, std::uint64_t event) {
  if (!slice.contains(event)) {
    throw Error("event " + std::to_string(event) + " outside slice of '" + slice.branch + "' [" +
                std::to_string(slice.first_event) + ", " +
                std::to_string(slice.first_event + slice.n_entries) + ")");
  }
  const auto k = event - slice.first_event;
  std::size_t begin = k;
  std::size_t end = k + 1;
  if (!slice.event_offsets.empty()) {
    begin = slice.event_offsets[k];
    end = slice.event_offsets[k + 1];
  }
  return std::visit(
      [&](const auto& vec) -> ValueSpan {
        using T = typename std::decay_t<decltype(vec)>::value_type;
        return std::span<const T>(vec.data() + begin, end - begin);
      },
      slice.values);
}

ColumnSlice read_branch(RangeSource& source, const DatasetHeader& header, std::string_view name) {
  const auto& meta = header.branch(name);
  ColumnSlice out;
  out.branch = meta.name;
  out.first_event = 0;
  out.n_entries = header.n_events;
  out.values = make_values(meta.value_type);
  if (meta.is_jagged()) out.event_offsets.push_back(0);
  for (std::size_t b = 0; b < meta.baskets.size(); ++b) {
    const auto& ref = meta.baskets[b];
    const Bytes raw = source.read(ref.file_offset, ref.compressed_len);
    const ColumnSlice part = deserialize_column(decompress_basket(raw, ref), meta, b);
    const auto base = out.event_offsets.empty() ? 0u : out.event_offsets.back();
    for (std::size_t k = 1; k < part.event_offsets.size(); ++k) {
      out.event_offsets.push_back(base + part.event_offsets[k]);
    }
    std::visit(
        [&](const auto& vec) {
          using T = typename std::decay_t<decltype(vec)>::value_type;
          append_values(out.values, std::span<const T>(vec));
        },
        part.values);
  }
  return out;
}

}  // namespace skimlite::colfmt
