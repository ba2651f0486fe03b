#pragma once

// Columnar event file format.
//
// Layout:
//   [0, 8)    magic "SKIMLITE"
//   [8, 32)   preamble: u32 format_version, u32 reserved, u64 header_length,
//             u64 n_events
//   [32, 32 + header_length)  header body (branch catalog, basket map, crc32)
//   data      baskets, grouped per branch in catalog order
//
// Every basket holds a run of consecutive events of one branch. Scalar
// payloads are the raw little-endian values; jagged payloads are a u32
// offset table of n_entries + 1 entries followed by the flat values.
// See docs/format.md for the byte-level description.

#include <array>
#include <cstdio>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "skimlite/bytes.hpp"
#include "skimlite/codec.hpp"

namespace skimlite {

class RangeSource;

namespace colfmt {

inline constexpr std::array<char, 8> kMagic = {'S', 'K', 'I', 'M', 'L', 'I', 'T', 'E'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kPreambleSize = 32;  // magic + 24-byte preamble
inline constexpr std::uint64_t kDefaultBasketTarget = 64 * 1024;

enum class BranchKind : std::uint8_t { scalar = 0, jagged = 1 };
enum class ValueType : std::uint8_t { f32 = 0, f64 = 1, i32 = 2, u8 = 3, boolean = 4 };

std::size_t value_width(ValueType t);
std::string_view value_type_name(ValueType t);
std::optional<ValueType> value_type_from_name(std::string_view name);
std::string_view kind_name(BranchKind k);

/// Typed flat storage. bool and u8 both live in the uint8_t alternative.
using ColumnValues = std::variant<std::vector<float>, std::vector<double>,
                                  std::vector<std::int32_t>, std::vector<std::uint8_t>>;
using ValueSpan = std::variant<std::span<const float>, std::span<const double>,
                               std::span<const std::int32_t>, std::span<const std::uint8_t>>;

ColumnValues make_values(ValueType t);
std::size_t values_size(const ColumnValues& v);
std::size_t span_size(const ValueSpan& v);
double span_at(const ValueSpan& v, std::size_t i);
/// Appends every element of `src` to `dst`; both must hold the same alternative.
void append_values(ColumnValues& dst, const ValueSpan& src);

struct BasketRef {
  std::uint64_t file_offset = 0;
  std::uint64_t compressed_len = 0;
  std::uint64_t uncompressed_len = 0;
  Codec codec = Codec::none;
  std::uint64_t n_entries = 0;

  bool operator==(const BasketRef&) const = default;
};

/// Schema half of a branch; what a writer is given.
struct BranchSchema {
  std::string name;
  BranchKind kind = BranchKind::scalar;
  ValueType value_type = ValueType::f32;
  std::string counter_branch;  // jagged only, names a scalar i32 branch

  bool operator==(const BranchSchema&) const = default;
};

struct BranchMeta {
  std::string name;
  BranchKind kind = BranchKind::scalar;
  ValueType value_type = ValueType::f32;
  std::string counter_branch;
  std::vector<BasketRef> baskets;
  std::vector<std::uint64_t> first_event;  // one per basket, strictly increasing

  BranchSchema schema() const { return {name, kind, value_type, counter_branch}; }
  bool is_jagged() const { return kind == BranchKind::jagged; }
  /// One past the last event of basket `b`.
  std::uint64_t basket_end(std::size_t b, std::uint64_t n_events) const {
    return b + 1 < first_event.size() ? first_event[b + 1] : n_events;
  }

  bool operator==(const BranchMeta&) const = default;
};

struct DatasetHeader {
  std::uint32_t format_version = kFormatVersion;
  std::uint64_t n_events = 0;
  std::uint64_t basket_target = kDefaultBasketTarget;
  std::vector<BranchMeta> branches;
  std::uint64_t header_length = 0;  // body bytes following the preamble

  /// Index of the branch called `name`, if any.
  std::optional<std::size_t> find(std::string_view name) const;
  const BranchMeta& branch(std::string_view name) const;
  /// Codec of the first basket in the file, or lz4 for an empty file.
  Codec dominant_codec() const;
  /// Sum of compressed basket sizes for the given branches.
  std::uint64_t compressed_bytes(std::span<const std::size_t> branch_indices) const;

  bool operator==(const DatasetHeader&) const = default;
};

struct ColumnSlice {
  std::string branch;
  std::uint64_t first_event = 0;
  std::uint64_t n_entries = 0;
  ColumnValues values;
  /// n_entries + 1 offsets for jagged branches; empty for scalars.
  std::vector<std::uint32_t> event_offsets;

  bool contains(std::uint64_t event) const {
    return event >= first_event && event < first_event + n_entries;
  }
};

/// Byte destination for writers.
class ByteSink {
 public:
  virtual ~ByteSink() = default;
  virtual void write(ByteView data) = 0;
};

class MemorySink : public ByteSink {
 public:
  void write(ByteView data) override { bytes_.insert(bytes_.end(), data.begin(), data.end()); }
  const Bytes& bytes() const { return bytes_; }
  Bytes take() { return std::move(bytes_); }

 private:
  Bytes bytes_;
};

/// Writes to a file path; throws TransportError on open or write failure.
class FileSink : public ByteSink {
 public:
  explicit FileSink(const std::string& path);
  ~FileSink() override;
  FileSink(const FileSink&) = delete;
  FileSink& operator=(const FileSink&) = delete;
  void write(ByteView data) override;
  void close();

 private:
  std::FILE* file_ = nullptr;
  std::string path_;
};

struct WriteOptions {
  std::uint64_t basket_target = kDefaultBasketTarget;
  Codec codec = Codec::lz4;
};

/// Serializes `columns` (one per schema entry, same order) and returns the
/// header exactly as written. Scalar columns hold n_events values; jagged
/// columns hold the flat concatenation whose length is the sum of the
/// counter branch.
DatasetHeader write_dataset(std::span<const BranchSchema> schema,
                            std::span<const ColumnValues> columns,
                            const WriteOptions& options, ByteSink& sink);

/// Parses a complete preamble + header body. Exposed for in-memory use; the
/// range-reading entry point is read_header().
DatasetHeader parse_header(ByteView preamble, ByteView body);
DatasetHeader read_header(RangeSource& source);

/// Binary search over the first-event index array.
std::size_t locate_basket(const BranchMeta& meta, std::uint64_t n_events, std::uint64_t event);

Bytes decompress_basket(ByteView raw, const BasketRef& ref);

ColumnSlice deserialize_column(ByteView payload, const BranchMeta& meta, std::size_t basket_index);

/// Values of one event; a singleton for scalar branches.
ValueSpan event_values(const ColumnSlice& slice, std::uint64_t event);

/// Reads and decodes every basket of one branch into a single slice.
ColumnSlice read_branch(RangeSource& source, const DatasetHeader& header, std::string_view name);

/// Checks the structural invariants of a header; throws FormatError.
void validate_header(const DatasetHeader& header, std::uint64_t file_size);

}  // namespace colfmt
}  // namespace skimlite
