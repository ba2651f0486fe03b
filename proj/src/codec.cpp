#include "skimlite/codec.hpp"

#include <lz4.h>
#include <zlib.h>

#include <limits>

namespace skimlite {

std::string_view codec_name(Codec c) {
  switch (c) {
    case Codec::none: return "none";
    case Codec::lz4: return "lz4";
    case Codec::deflate: return "deflate";
  }
  return "unknown";
}

std::optional<Codec> codec_from_name(std::string_view name) {
  if (name == "none") return Codec::none;
  if (name == "lz4") return Codec::lz4;
  if (name == "deflate") return Codec::deflate;
  return std::nullopt;
}

Codec codec_from_id(std::uint8_t id) {
  if (id > static_cast<std::uint8_t>(Codec::deflate)) {
    throw FormatError("unknown codec id " + std::to_string(id));
  }
  return static_cast<Codec>(id);
}

namespace {

constexpr int kDeflateLevel = Z_BEST_COMPRESSION;
constexpr int kRawDeflateWindow = -15;

void check_int_size(std::size_t n) {
  if (n > static_cast<std::size_t>(std::numeric_limits<int>::max())) {
    throw FormatError("block too large for codec: " + std::to_string(n) + " bytes");
  }
}

Bytes lz4_compress(ByteView in) {
  check_int_size(in.size());
  Bytes out(static_cast<std::size_t>(LZ4_compressBound(static_cast<int>(in.size()))));
  const int n = LZ4_compress_default(reinterpret_cast<const char*>(in.data()),
                                     reinterpret_cast<char*>(out.data()),
                                     static_cast<int>(in.size()), static_cast<int>(out.size()));
  if (n <= 0) throw FormatError("lz4 compression failed");
  out.resize(static_cast<std::size_t>(n));
  return out;
}

Bytes lz4_decompress(ByteView in, std::size_t out_len) {
  check_int_size(in.size());
  check_int_size(out_len);
  Bytes out(out_len);
  const int n = LZ4_decompress_safe(reinterpret_cast<const char*>(in.data()),
                                    reinterpret_cast<char*>(out.data()),
                                    static_cast<int>(in.size()), static_cast<int>(out_len));
  if (n < 0) throw FormatError("corrupt lz4 stream");
  if (static_cast<std::size_t>(n) != out_len) {
    throw FormatError("lz4 length mismatch: got " + std::to_string(n) + ", expected " +
                      std::to_string(out_len));
  }
  return out;
}

Bytes deflate_compress(ByteView in) {
  z_stream zs{};
  if (deflateInit2(&zs, kDeflateLevel, Z_DEFLATED, kRawDeflateWindow, 9, Z_DEFAULT_STRATEGY) !=
      Z_OK) {
    throw FormatError("deflateInit2 failed");
  }
  Bytes out(deflateBound(&zs, static_cast<uLong>(in.size())));
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  const auto produced = zs.total_out;
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw FormatError("deflate compression failed");
  out.resize(produced);
  return out;
}

Bytes deflate_decompress(ByteView in, std::size_t out_len) {
  z_stream zs{};
  if (inflateInit2(&zs, kRawDeflateWindow) != Z_OK) throw FormatError("inflateInit2 failed");
  Bytes out(out_len);
  // zlib rejects a null output pointer even when there is nothing to write.
  Bytef empty_out = 0;
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.empty() ? &empty_out : out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  const auto produced = zs.total_out;
  const auto consumed = zs.total_in;
  inflateEnd(&zs);
  if (rc != Z_STREAM_END) {
    if (rc == Z_BUF_ERROR && zs.avail_out == 0) {
      throw FormatError("deflate length mismatch: stream longer than " + std::to_string(out_len));
    }
    throw FormatError("corrupt deflate stream");
  }
  if (produced != out_len) {
    throw FormatError("deflate length mismatch: got " + std::to_string(produced) +
                      ", expected " + std::to_string(out_len));
  }
  if (consumed != in.size()) throw FormatError("trailing bytes after deflate stream");
  return out;
}

}  // namespace

Bytes compress(Codec codec, ByteView input) {
  switch (codec) {
    case Codec::none: return Bytes(input.begin(), input.end());
    case Codec::lz4: return lz4_compress(input);
    case Codec::deflate: return deflate_compress(input);
  }
  throw FormatError("unknown codec");
}

Bytes decompress(Codec codec, ByteView input, std::size_t uncompressed_len) {
  switch (codec) {
    case Codec::none:
      if (input.size() != uncompressed_len) {
        throw FormatError("uncompressed basket length mismatch");
      }
      return Bytes(input.begin(), input.end());
    case Codec::lz4: return lz4_decompress(input, uncompressed_len);
    case Codec::deflate: return deflate_decompress(input, uncompressed_len);
  }
  throw FormatError("unknown codec");
}

}  // namespace skimlite
