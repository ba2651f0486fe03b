#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "skimlite/bytes.hpp"

namespace skimlite {

/// Per-basket compression codec. Values are part of the on-disk format.
enum class Codec : std::uint8_t { none = 0, lz4 = 1, deflate = 2 };

std::string_view codec_name(Codec c);
std::optional<Codec> codec_from_name(std::string_view name);
/// Throws FormatError for ids outside the registry.
Codec codec_from_id(std::uint8_t id);

Bytes compress(Codec codec, ByteView input);

/// Inverse of compress(). The uncompressed size must be known up front, as
/// it is for every basket (it lives in the header).
Bytes decompress(Codec codec, ByteView input, std::size_t uncompressed_len);

}  // namespace skimlite
