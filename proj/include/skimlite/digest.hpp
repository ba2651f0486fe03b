#pragma once

#include <string>

#include "skimlite/bytes.hpp"

namespace skimlite {

/// Lower-case hex SHA-256.
std::string sha256_hex(ByteView data);
std::string sha256_hex(const std::string& data);
std::string sha256_file(const std::string& path);

}  // namespace skimlite
