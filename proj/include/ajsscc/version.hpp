#pragma once

namespace ajsscc {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace ajsscc
