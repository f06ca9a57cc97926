#pragma once

namespace steerlm {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace steerlm
