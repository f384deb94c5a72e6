#pragma once

namespace dwpix {

inline constexpr const char* kToolName = "dwpix";
inline constexpr const char* kToolVersion = "0.1.0";

} // namespace dwpix
