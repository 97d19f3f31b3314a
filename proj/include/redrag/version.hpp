#pragma once

namespace redrag {

inline constexpr const char* kToolName = "redrag";
inline constexpr const char* kToolVersion = "0.1.0";

} // namespace redrag
