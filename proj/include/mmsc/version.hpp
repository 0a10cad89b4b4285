#pragma once

namespace mmsc {

inline constexpr const char* kLibraryVersion = "0.1.0";

}  // namespace mmsc
