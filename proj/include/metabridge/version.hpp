#pragma once

namespace metabridge {

inline constexpr const char* kToolName = "metabridge";
inline constexpr const char* kToolVersion = "0.1.0";
/// "name version", embedded in every output artifact.
inline constexpr const char* kToolString = "metabridge 0.1.0";

}  // namespace metabridge
