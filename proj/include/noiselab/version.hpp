// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace noiselab {

inline constexpr const char* kToolName = "noiselab";
inline constexpr const char* kVersion = "0.1.0";

}  // namespace noiselab
