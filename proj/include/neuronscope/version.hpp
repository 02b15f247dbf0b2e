#pragma once

namespace neuronscope {

inline constexpr const char* kToolName = "neuronscope";
inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace neuronscope
