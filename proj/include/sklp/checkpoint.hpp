#pragma once

// Checkpoint layout (all integers little-endian):
//
//   "SKLP" | u32 format version | u32 json length | canonical JSON
//   then, per parameter in lexicographic name order until end of file:
//   u32 name length | name bytes | u32 rank | u32 dims[rank] | f32 payload
//
// The JSON object holds the model config keys plus "param_version".

#include "sklp/model.hpp"

#include <filesystem>
#include <string>

namespace sklp::model {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const ParamSet& params);
ParamSet deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const ParamSet& params, const std::filesystem::path& path);
ParamSet load_checkpoint(const std::filesystem::path& path);

/// Parameters as they read back from a checkpoint (payload rounded to f32).
ParamSet round_trip_f32(const ParamSet& params);

}  // namespace sklp::model
