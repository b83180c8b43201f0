#pragma once

// Parameter archive.
//
// Layout (all integers little-endian):
//   8 bytes   magic "CVQACKPT"
//   u32       format version (1)
//   u64       byte length L of the manifest
//   L bytes   manifest, UTF-8 JSON:
//               {"meta": {...caller metadata...},
//                "tensors": [{"name": s, "shape": [..], "offset": n, "count": n}, ...]}
//   rest      float32 little-endian payload; tensor i occupies
//             [offset_i, offset_i + count_i) in units of float32
//
// Values are stored as float32 regardless of the in-memory precision.

#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "cvqa/diff.hpp"

namespace cvqa::ad {

struct Checkpoint {
  std::vector<Parameter> params;
  nlohmann::json meta;
};

void save_checkpoint(const std::filesystem::path& path, std::span<const Parameter> params,
                     const nlohmann::json& meta);

// Throws IntegrityError on a malformed or truncated archive.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cvqa::ad
