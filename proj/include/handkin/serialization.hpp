#pragma once

// JSON documents for skeletons, poses, cameras and position frames.

#include <cstdint>
#include <json.hpp>
#include <string>
#include <string_view>

#include "handkin/diffusion.hpp"
#include "handkin/geometry.hpp"
#include "handkin/skeleton.hpp"

namespace handkin {

using Json = nlohmann::ordered_json;

/// {joints: [{id, parent, dof, limits, offset_dir, proportion_limits, name, splay_limits?}], anchor_edge}
Json skeleton_to_json(const SkeletonGraph& g);
SkeletonGraph skeleton_from_json(const Json& j);

/// {root_rotation: 9 row-major, root_offset: 3, angles, proportions, anchor_length}
Json pose_to_json(const PoseParams& p);
PoseParams pose_from_json(const Skeleton& skeleton, const Json& j);

/// {K: 9 row-major, R: 9 row-major, t: 3}
Json camera_to_json(const Camera& cam);
Camera camera_from_json(const Json& j);

/// [[x, y, z], ...] one entry per joint.
Json positions_to_json(const JointPositions& p);
JointPositions positions_from_json(const Json& j);

/// {T, betas, alpha_bars, sigmas, model_t}
Json schedule_to_json(const Schedule& s);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view text);
/// 16 lowercase hex digits.
std::string hex64(std::uint64_t value);

Json read_json_file(const std::string& path);
/// Writes to a temporary sibling and renames over `path`.
void write_text_atomic(const std::string& path, const std::string& text);

}  // namespace handkin
