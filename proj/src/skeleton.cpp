#include "handkin/skeleton.hpp"

#include <cmath>
#include <numbers>
#include <queue>
#include <sstream>

#include "handkin/serialization.hpp"

namespace handkin {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

std::string describe(const Limit& l) {
  std::ostringstream os;
  os << '(' << l.min << ", " << l.max << ')';
  return os.str();
}

}  // namespace

AxisMask active_axes(int dof) {
  switch (dof) {
    case 0: return {false, false, false};
    case 1: return {true, false, false};
    case 2: return {true, false, true};
    case 3: return {true, true, true};
    default: throw ValidationError("dof must lie in 0..3, got " + std::to_string(dof));
  }
}

std::vector<std::vector<std::size_t>> compute_bfs_levels(const std::vector<JointSpec>& joints) {
  const std::size_t n = joints.size();
  std::vector<std::vector<std::size_t>> children(n);
  std::optional<std::size_t> root;
  for (std::size_t i = 0; i < n; ++i) {
    if (!joints[i].parent) {
      if (root) throw ValidationError("skeleton has more than one root");
      root = i;
    } else if (*joints[i].parent >= n || *joints[i].parent == i) {
      throw ValidationError("joint " + std::to_string(i) + " has an invalid parent");
    } else {
      children[*joints[i].parent].push_back(i);
    }
  }
  if (!root) throw ValidationError("skeleton has no root");

  std::vector<std::vector<std::size_t>> levels{{*root}};
  std::size_t visited = 1;
  while (true) {
    std::vector<std::size_t> next;
    for (std::size_t j : levels.back())
      for (std::size_t c : children[j]) next.push_back(c);
    if (next.empty()) break;
    visited += next.size();
    levels.push_back(std::move(next));
  }
  if (visited != n) throw ValidationError("skeleton parents do not form a tree");
  return levels;
}

std::vector<Violation> validate_graph(const SkeletonGraph& g) {
  std::vector<Violation> out;
  const std::size_t n = g.joints.size();
  if (n == 0) {
    out.push_back({"root", 0, "graph has no joints"});
    return out;
  }

  std::size_t roots = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const JointSpec& j = g.joints[i];
    if (j.id != i) out.push_back({"id", i, "joint id " + std::to_string(j.id) + " stored at index " + std::to_string(i)});
    if (!j.parent) {
      ++roots;
    } else if (*j.parent == i) {
      out.push_back({"cycle", i, "joint is its own parent"});
    } else if (*j.parent >= n) {
      out.push_back({"orphan", i, "parent " + std::to_string(*j.parent) + " does not exist"});
    }

    if (j.dof < 0 || j.dof > 3) {
      out.push_back({"dof", i, "dof " + std::to_string(j.dof) + " outside 0..3"});
    } else if (j.euler_limits.size() != static_cast<std::size_t>(j.dof)) {
      out.push_back({"dof", i, std::to_string(j.euler_limits.size()) + " limits for " + std::to_string(j.dof) + " dof"});
    }
    for (const Limit& l : j.euler_limits) {
      if (!(l.min < l.max)) out.push_back({"inverted limit", i, "euler limit " + describe(l)});
    }
    if (j.splay_limits) {
      for (const Limit& l : *j.splay_limits) {
        if (!(l.min < l.max)) out.push_back({"inverted limit", i, "splay limit " + describe(l)});
      }
    }
    const Limit& p = j.proportion_limits;
    if (!(p.min > 0.0)) out.push_back({"inverted limit", i, "proportion minimum must be positive " + describe(p)});
    if (!(p.min <= p.max)) out.push_back({"inverted limit", i, "proportion limit " + describe(p)});
    if (!(std::abs(j.offset_direction.norm() - 1.0) <= 1e-9)) {
      out.push_back({"offset", i, "offset direction is not unit length"});
    }
  }
  if (roots != 1) out.push_back({"root", 0, "expected exactly one root, found " + std::to_string(roots)});

  // Walk each joint towards the root; a walk longer than n revisits a joint.
  for (std::size_t i = 0; i < n; ++i) {
    const auto& own = g.joints[i].parent;
    const bool own_parent_valid = !own || (*own < n && *own != i);
    std::size_t cur = i;
    std::size_t steps = 0;
    while (g.joints[cur].parent) {
      const std::size_t p = *g.joints[cur].parent;
      if (p >= n || p == cur) {
        if (own_parent_valid) out.push_back({"orphan", i, "joint is not connected to the root"});
        break;
      }
      cur = p;
      if (++steps > n) {
        out.push_back({"cycle", i, "ancestor chain loops"});
        break;
      }
    }
  }

  if (g.anchor_edge >= n) {
    out.push_back({"missing anchor", g.anchor_edge, "anchor joint does not exist"});
  } else if (!g.joints[g.anchor_edge].parent) {
    out.push_back({"missing anchor", g.anchor_edge, "anchor joint is the root and has no incoming bone"});
  }

  // Level partition: every joint exactly once, root alone first, parent exactly one level up.
  std::vector<int> level_of(n, -1);
  bool levels_ok = !g.bfs_levels.empty();
  for (std::size_t d = 0; d < g.bfs_levels.size() && levels_ok; ++d) {
    for (std::size_t j : g.bfs_levels[d]) {
      if (j >= n || level_of[j] != -1) {
        levels_ok = false;
        break;
      }
      level_of[j] = static_cast<int>(d);
    }
  }
  for (std::size_t i = 0; i < n && levels_ok; ++i) {
    if (level_of[i] < 0) {
      levels_ok = false;
    } else if (!g.joints[i].parent) {
      levels_ok = level_of[i] == 0;
    } else if (*g.joints[i].parent < n) {
      levels_ok = level_of[*g.joints[i].parent] == level_of[i] - 1;
    }
  }
  if (!levels_ok) out.push_back({"levels", 0, "bfs_levels is not a valid level partition"});
  return out;
}

SkeletonGraph canonical_hand_topology() {
  const std::vector<Limit> thumb3(3, Limit{-45.0 * kDeg, 45.0 * kDeg});
  const std::vector<Limit> thumb1(1, Limit{-45.0 * kDeg, 45.0 * kDeg});
  const std::vector<Limit> mcp{{-20.0 * kDeg, 100.0 * kDeg}, {-25.0 * kDeg, 25.0 * kDeg}};
  const std::vector<Limit> flex{{0.0, 100.0 * kDeg}};
  const Limit bone{0.3, 1.2};

  // Splay centres fan the fingers out in the palm plane; the thumb sits furthest towards +x.
  auto splay = [](double z_centre_deg) {
    constexpr double half = 30.0 * kDeg;
    const double c = z_centre_deg * kDeg;
    return std::array<Limit, 3>{Limit{-half, half}, Limit{-half, half}, Limit{c - half, c + half}};
  };

  SkeletonGraph g;
  auto add = [&](std::string name, std::optional<std::size_t> parent, int dof, std::vector<Limit> limits,
                 Limit proportion, std::optional<std::array<Limit, 3>> splay_limits = std::nullopt) {
    JointSpec j;
    j.id = g.joints.size();
    j.parent = parent;
    j.dof = dof;
    j.euler_limits = std::move(limits);
    j.offset_direction = Eigen::Vector3d::UnitY();
    j.proportion_limits = proportion;
    j.name = std::move(name);
    j.splay_limits = splay_limits;
    g.joints.push_back(std::move(j));
    return g.joints.back().id;
  };

  // The root orientation comes from the 9-DoF matrix; its Euler slots are bookkeeping only.
  const std::size_t wrist =
      add("wrist", std::nullopt, 3, std::vector<Limit>(3, Limit{-std::numbers::pi, std::numbers::pi}), Limit{1.0, 1.0});

  const std::size_t cmc = add("thumb_cmc", wrist, 3, thumb3, bone, splay(-45.0));
  const std::size_t tmcp = add("thumb_mcp", cmc, 3, thumb3, bone);
  const std::size_t tip = add("thumb_ip", tmcp, 1, thumb1, bone);
  add("thumb_tip", tip, 0, {}, bone);

  const char* fingers[] = {"index", "middle", "ring", "pinky"};
  const double centres[] = {-10.0, 0.0, 10.0, 20.0};
  for (int f = 0; f < 4; ++f) {
    const std::string name = fingers[f];
    // The wrist -> index MCP bone is the scale reference, so its proportion is pinned to 1.
    const Limit base = f == 0 ? Limit{1.0, 1.0} : bone;
    const std::size_t m = add(name + "_mcp", wrist, 2, mcp, base, splay(centres[f]));
    const std::size_t p = add(name + "_pip", m, 1, flex, bone);
    const std::size_t d = add(name + "_dip", p, 1, flex, bone);
    add(name + "_tip", d, 0, {}, bone);
  }
  g.anchor_edge = hand::kIndexMcp;
  g.bfs_levels = compute_bfs_levels(g.joints);
  return g;
}

Skeleton::Skeleton(SkeletonGraph graph) : graph_(std::move(graph)) {
  if (graph_.bfs_levels.empty()) {
    try {
      graph_.bfs_levels = compute_bfs_levels(graph_.joints);
    } catch (const ValidationError&) {
      // Reported with full detail by validate_graph below.
    }
  }
  const auto violations = validate_graph(graph_);
  if (!violations.empty()) {
    std::ostringstream os;
    os << "invalid skeleton graph:";
    for (const auto& v : violations) os << "\n  [" << v.kind << "] joint " << v.joint << ": " << v.detail;
    throw ValidationError(os.str());
  }

  const std::size_t n = graph_.joints.size();
  root_ = graph_.bfs_levels.front().front();
  angle_slot_.assign(n, 0);
  splay_slot_.assign(n, std::nullopt);
  proportion_slot_.assign(n, std::nullopt);

  for (std::size_t i = 0; i < n; ++i) {
    const JointSpec& j = graph_.joints[i];
    angle_slot_[i] = angle_limits_.size();
    for (const Limit& l : j.euler_limits) {
      angle_limits_.push_back(l);
      masked_angles_.push_back(i == root_);
    }
    articulated_dof_ += static_cast<std::size_t>(j.dof);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const JointSpec& j = graph_.joints[i];
    if (!j.splay_limits) continue;
    splay_slot_[i] = angle_limits_.size();
    for (const Limit& l : *j.splay_limits) {
      angle_limits_.push_back(l);
      masked_angles_.push_back(false);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (i == root_) continue;
    proportion_slot_[i] = proportion_limits_.size();
    proportion_limits_.push_back(graph_.joints[i].proportion_limits);
  }
}

const Skeleton& Skeleton::canonical_hand() {
  static const Skeleton hand(canonical_hand_topology());
  return hand;
}

std::uint64_t Skeleton::hash() const {
  return fnv1a64(skeleton_to_json(graph_).dump());
}

void check_params(const Skeleton& skeleton, const PoseParams& params) {
  if (static_cast<std::size_t>(params.angles.size()) != skeleton.angle_count()) {
    throw ValidationError("angles vector has length " + std::to_string(params.angles.size()) + ", expected " +
                          std::to_string(skeleton.angle_count()));
  }
  if (static_cast<std::size_t>(params.proportions_raw.size()) != skeleton.proportion_count()) {
    throw ValidationError("proportions vector has length " + std::to_string(params.proportions_raw.size()) +
                          ", expected " + std::to_string(skeleton.proportion_count()));
  }
  if (!(params.anchor_length > 0.0)) throw ValidationError("anchor_length must be positive");
  if (!params.root_rotation_raw.allFinite() || !params.root_offset.allFinite() || !params.angles.allFinite() ||
      !params.proportions_raw.allFinite() || !std::isfinite(params.anchor_length)) {
    throw NumericalError("pose parameters contain non-finite values");
  }
}

PoseParams pack_params(const Skeleton& skeleton, const Eigen::Matrix3d& root_rotation_raw,
                       const Eigen::Vector3d& root_offset, const Eigen::VectorXd& angles,
                       const Eigen::VectorXd& proportions_raw, double anchor_length) {
  PoseParams p{root_rotation_raw, root_offset, angles, proportions_raw, anchor_length};
  check_params(skeleton, p);
  return p;
}

PoseComponents unpack_params(const PoseParams& params) {
  return {params.root_rotation_raw, params.root_offset, params.angles, params.proportions_raw, params.anchor_length};
}

PoseParams zero_params(const Skeleton& skeleton, double anchor_length) {
  PoseParams p;
  p.angles = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(skeleton.angle_count()));
  p.proportions_raw = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(skeleton.proportion_count()));
  p.anchor_length = anchor_length;
  return p;
}

Eigen::VectorXd flatten(const PoseParams& params) {
  const Eigen::Index na = params.angles.size();
  const Eigen::Index np = params.proportions_raw.size();
  Eigen::VectorXd flat(12 + na + np + 1);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) flat(3 * r + c) = params.root_rotation_raw(r, c);
  flat.segment<3>(9) = params.root_offset;
  flat.segment(12, na) = params.angles;
  flat.segment(12 + na, np) = params.proportions_raw;
  flat(12 + na + np) = params.anchor_length;
  return flat;
}

PoseParams unflatten(const Skeleton& skeleton, const Eigen::VectorXd& flat) {
  if (static_cast<std::size_t>(flat.size()) != skeleton.raw_size()) {
    throw ValidationError("flat parameter vector has length " + std::to_string(flat.size()) + ", expected " +
                          std::to_string(skeleton.raw_size()));
  }
  const auto na = static_cast<Eigen::Index>(skeleton.angle_count());
  const auto np = static_cast<Eigen::Index>(skeleton.proportion_count());
  PoseParams p;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) p.root_rotation_raw(r, c) = flat(3 * r + c);
  p.root_offset = flat.segment<3>(9);
  p.angles = flat.segment(12, na);
  p.proportions_raw = flat.segment(12 + na, np);
  p.anchor_length = flat(12 + na + np);
  return p;
}

}  // namespace handkin
