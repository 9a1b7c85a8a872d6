#include <doctest.h>

#include <random>

#include "handkin/serialization.hpp"
#include "handkin/skeleton.hpp"
#include "support.hpp"

using namespace handkin;

namespace {

bool has_violation(const std::vector<Violation>& vs, const std::string& kind) {
  for (const Violation& v : vs)
    if (v.kind == kind) return true;
  return false;
}

}  // namespace

TEST_CASE("canonical hand has 21 joints and 20 edges") {
  const SkeletonGraph g = canonical_hand_topology();
  CHECK(g.joints.size() == 21);
  int edges = 0;
  for (const JointSpec& j : g.joints) edges += j.parent ? 1 : 0;
  CHECK(edges == 20);
  CHECK(validate_graph(g).empty());
}

TEST_CASE("DoF accounting: 26 articulated plus 15 splay angles") {
  const Skeleton& sk = Skeleton::canonical_hand();
  int dof = 0;
  int splayed = 0;
  for (const JointSpec& j : sk.joints()) {
    dof += j.dof;
    splayed += j.splay_limits ? 1 : 0;
  }
  CHECK(dof == 26);
  CHECK(splayed * 3 == 15);
  CHECK(sk.articulated_dof() == 26);
  CHECK(sk.angle_count() == 41);
  CHECK(sk.proportion_count() == 20);
  CHECK(sk.raw_size() == 74);
}

TEST_CASE("per-joint DoF follows the hand anatomy") {
  const Skeleton& sk = Skeleton::canonical_hand();
  auto dof_of = [&](const std::string& name) {
    for (const JointSpec& j : sk.joints())
      if (j.name == name) return j.dof;
    FAIL("missing joint " << name);
    return -1;
  };
  CHECK(dof_of("wrist") == 3);
  CHECK(dof_of("thumb_cmc") == 3);
  CHECK(dof_of("thumb_mcp") == 3);
  CHECK(dof_of("thumb_ip") == 1);
  for (const char* f : {"index", "middle", "ring", "pinky"}) {
    CHECK(dof_of(std::string(f) + "_mcp") == 2);
    CHECK(dof_of(std::string(f) + "_pip") == 1);
    CHECK(dof_of(std::string(f) + "_dip") == 1);
    CHECK(dof_of(std::string(f) + "_tip") == 0);
  }
}

TEST_CASE("anchor edge is wrist to index MCP") {
  const SkeletonGraph g = canonical_hand_topology();
  const JointSpec& a = g.joints.at(g.anchor_edge);
  CHECK(a.name == "index_mcp");
  CHECK(a.parent == std::optional<std::size_t>(hand::kWrist));
}

TEST_CASE("canonical topology is deterministic") {
  CHECK(skeleton_to_json(canonical_hand_topology()).dump() == skeleton_to_json(canonical_hand_topology()).dump());
  CHECK(Skeleton(canonical_hand_topology()).hash() == Skeleton::canonical_hand().hash());
}

TEST_CASE("BFS levels place every parent exactly one level up") {
  const Skeleton& sk = Skeleton::canonical_hand();
  std::vector<std::size_t> level_of(sk.joint_count());
  for (std::size_t d = 0; d < sk.levels().size(); ++d)
    for (std::size_t id : sk.levels()[d]) level_of[id] = d;
  for (const JointSpec& j : sk.joints()) {
    if (j.parent) CHECK(level_of[j.id] == level_of[*j.parent] + 1);
    else CHECK(level_of[j.id] == 0);
  }
}

TEST_CASE("validate_graph reports every violation") {
  SkeletonGraph g = canonical_hand_topology();
  g.joints[7].parent = 7;
  g.joints[3].proportion_limits = {1.2, 0.3};
  g.joints[10].euler_limits[0] = {1.0, -1.0};
  const auto vs = validate_graph(g);
  CHECK(has_violation(vs, "cycle"));
  CHECK(has_violation(vs, "inverted limit"));
  int inverted = 0;
  for (const Violation& v : vs) inverted += v.kind == "inverted limit";
  CHECK(inverted == 2);
  CHECK_THROWS_AS(Skeleton{g}, ValidationError);
}

TEST_CASE("validate_graph catches orphans, missing anchors and bad DoF") {
  SkeletonGraph g = canonical_hand_topology();
  g.joints[12].parent = 99;
  CHECK(has_violation(validate_graph(g), "orphan"));

  g = canonical_hand_topology();
  g.anchor_edge = 40;
  CHECK(has_violation(validate_graph(g), "missing anchor"));

  g = canonical_hand_topology();
  g.joints[6].dof = 4;
  CHECK(has_violation(validate_graph(g), "dof"));

  g = canonical_hand_topology();
  g.joints[6].offset_direction = {0.0, 2.0, 0.0};
  CHECK(has_violation(validate_graph(g), "offset"));

  g = canonical_hand_topology();
  g.joints[1].parent.reset();
  CHECK(has_violation(validate_graph(g), "root"));
}

TEST_CASE("pack and unpack are exact inverses") {
  const Skeleton& sk = Skeleton::canonical_hand();
  std::mt19937_64 rng(42);
  const PoseParams p = testing_support::random_params(sk, rng);
  const PoseComponents c = unpack_params(p);
  const PoseParams q = pack_params(sk, c.root_rotation_raw, c.root_offset, c.angles, c.proportions_raw, c.anchor_length);
  CHECK(q.root_rotation_raw == p.root_rotation_raw);
  CHECK(q.root_offset == p.root_offset);
  CHECK(q.angles == p.angles);
  CHECK(q.proportions_raw == p.proportions_raw);
  CHECK(q.anchor_length == p.anchor_length);

  const PoseParams r = unflatten(sk, flatten(p));
  CHECK(flatten(r) == flatten(p));
}

TEST_CASE("zero vectors pack into valid params and wrong lengths are rejected") {
  const Skeleton& sk = Skeleton::canonical_hand();
  const PoseParams z = pack_params(sk, Eigen::Matrix3d::Identity(), Eigen::Vector3d::Zero(), Eigen::VectorXd::Zero(41),
                                   Eigen::VectorXd::Zero(20), 1.0);
  CHECK_NOTHROW(check_params(sk, z));
  CHECK_THROWS_AS(pack_params(sk, Eigen::Matrix3d::Identity(), Eigen::Vector3d::Zero(), Eigen::VectorXd::Zero(40),
                              Eigen::VectorXd::Zero(20), 1.0),
                  ValidationError);
  CHECK_THROWS_AS(pack_params(sk, Eigen::Matrix3d::Identity(), Eigen::Vector3d::Zero(), Eigen::VectorXd::Zero(41),
                              Eigen::VectorXd::Zero(20), 0.0),
                  ValidationError);
}

TEST_CASE("skeleton JSON round trips with fixed field order") {
  const SkeletonGraph g = canonical_hand_topology();
  const Json j = skeleton_to_json(g);
  std::vector<std::string> keys;
  for (auto it = j["joints"][1].begin(); it != j["joints"][1].end(); ++it) keys.push_back(it.key());
  const std::vector<std::string> expected = {"id", "parent", "dof", "limits", "offset_dir", "proportion_limits", "name",
                                             "splay_limits"};
  CHECK(keys == expected);
  CHECK(j["joints"][0]["parent"].is_null());
  const SkeletonGraph back = skeleton_from_json(Json::parse(j.dump()));
  CHECK(skeleton_to_json(back).dump() == j.dump());
  CHECK(back.bfs_levels == g.bfs_levels);
}

TEST_CASE("masked angle slots are exactly the wrist Euler slots") {
  const Skeleton& sk = Skeleton::canonical_hand();
  const auto& m = sk.masked_angles();
  for (std::size_t i = 0; i < m.size(); ++i) CHECK(m[i] == (i < 3));
}
