#include "handkin/serialization.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace handkin {

namespace {

Json matrix_row_major(const Eigen::Matrix3d& m) {
  Json out = Json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out.push_back(m(r, c));
  return out;
}

Eigen::Matrix3d matrix_from(const Json& j, const char* field) {
  if (!j.is_array() || j.size() != 9) throw ValidationError(std::string(field) + " must hold 9 numbers");
  Eigen::Matrix3d m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = j[static_cast<std::size_t>(3 * r + c)].get<double>();
  return m;
}

Json vector_json(const Eigen::VectorXd& v) {
  Json out = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

Eigen::VectorXd vector_from(const Json& j, const char* field) {
  if (!j.is_array()) throw ValidationError(std::string(field) + " must be an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

Json limit_json(const Limit& l) { return Json::array({l.min, l.max}); }

Limit limit_from(const Json& j) {
  if (!j.is_array() || j.size() != 2) throw ValidationError("limits must be [min, max] pairs");
  return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

Json skeleton_to_json(const SkeletonGraph& g) {
  Json joints = Json::array();
  for (const JointSpec& js : g.joints) {
    Json j;
    j["id"] = js.id;
    j["parent"] = js.parent ? Json(*js.parent) : Json(nullptr);
    j["dof"] = js.dof;
    Json limits = Json::array();
    for (const Limit& l : js.euler_limits) limits.push_back(limit_json(l));
    j["limits"] = limits;
    j["offset_dir"] = Json::array({js.offset_direction.x(), js.offset_direction.y(), js.offset_direction.z()});
    j["proportion_limits"] = limit_json(js.proportion_limits);
    j["name"] = js.name;
    if (js.splay_limits) {
      Json splay = Json::array();
      for (const Limit& l : *js.splay_limits) splay.push_back(limit_json(l));
      j["splay_limits"] = splay;
    }
    joints.push_back(std::move(j));
  }
  Json out;
  out["joints"] = joints;
  out["anchor_edge"] = g.anchor_edge;
  return out;
}

SkeletonGraph skeleton_from_json(const Json& j) {
  try {
    SkeletonGraph g;
    for (const Json& e : j.at("joints")) {
      JointSpec js;
      js.id = e.at("id").get<std::size_t>();
      if (!e.at("parent").is_null()) js.parent = e.at("parent").get<std::size_t>();
      js.dof = e.at("dof").get<int>();
      for (const Json& l : e.at("limits")) js.euler_limits.push_back(limit_from(l));
      const Json& d = e.at("offset_dir");
      if (!d.is_array() || d.size() != 3) throw ValidationError("offset_dir must hold 3 numbers");
      js.offset_direction = Eigen::Vector3d(d[0].get<double>(), d[1].get<double>(), d[2].get<double>());
      js.proportion_limits = limit_from(e.at("proportion_limits"));
      if (e.contains("name")) js.name = e["name"].get<std::string>();
      if (e.contains("splay_limits")) {
        const Json& s = e["splay_limits"];
        if (!s.is_array() || s.size() != 3) throw ValidationError("splay_limits must hold 3 pairs");
        js.splay_limits = std::array<Limit, 3>{limit_from(s[0]), limit_from(s[1]), limit_from(s[2])};
      }
      g.joints.push_back(std::move(js));
    }
    g.anchor_edge = j.at("anchor_edge").get<std::size_t>();
    try {
      g.bfs_levels = compute_bfs_levels(g.joints);
    } catch (const ValidationError&) {
      // Left empty; validate_graph reports the structural problem.
    }
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed skeleton document: ") + e.what());
  }
}

Json pose_to_json(const PoseParams& p) {
  Json out;
  out["root_rotation"] = matrix_row_major(p.root_rotation_raw);
  out["root_offset"] = Json::array({p.root_offset.x(), p.root_offset.y(), p.root_offset.z()});
  out["angles"] = vector_json(p.angles);
  out["proportions"] = vector_json(p.proportions_raw);
  out["anchor_length"] = p.anchor_length;
  return out;
}

PoseParams pose_from_json(const Skeleton& skeleton, const Json& j) {
  try {
    const Eigen::VectorXd offset = vector_from(j.at("root_offset"), "root_offset");
    if (offset.size() != 3) throw ValidationError("root_offset must hold 3 numbers");
    return pack_params(skeleton, matrix_from(j.at("root_rotation"), "root_rotation"), offset,
                       vector_from(j.at("angles"), "angles"), vector_from(j.at("proportions"), "proportions"),
                       j.at("anchor_length").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed pose document: ") + e.what());
  }
}

Json camera_to_json(const Camera& cam) {
  Json out;
  out["K"] = matrix_row_major(cam.K);
  out["R"] = matrix_row_major(cam.R);
  out["t"] = Json::array({cam.t.x(), cam.t.y(), cam.t.z()});
  return out;
}

Camera camera_from_json(const Json& j) {
  try {
    Camera cam;
    cam.K = matrix_from(j.at("K"), "K");
    cam.R = matrix_from(j.at("R"), "R");
    const Eigen::VectorXd t = vector_from(j.at("t"), "t");
    if (t.size() != 3) throw ValidationError("t must hold 3 numbers");
    cam.t = t;
    cam.validate();
    return cam;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed camera document: ") + e.what());
  }
}

Json positions_to_json(const JointPositions& p) {
  Json out = Json::array();
  for (Eigen::Index i = 0; i < p.rows(); ++i) out.push_back(Json::array({p(i, 0), p(i, 1), p(i, 2)}));
  return out;
}

JointPositions positions_from_json(const Json& j) {
  if (!j.is_array()) throw ValidationError("positions must be an array of [x, y, z]");
  JointPositions p(static_cast<Eigen::Index>(j.size()), 3);
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_array() || j[i].size() != 3) throw ValidationError("positions must be an array of [x, y, z]");
    for (std::size_t c = 0; c < 3; ++c) p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = j[i][c].get<double>();
  }
  return p;
}

Json schedule_to_json(const Schedule& s) {
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  Json out;
  out["T"] = s.T;
  out["betas"] = vec(s.betas);
  out["alpha_bars"] = vec(s.alpha_bars);
  out["sigmas"] = vec(s.sigmas);
  out["model_t"] = s.model_t;
  return out;
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, value >>= 4) out[static_cast<std::size_t>(i)] = digits[value & 0xF];
  return out;
}

Json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open " + path);
  try {
    return Json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("cannot parse " + path + ": " + e.what());
  }
}

void write_text_atomic(const std::string& path, const std::string& text) {
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ValidationError("cannot write " + path);
    os << text;
    if (!os) throw ValidationError("failed writing " + path);
  }
  std::filesystem::rename(tmp, target);
}

}  // namespace handkin
