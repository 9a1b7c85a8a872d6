#pragma once

#include <Eigen/Dense>
#include <random>

#include "handkin/kinematics.hpp"
#include "handkin/skeleton.hpp"

namespace testing_support {

inline Eigen::VectorXd gaussian(std::mt19937_64& rng, Eigen::Index n, double sigma = 1.0) {
  std::normal_distribution<double> nd(0.0, sigma);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = nd(rng);
  return v;
}

/// Random raw pose: near-rotation root, random angles and proportions, anchor in [0.05, 0.15].
inline handkin::PoseParams random_params(const handkin::Skeleton& sk, std::mt19937_64& rng, double angle_sigma = 1.0) {
  handkin::PoseParams p = handkin::zero_params(sk);
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
  for (int i = 0; i < 9; ++i) m(i / 3, i % 3) += gaussian(rng, 1, 0.7)(0);
  p.root_rotation_raw = m;
  p.root_offset = gaussian(rng, 3, 0.2);
  p.angles = gaussian(rng, static_cast<Eigen::Index>(sk.angle_count()), angle_sigma);
  p.proportions_raw = gaussian(rng, static_cast<Eigen::Index>(sk.proportion_count()), angle_sigma);
  std::uniform_real_distribution<double> ud(0.05, 0.15);
  p.anchor_length = ud(rng);
  return p;
}

}  // namespace testing_support
