#include <gtest/gtest.h>

#include <random>

#include "rigidflow/velocity_field.hpp"

using namespace rigidflow;

namespace {
VelocityComponents random_components(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  VelocityComponents c;
  for (auto& v : c.v) v = n(rng);
  return c;
}
}  // namespace

TEST(Basis, MatchesExplicitRows) {
  const Vec3 p(1.5, -2.0, 0.25);
  const BasisMatrix b = basis_matrix(p);
  BasisMatrix expected;
  expected << 1, 0, 0, 0, 1, 0, 0, 0, 1, 2.0, 1.5, 0, 0.25, 0, -1.5, 0, -0.25, -2.0;
  EXPECT_EQ(b, expected);
}

TEST(Basis, ProductEqualsLinearPlusCross) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const VelocityComponents c = random_components(rng);
    const Vec3 p(n(rng), n(rng), n(rng));
    Eigen::Matrix<double, 1, 6> row;
    for (int k = 0; k < 6; ++k) row[k] = c[static_cast<std::size_t>(k)];
    const Vec3 via_basis = (row * basis_matrix(p)).transpose();
    EXPECT_LT((via_basis - eval_velocity(c, p)).norm(), 1e-13);
  }
}

TEST(Basis, AngularOrdering) {
  // Only wz set: rotation about z, v = (-wz py, wz px, 0).
  VelocityComponents c;
  c[3] = 2.0;
  EXPECT_LT((eval_velocity(c, Vec3(1, 0, 0)) - Vec3(0, 2, 0)).norm(), 1e-15);
  EXPECT_EQ(c.angular(), Vec3(0, 0, 2));
  const auto d = VelocityComponents::from_linear_angular(Vec3(1, 2, 3), Vec3(4, 5, 6));
  EXPECT_EQ(d.v, (std::array<double, 6>{1, 2, 3, 6, 5, 4}));
}

TEST(Divergence, FreeForEveryComponentVector) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int i = 0; i < 1000; ++i) {
    const VelocityComponents c = random_components(rng);
    const Vec3 p(n(rng), n(rng), n(rng));
    EXPECT_LE(std::abs(numeric_divergence(c, p)), 1e-8);
    EXPECT_EQ(velocity_jacobian(c).trace(), 0.0);
  }
}

TEST(Divergence, DetectsNonSolenoidalField) {
  // v = p has divergence 3.
  const double div = numeric_divergence([](const Vec3& p) { return p; }, Vec3(0.3, 0.1, -0.2));
  EXPECT_NEAR(div, 3.0, 1e-9);
}

TEST(Divergence, RejectsNonPositiveStep) {
  VelocityComponents c;
  EXPECT_THROW(numeric_divergence(c, Vec3::Zero(), 0.0), Error);
}

TEST(Jacobian, MatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const VelocityComponents c = random_components(rng);
  const Vec3 p(0.4, -0.7, 1.2);
  const double h = 1e-6;
  Mat3 fd;
  for (int a = 0; a < 3; ++a) {
    Vec3 dp = Vec3::Zero();
    dp[a] = h;
    fd.col(a) = (eval_velocity(c, p + dp) - eval_velocity(c, p - dp)) / (2 * h);
  }
  EXPECT_LT((fd - velocity_jacobian(c)).norm(), 1e-8);
}

TEST(Field, ZeroComponentsGiveZeroVelocity) {
  EXPECT_EQ(eval_velocity(VelocityComponents{}, Vec3(3, 4, 5)), Vec3::Zero());
}
