#include <gtest/gtest.h>

#include <random>

#include "gradcheck.hpp"
#include "rigidflow/networks.hpp"

using namespace rigidflow;

namespace {

ModelConfig small_config(AblationFlags a = {}) {
  ModelConfig c;
  c.code_dim = 5;
  c.bottleneck = 4;
  c.encoding_degree = 3;
  c.code_width = 12;
  c.weight_width = 12;
  c.deform_width = 12;
  c.ablation = a;
  c.particle_count = 3;
  return c;
}

// Random model with nonzero output layers, so every path carries signal.
Model random_model(const ModelConfig& c, std::uint64_t seed) {
  Model m(c);
  m.initialize(seed);
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<double> n(0.0, 0.2);
  for (Eigen::Index i = 0; i < m.params().size(); ++i) m.params()[i] += n(rng);
  return m;
}

Matrix random_points(Eigen::Index n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  Matrix p(3, n);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = d(rng);
  return p;
}

// sum(up . v) with v computed from canonical positions p0 through codes, neck
// and the velocity model, evaluated at query positions q.
double velocity_objective(const Model& m, const Matrix& p0, const Matrix& q, double t, const Matrix& up) {
  const auto idx = iota_indices(static_cast<int>(p0.cols()));
  const Matrix z = physics_codes(m, p0, idx);
  const Matrix h = bottleneck(m, z);
  return velocity_batch(m, z, h, q, t).cwiseProduct(up).sum();
}

struct ObjectiveGrad {
  Vector params;
  Matrix dq;
};

ObjectiveGrad velocity_objective_grad(const Model& m, const Matrix& p0, const Matrix& q, double t, const Matrix& up) {
  ObjectiveGrad g;
  g.params = Vector::Zero(m.params().size());
  const auto idx = iota_indices(static_cast<int>(p0.cols()));
  CodeCache cc;
  const Matrix z = physics_codes(m, p0, idx, &cc);
  MLPCache nc;
  const Matrix h = bottleneck(m, z, &nc);
  VelocityCache vc;
  velocity_batch(m, z, h, q, t, &vc);
  const VelocityGrads vg = velocity_batch_backward(m, vc, z, h, up, g.params);
  Matrix dz = vg.dz.size() ? vg.dz : Matrix::Zero(z.rows(), z.cols());
  if (vg.dh.size()) dz += bottleneck_backward(m, nc, vg.dh, g.params);
  physics_codes_backward(m, cc, dz, g.params);
  g.dq = vg.dp;
  return g;
}

}  // namespace

TEST(ModelLayout, BlocksMatchAblations) {
  const Model full(small_config());
  EXPECT_TRUE(full.code_block().present());
  EXPECT_TRUE(full.neck_block().present());
  EXPECT_TRUE(full.weight_block().present());
  EXPECT_TRUE(full.deform_block().present());
  EXPECT_FALSE(full.motion_block().present());
  EXPECT_FALSE(full.direct_block().present());
  EXPECT_FALSE(full.table_block().present());

  AblationFlags a;
  a.learnable_code = true;
  a.no_deform_field = true;
  const Model m(small_config(a));
  EXPECT_FALSE(m.code_block().present());
  EXPECT_EQ(m.table_block().size, 3u * 5);
  EXPECT_FALSE(m.deform_block().present());

  AblationFlags b;
  b.no_bottleneck_decomp = true;
  const Model d(small_config(b));
  EXPECT_FALSE(d.neck_block().present());
  EXPECT_FALSE(d.weight_block().present());
  EXPECT_TRUE(d.direct_block().present());

  AblationFlags both;
  both.no_bottleneck_decomp = true;
  both.no_divfree_basis = true;
  EXPECT_THROW(Model{small_config(both)}, Error);
}

TEST(ModelLayout, DefaultArchitecture) {
  const ModelConfig c;
  EXPECT_EQ(c.code_dim, 16);
  EXPECT_EQ(c.bottleneck, 16);
  EXPECT_EQ(c.encoding_degree, 8);
  const MLPSpec code = code_spec(c);
  EXPECT_EQ(code.layer_count(), 4);
  EXPECT_EQ(code.hidden, std::vector<int>(3, 128));
  EXPECT_EQ(code.output, 16);
  const MLPSpec neck = neck_spec(c);
  EXPECT_EQ(neck.hidden, (std::vector<int>{64, 64}));
  EXPECT_EQ(neck.output, 16);
  const MLPSpec w = weight_spec(c);
  EXPECT_EQ(w.layer_count(), 5);
  EXPECT_EQ(w.output, 96);
  EXPECT_EQ(w.skips, std::vector<int>{3});
  EXPECT_EQ(w.encoded_input_dim(), 17);
  const MLPSpec d = deform_spec(c);
  EXPECT_EQ(d.layer_count(), 6);
  EXPECT_EQ(d.output, 10);
  EXPECT_EQ(d.encoded_input_dim(), 51 + 17 + 16);
}

TEST(Initialization, StartsAtIdentityMotion) {
  Model m(small_config());
  m.initialize(5);
  const Matrix p = random_points(6, 1);
  const auto idx = iota_indices(6);
  const Matrix z = physics_codes(m, p, idx);
  const Matrix h = bottleneck(m, z);
  EXPECT_EQ(velocity_batch(m, z, h, p, 0.4).cwiseAbs().maxCoeff(), 0.0);
  const DeformationDelta d = f_deform(m, p.col(0), 0.3, std::vector<double>(z.col(0).data(), z.col(0).data() + 5));
  EXPECT_EQ(d.dp, Vec3::Zero());
  EXPECT_EQ(d.dr, UnitQuaternion::identity());
  EXPECT_EQ(d.ds, Vec3::Ones());
}

TEST(Initialization, CodeTableRange) {
  AblationFlags a;
  a.learnable_code = true;
  Model m(small_config(a));
  m.initialize(3);
  const double bound = std::sqrt(6.0 / (1 + 5));
  for (double v : m.block(m.table_block())) EXPECT_LE(std::abs(v), bound);
}

TEST(Initialization, DeterministicPerSeed) {
  Model a(small_config()), b(small_config());
  a.initialize(9);
  b.initialize(9);
  EXPECT_EQ(a.params(), b.params());
  b.initialize(10);
  EXPECT_NE(a.params(), b.params());
}

TEST(Bottleneck, ComponentsAreHTimesWeights) {
  const Model m = random_model(small_config(), 1);
  const Matrix p = random_points(1, 2);
  const auto z = f_code(m, p.col(0));
  const auto h = f_neck(m, z);
  const Matrix W = weight_matrix(m, 0.6);  // K x 6
  ASSERT_EQ(W.rows(), 4);
  ASSERT_EQ(W.cols(), 6);
  const VelocityComponents v = velocity_components(m, z, 0.6);
  for (int j = 0; j < 6; ++j) {
    double s = 0.0;
    for (int k = 0; k < 4; ++k) s += h[static_cast<std::size_t>(k)] * W(k, j);
    EXPECT_NEAR(v[static_cast<std::size_t>(j)], s, 1e-13);
  }
}

TEST(Bottleneck, WeightReshapeIsRowMajor) {
  const Model m = random_model(small_config(), 2);
  Matrix in(1, 1);
  in(0, 0) = 0.25;
  const Matrix flat = mlp_forward(m.weight_net(), m.block(m.weight_block()), in);
  const Matrix W = weight_matrix(m, 0.25);
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < 6; ++j) EXPECT_EQ(W(k, j), flat(k * 6 + j, 0));
}

TEST(Bottleneck, ZeroHGivesZeroVelocity) {
  const Model m = random_model(small_config(), 3);
  const Matrix z = Matrix::Zero(5, 2), h = Matrix::Zero(4, 2);
  EXPECT_EQ(velocity_batch(m, z, h, random_points(2, 4), 0.5).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Divergence, LearnedFieldIsDivergenceFree) {
  for (bool nodecomp : {false, true}) {
    AblationFlags a;
    a.no_bottleneck_decomp = nodecomp;
    const Model m = random_model(small_config(a), 4);
    const Matrix p0 = random_points(20, 5);
    const auto idx = iota_indices(20);
    const Matrix z = physics_codes(m, p0, idx);
    const Matrix h = bottleneck(m, z);
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> ut(0.0, 1.3);
    for (Eigen::Index i = 0; i < 20; ++i) {
      const double t = ut(rng);
      const Vec3 probe = random_points(1, 100 + i, 2.0).col(0);
      auto field = [&](const Vec3& q) -> Vec3 {
        return velocity_batch(m, z.col(i), h.col(i), Matrix(q), t).col(0);
      };
      EXPECT_LE(std::abs(numeric_divergence(field, probe)), 1e-8);
      const auto J = velocity_jacobians(m, z.col(i), h.col(i), Matrix(probe), t);
      EXPECT_EQ(J[0].trace(), 0.0);
    }
  }
}

TEST(Divergence, UnconstrainedAblationIsNot) {
  AblationFlags a;
  a.no_divfree_basis = true;
  const Model m = random_model(small_config(a), 7);
  const Matrix p0 = random_points(10, 8);
  const auto idx = iota_indices(10);
  const Matrix z = physics_codes(m, p0, idx);
  const Matrix h = bottleneck(m, z);
  int nonzero = 0;
  for (Eigen::Index i = 0; i < 10; ++i) {
    auto field = [&](const Vec3& q) -> Vec3 { return velocity_batch(m, z.col(i), h.col(i), Matrix(q), 0.3).col(0); };
    if (std::abs(numeric_divergence(field, p0.col(i))) > 1e-6) ++nonzero;
  }
  EXPECT_GE(nonzero, 1);
}

TEST(Ablation, ZeroParametersGiveZeroField) {
  for (int mode = 0; mode < 2; ++mode) {
    AblationFlags a;
    (mode == 0 ? a.no_divfree_basis : a.no_bottleneck_decomp) = true;
    Model m(small_config(a));  // all-zero parameters
    const Matrix p = random_points(4, 9);
    const auto idx = iota_indices(4);
    const Matrix z = physics_codes(m, p, idx);
    const Matrix h = bottleneck(m, z);
    EXPECT_EQ(velocity_batch(m, z, h, p, 0.2).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Ablation, MotionReshapeIsRowMajor) {
  AblationFlags a;
  a.no_divfree_basis = true;
  const Model m = random_model(small_config(a), 10);
  const Matrix p = random_points(1, 11);
  const Matrix z = physics_codes(m, p, iota_indices(1));
  const Matrix h = bottleneck(m, z);
  Matrix in(4, 1);
  in << p(0, 0), p(1, 0), p(2, 0), 0.7;
  const Matrix flat = mlp_forward(m.motion_net(), m.block(m.motion_block()), in);
  Vec3 expected = Vec3::Zero();
  for (int k = 0; k < 4; ++k)
    for (int ax = 0; ax < 3; ++ax) expected[ax] += h(k, 0) * flat(k * 3 + ax, 0);
  EXPECT_LT((velocity_batch(m, z, h, p, 0.7).col(0) - expected).norm(), 1e-13);
}

TEST(Ablation, DirectComponentsMatchForwardOracle) {
  AblationFlags a;
  a.no_bottleneck_decomp = true;
  const Model m = random_model(small_config(a), 12);
  const std::vector<double> z = {0.1, -0.4, 0.3, 0.9, -1.2};
  Matrix in(6, 1);
  in << 0.1, -0.4, 0.3, 0.9, -1.2, 0.55;
  const Matrix out = mlp_forward(m.direct_net(), m.block(m.direct_block()), in);
  const VelocityComponents v = velocity_components(m, z, 0.55);
  for (int j = 0; j < 6; ++j) EXPECT_EQ(v[static_cast<std::size_t>(j)], out(j, 0));
}

class VelocityGradient : public ::testing::TestWithParam<int> {};

TEST_P(VelocityGradient, MatchesFiniteDifferences) {
  AblationFlags a;
  switch (GetParam()) {
    case 1: a.learnable_code = true; break;
    case 2: a.no_divfree_basis = true; break;
    case 3: a.no_bottleneck_decomp = true; break;
    default: break;
  }
  Model m = random_model(small_config(a), 20 + GetParam());
  const Matrix p0 = random_points(3, 21);
  Matrix q = random_points(3, 22);
  const Matrix up = random_points(3, 23);
  const double t = 0.37;
  const ObjectiveGrad g = velocity_objective_grad(m, p0, q, t, up);
  auto f = [&] { return velocity_objective(m, p0, q, t, up); };
  EXPECT_LT(gradcheck::check(f, m.params(), g.params, 100, 24).max_rel, 1e-4);
  EXPECT_LT(gradcheck::check(f, q, g.dq, 9, 25).max_rel, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Modes, VelocityGradient, ::testing::Values(0, 1, 2, 3));

TEST(DeformGradient, MatchesFiniteDifferences) {
  for (bool no_code : {false, true}) {
    AblationFlags a;
    a.no_code_in_deform = no_code;
    Model m = random_model(small_config(a), 30);
    const Matrix p0 = random_points(3, 31);
    Matrix zin = random_points(5, 32).reshaped(5, 3);  // L x N codes
    const double ts[] = {0.2, 0.8};
    const Matrix up = random_points(10, 33).reshaped(10, 3).replicate(1, 2);
    auto f = [&] { return deform_raw(m, deform_input(m, p0, ts, zin)).cwiseProduct(up).sum(); };
    MLPCache cache;
    deform_raw(m, deform_input(m, p0, ts, zin), &cache);
    Vector g = Vector::Zero(m.params().size());
    const Matrix d_in = deform_raw_backward(m, cache, up, g);
    EXPECT_LT(gradcheck::check(f, m.params(), g, 100, 34).max_rel, 1e-4);
    if (!no_code) {
      Matrix dz = Matrix::Zero(5, 3);
      for (int b = 0; b < 2; ++b) dz += d_in.block(4, b * 3, 5, 3);
      EXPECT_LT(gradcheck::check(f, zin, dz, 15, 35).max_rel, 1e-4);
    }
  }
}

TEST(Deformation, RawMapping) {
  const double raw[10] = {0.1, 0.2, 0.3, 0, 0, 0, 0, 0, 0, 0};
  const DeformationDelta d = deformation_from_raw(raw, false);
  EXPECT_EQ(d.dp, Vec3(0.1, 0.2, 0.3));
  EXPECT_EQ(d.dr, UnitQuaternion::identity());
  EXPECT_EQ(d.ds, Vec3::Ones());
  const double raw2[10] = {0, 0, 0, -1, 0, 0, 1, 0.5, 0, 0};
  const DeformationDelta e = deformation_from_raw(raw2, false);
  EXPECT_LT(e.dr.orientation_distance(UnitQuaternion::from_raw(0, 0, 0, 1)), 1e-15);
  EXPECT_NEAR(e.ds.x(), std::exp(0.5), 1e-15);
  EXPECT_EQ(deformation_from_raw(raw2, true).ds, Vec3::Ones());
}

TEST(Normalization, RoundTrip) {
  Normalization n{Vec3(1, -2, 3), 2.5};
  const Matrix p = random_points(5, 50);
  EXPECT_LT((n.to_world(n.to_model(p)) - p).norm(), 1e-14);
  EXPECT_LT((n.to_model(Vec3(1, -2, 3))).norm(), 1e-15);
}

TEST(AblationNames, AllFlagsAddressable) {
  AblationFlags f;
  for (const char* name : kAblationNames) {
    bool* b = ablation_flag(f, name);
    ASSERT_NE(b, nullptr) << name;
    *b = true;
  }
  EXPECT_TRUE(f.learnable_code && f.no_divfree_basis && f.no_bottleneck_decomp && f.no_deform_field &&
              f.no_code_in_deform && f.no_scale_deform);
  EXPECT_EQ(ablation_flag(f, "no_such_flag"), nullptr);
}
