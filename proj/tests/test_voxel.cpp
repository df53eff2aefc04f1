#include "voxfuse/voxel_grid.hpp"
#include "voxfuse/ops.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

namespace vf {
namespace {

VoxelGrid random_grid(Index s, Index d, Rng& rng) {
  GridSpec spec;
  spec.resolution = s;
  spec.channels = d;
  return VoxelGrid{spec, uniform(spec.feature_shape(), rng, -1.0, 1.0)};
}

double feature(const VoxelGrid& g, Index c, Index x, Index y, Index z) {
  const Index s = g.spec.resolution;
  return g.features[((c * s + z) * s + y) * s + x];
}

// Brute force over all eight corners with explicit hat weights.
double corner_oracle(const VoxelGrid& g, Index c, const Eigen::Vector3d& p) {
  const Index s = g.spec.resolution;
  const Eigen::Vector3d u = (p - g.spec.extent.min).cwiseQuotient(g.spec.extent.size()) * static_cast<double>(s - 1);
  double acc = 0.0;
  for (Index z = 0; z < s; ++z)
    for (Index y = 0; y < s; ++y)
      for (Index x = 0; x < s; ++x) {
        const double w = std::max(0.0, 1.0 - std::abs(u.x() - x)) * std::max(0.0, 1.0 - std::abs(u.y() - y)) *
                         std::max(0.0, 1.0 - std::abs(u.z() - z));
        acc += w * feature(g, c, x, y, z);
      }
  return acc;
}

TEST(GridSpec, BoundaryInclusiveVertices) {
  GridSpec spec;
  spec.resolution = 5;
  EXPECT_TRUE(spec.vertex_position(0, 0, 0).isApprox(Eigen::Vector3d(-1, -1, -1)));
  EXPECT_TRUE(spec.vertex_position(4, 4, 4).isApprox(Eigen::Vector3d(1, 1, 1)));
  EXPECT_TRUE(spec.vertex_position(2, 1, 3).isApprox(Eigen::Vector3d(0, -0.5, 0.5)));
  const Tensor pos = spec.vertex_positions();
  ASSERT_EQ(pos.shape(), (Shape{125, 3}));
  // Row (z, y, x) = (3, 1, 2).
  const Index row = (3 * 5 + 1) * 5 + 2;
  EXPECT_DOUBLE_EQ(pos[row * 3 + 0], 0.0);
  EXPECT_DOUBLE_EQ(pos[row * 3 + 1], -0.5);
  EXPECT_DOUBLE_EQ(pos[row * 3 + 2], 0.5);
}

TEST(GridSpec, Validation) {
  GridSpec spec;
  spec.resolution = 1;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  spec.resolution = 4;
  spec.extent.max.x() = -2.0;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
}

TEST(Trilinear, VertexReturnsItsFeature) {
  Rng rng(1);
  const VoxelGrid g = random_grid(4, 3, rng);
  const Eigen::Vector3d p = g.spec.vertex_position(1, 2, 3);
  const Tensor out = trilinear_sample(g, Tensor({1, 3}, {p.x(), p.y(), p.z()}));
  for (Index c = 0; c < 3; ++c) EXPECT_NEAR(out[c], feature(g, c, 1, 2, 3), 1e-15);
}

TEST(Trilinear, EdgeMidpointIsMean) {
  Rng rng(2);
  const VoxelGrid g = random_grid(4, 2, rng);
  const Eigen::Vector3d p = 0.5 * (g.spec.vertex_position(1, 2, 0) + g.spec.vertex_position(2, 2, 0));
  const Tensor out = trilinear_sample(g, Tensor({1, 3}, {p.x(), p.y(), p.z()}));
  for (Index c = 0; c < 2; ++c) EXPECT_NEAR(out[c], 0.5 * (feature(g, c, 1, 2, 0) + feature(g, c, 2, 2, 0)), 1e-15);
}

TEST(Trilinear, RandomPointsMatchCornerOracle) {
  Rng rng(3);
  const VoxelGrid g = random_grid(4, 2, rng);
  const Tensor pts = uniform({50, 3}, rng, -1.0, 1.0);
  const Tensor out = trilinear_sample(g, pts);
  for (Index i = 0; i < 50; ++i) {
    const Eigen::Vector3d p(pts[i * 3], pts[i * 3 + 1], pts[i * 3 + 2]);
    for (Index c = 0; c < 2; ++c) EXPECT_NEAR(out[i * 2 + c], corner_oracle(g, c, p), 1e-12);
  }
}

TEST(Trilinear, OutsideExtentReadsZero) {
  Rng rng(4);
  const VoxelGrid g = random_grid(4, 2, rng);
  const Tensor out = trilinear_sample(g, Tensor({2, 3}, {1.2, 0.0, 0.0, 0.0, -1.0001, 0.3}));
  for (Index i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], 0.0);
}

TEST(Trilinear, GradientsInGridAndPoints) {
  Rng rng(5);
  const VoxelGrid vg = random_grid(3, 2, rng);
  Graph g;
  Var grid = g.parameter("grid", vg.features);
  Var pts = g.parameter("pts", uniform({6, 3}, rng, -0.9, 0.9));
  Var y = sum(trilinear_gather(grid, pts, vg.spec.extent) * g.constant(randn({6, 2}, rng)));
  EXPECT_LE(grad_check(g, y, {}).max_relative_error, 1e-6);
}

TEST(Decoder, ZeroNetworkIsSymmetric) {
  Rng rng(6);
  FieldDecoder dec = make_decoder(4, {8}, rng);
  for (auto& [name, t] : dec.params) t.array() = 0.0;
  const DecodedField f = decode(dec, uniform({3, 4}, rng, -1, 1));
  for (Index i = 0; i < 3; ++i) {
    EXPECT_NEAR(f.density[i], std::log(2.0), 1e-15);
    for (Index c = 0; c < 3; ++c) EXPECT_EQ(f.color[i * 3 + c], 0.5);
  }
}

TEST(Decoder, ColorSaturatesBelowOne) {
  Rng rng(7);
  FieldDecoder dec = make_decoder(4, {8}, rng);
  dec.params.at(dec.bias_name(1)) = Tensor({4}, {0.0, 800.0, 800.0, 800.0});
  const DecodedField f = decode(dec, uniform({2, 4}, rng, -1, 1));
  for (Index i = 0; i < f.color.size(); ++i) {
    EXPECT_LE(f.color[i], 1.0);
    EXPECT_NEAR(f.color[i], 1.0, 1e-12);
  }
}

TEST(Decoder, MatchesHandRolledMlp) {
  Rng rng(8);
  const FieldDecoder dec = make_decoder(3, {5}, rng);
  const Tensor x = uniform({1, 3}, rng, -1, 1);
  const DecodedField f = decode(dec, x);
  const Tensor& w0 = dec.params.at(dec.weight_name(0));
  const Tensor& b0 = dec.params.at(dec.bias_name(0));
  const Tensor& w1 = dec.params.at(dec.weight_name(1));
  const Tensor& b1 = dec.params.at(dec.bias_name(1));
  double h[5];
  for (int j = 0; j < 5; ++j) {
    double a = b0[j];
    for (int i = 0; i < 3; ++i) a += x[i] * w0[i * 5 + j];
    h[j] = std::max(0.0, a);
  }
  double o[4];
  for (int k = 0; k < 4; ++k) {
    o[k] = b1[k];
    for (int j = 0; j < 5; ++j) o[k] += h[j] * w1[j * 4 + k];
  }
  EXPECT_NEAR(f.density[0], test::softplus(o[0]), 1e-14);
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(f.color[c], test::sigmoid(o[c + 1]), 1e-14);
}

TEST(Decoder, RangeProperty) {
  Rng rng(9);
  const FieldDecoder dec = make_decoder(4, {16}, rng);
  const DecodedField f = decode(dec, uniform({200, 4}, rng, -30, 30));
  for (Index i = 0; i < f.density.size(); ++i) EXPECT_GE(f.density[i], 0.0);
  for (Index i = 0; i < f.color.size(); ++i) {
    EXPECT_GE(f.color[i], 0.0);
    EXPECT_LE(f.color[i], 1.0);
  }
}

TEST(Upsample, ConstantStaysConstant) {
  GridSpec spec;
  spec.resolution = 3;
  spec.channels = 2;
  VoxelGrid g{spec, Tensor(spec.feature_shape(), 0.7)};
  const VoxelGrid up = upsample_grid(g, 9);
  EXPECT_EQ(up.spec.resolution, 9);
  for (Index i = 0; i < up.features.size(); ++i) EXPECT_NEAR(up.features[i], 0.7, 1e-15);
}

TEST(Upsample, LinearMidplane) {
  GridSpec spec;
  spec.resolution = 2;
  spec.channels = 1;
  VoxelGrid g = VoxelGrid::zeros(spec);
  for (Index z = 0; z < 2; ++z)
    for (Index y = 0; y < 2; ++y) g.features[(z * 2 + y) * 2 + 1] = 1.0;  // x = 1 plane
  const VoxelGrid up = upsample_grid(g, 3);
  for (Index z = 0; z < 3; ++z)
    for (Index y = 0; y < 3; ++y) EXPECT_NEAR(up.features[(z * 3 + y) * 3 + 1], 0.5, 1e-15);
}

TEST(Upsample, NestedLatticeReproducesInput) {
  // With boundary-inclusive vertices a lattice of S' = k (S - 1) + 1 contains every coarse vertex.
  Rng rng(10);
  const VoxelGrid g = random_grid(4, 3, rng);
  for (Index s2 : {7, 10}) {
    const VoxelGrid up = upsample_grid(g, s2);
    const Index k = (s2 - 1) / 3;
    for (Index z = 0; z < 4; ++z)
      for (Index y = 0; y < 4; ++y)
        for (Index x = 0; x < 4; ++x)
          for (Index c = 0; c < 3; ++c) EXPECT_NEAR(feature(up, c, k * x, k * y, k * z), feature(g, c, x, y, z), 1e-14);
  }
}

TEST(Upsample, SampledAtCoarseVerticesIsIdentical) {
  Rng rng(11);
  const VoxelGrid g = random_grid(4, 2, rng);
  const VoxelGrid up = upsample_grid(g, 7);
  std::uniform_int_distribution<Index> pick(0, 3);
  Tensor pts({100, 3});
  for (Index i = 0; i < 100; ++i) {
    const Eigen::Vector3d p = g.spec.vertex_position(pick(rng), pick(rng), pick(rng));
    for (int a = 0; a < 3; ++a) pts[i * 3 + a] = p[a];
  }
  const Tensor a = trilinear_sample(g, pts), b = trilinear_sample(up, pts);
  for (Index i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

}  // namespace
}  // namespace vf
