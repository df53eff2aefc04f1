#include "voxfuse/ops.hpp"
#include "voxfuse/unprojection.hpp"
#include "test_support.hpp"

#include <Eigen/Geometry>
#include <gtest/gtest.h>

namespace vf {
namespace {

// Direct 3x3 convolution with zero padding 1. x: [C, H, W], w: [O, C, 3, 3].
Tensor conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, Index stride) {
  const Index c = x.dim(0), h = x.dim(1), wd = x.dim(2), o = w.dim(0);
  const Index oh = (h + 2 - 3) / stride + 1, ow = (wd + 2 - 3) / stride + 1;
  Tensor out({o, oh, ow});
  for (Index k = 0; k < o; ++k)
    for (Index y = 0; y < oh; ++y)
      for (Index xo = 0; xo < ow; ++xo) {
        double acc = b[k];
        for (Index ci = 0; ci < c; ++ci)
          for (Index dy = 0; dy < 3; ++dy)
            for (Index dx = 0; dx < 3; ++dx) {
              const Index iy = y * stride + dy - 1, ix = xo * stride + dx - 1;
              if (iy < 0 || ix < 0 || iy >= h || ix >= wd) continue;
              acc += w[((k * c + ci) * 3 + dy) * 3 + dx] * x[(ci * h + iy) * wd + ix];
            }
        out[(k * oh + y) * ow + xo] = acc;
      }
  return out;
}

double bilinear_oracle(const Tensor& map, Index ch, double x, double y) {
  const Index h = map.dim(1), w = map.dim(2);
  double acc = 0.0;
  for (Index r = 0; r < h; ++r)
    for (Index c = 0; c < w; ++c)
      acc += std::max(0.0, 1.0 - std::abs(x - c)) * std::max(0.0, 1.0 - std::abs(y - r)) * map[(ch * h + r) * w + c];
  return acc;
}

// Accumulator forward by hand: silu hidden layer, softplus weight, masked by visibility.
std::vector<double> accumulate_oracle(const Accumulator& acc, const std::vector<double>& f, const Eigen::Vector3d& dir,
                                      double visible) {
  const Index d = acc.channels, hdim = acc.hidden;
  const Tensor& w0 = acc.params.at("accumulator.l0.w");
  const Tensor& b0 = acc.params.at("accumulator.l0.b");
  const Tensor& w1 = acc.params.at("accumulator.l1.w");
  const Tensor& b1 = acc.params.at("accumulator.l1.b");
  std::vector<double> in(f);
  in.insert(in.end(), {dir.x(), dir.y(), dir.z()});
  std::vector<double> hid(static_cast<std::size_t>(hdim));
  for (Index j = 0; j < hdim; ++j) {
    double a = b0[j];
    for (Index i = 0; i < d + 3; ++i) a += in[static_cast<std::size_t>(i)] * w0[i * hdim + j];
    hid[static_cast<std::size_t>(j)] = test::silu(a);
  }
  std::vector<double> out(static_cast<std::size_t>(d + 1));
  for (Index k = 0; k <= d; ++k) {
    double a = b1[k];
    for (Index j = 0; j < hdim; ++j) a += hid[static_cast<std::size_t>(j)] * w1[j * (d + 1) + k];
    out[static_cast<std::size_t>(k)] = a;
  }
  const double sigma = test::softplus(out[0]) * visible;
  std::vector<double> term(static_cast<std::size_t>(d));
  for (Index k = 0; k < d; ++k) term[static_cast<std::size_t>(k)] = sigma * out[static_cast<std::size_t>(k + 1)];
  return term;
}

TEST(Layout, ChwRoundTrip) {
  Rng rng(1);
  const Tensor img = uniform({4, 5, 3}, rng, 0, 1);
  const Tensor chw = to_chw(img);
  EXPECT_EQ(chw.shape(), (Shape{3, 4, 5}));
  EXPECT_EQ(chw[(2 * 4 + 1) * 5 + 3], img[(1 * 5 + 3) * 3 + 2]);
  EXPECT_EQ(to_hwc(chw), img);
}

TEST(PosedImage, ValidatesAndRecordsDirection) {
  const Camera cam = camera_ring({4, 4.0, 0.0, 0.0, 0.6}, 64, 64)[0];
  const PosedImage p = make_posed_image(Tensor({8, 8, 3}, 0.5), cam);
  EXPECT_EQ(p.camera.height, 8);
  EXPECT_LT((p.view_direction - Eigen::Vector3d(0, 0, -1)).norm(), 1e-12);
  EXPECT_THROW(make_posed_image(Tensor({8, 8, 4}), cam), ShapeError);
  EXPECT_THROW(make_posed_image(Tensor({2, 2, 3}, std::nan("")), cam), NumericalError);
}

TEST(Encoder, ZeroImageZeroWeightsGiveZeroFeatures) {
  Rng rng(2);
  Encoder2D enc = make_encoder(4, 5, rng);
  for (auto& [n, t] : enc.params) t.array() = 0.0;
  const std::vector<Tensor> maps = encode_frames(enc, std::vector<Tensor>{Tensor({8, 8, 3})});
  EXPECT_EQ(maps[0].shape(), (Shape{5, 4, 4}));
  for (Index i = 0; i < maps[0].size(); ++i) EXPECT_EQ(maps[0][i], 0.0);
}

TEST(Encoder, IdenticalImagesIdenticalMaps) {
  Rng rng(3);
  const Encoder2D enc = make_encoder(4, 5, rng);
  const Tensor img = uniform({8, 8, 3}, rng, 0, 1);
  const std::vector<Tensor> maps = encode_frames(enc, std::vector<Tensor>{img, img});
  EXPECT_EQ(maps[0], maps[1]);
}

TEST(Encoder, MatchesHandRolledConvolutions) {
  Rng rng(4);
  Encoder2D enc = make_encoder(3, 2, rng);
  for (auto& [n, t] : enc.params)
    if (n.ends_with(".b")) t = uniform(t.shape(), rng, -0.2, 0.2);
  const Tensor img = uniform({8, 8, 3}, rng, 0, 1);
  Tensor h = to_chw(img);
  for (int l = 0; l < 3; ++l) {
    const std::string base = "encoder.conv" + std::to_string(l);
    h = conv_oracle(h, enc.params.at(base + ".w"), enc.params.at(base + ".b"), l == 0 ? 2 : 1);
    if (l < 2)
      for (double& v : h.values()) v = test::silu(v);
  }
  test::expect_near(encode_frames(enc, std::vector<Tensor>{img})[0], h, 1e-13);
}

TEST(Bilinear, PixelCentreAndMidpoint) {
  Rng rng(5);
  const Tensor map = uniform({2, 4, 5}, rng, -1, 1);
  const Tensor out = bilinear_sample(map, Tensor({2, 2}, {3.0, 2.0, 1.5, 0.0}));
  for (Index c = 0; c < 2; ++c) {
    EXPECT_EQ(out[c], map[(c * 4 + 2) * 5 + 3]);
    EXPECT_NEAR(out[2 + c], 0.5 * (map[(c * 4 + 0) * 5 + 1] + map[(c * 4 + 0) * 5 + 2]), 1e-15);
  }
}

TEST(Bilinear, RandomPointsMatchCornerOracle) {
  Rng rng(6);
  const Tensor map = uniform({3, 6, 7}, rng, -1, 1);
  Tensor pts({100, 2});
  for (Index i = 0; i < 100; ++i) {
    pts[2 * i] = std::uniform_real_distribution<double>(0.0, 6.0)(rng);
    pts[2 * i + 1] = std::uniform_real_distribution<double>(0.0, 5.0)(rng);
  }
  const Tensor out = bilinear_sample(map, pts);
  for (Index i = 0; i < 100; ++i)
    for (Index c = 0; c < 3; ++c) EXPECT_NEAR(out[i * 3 + c], bilinear_oracle(map, c, pts[2 * i], pts[2 * i + 1]), 1e-12);
}

TEST(Bilinear, OutsideReadsZeroAndGradientsMatch) {
  Rng rng(7);
  const Tensor map = uniform({2, 4, 4}, rng, -1, 1);
  const Tensor out = bilinear_sample(map, Tensor({2, 2}, {-0.2, 1.0, 1.0, 3.5}));
  for (Index i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], 0.0);

  Graph g;
  Var m = g.parameter("map", map);
  Var p = g.parameter("pts", Tensor({3, 2}, {0.3, 1.2, 2.6, 0.4, 1.7, 2.2}));
  Var y = sum(bilinear_gather(m, p) * g.constant(randn({3, 2}, rng)));
  EXPECT_LE(grad_check(g, y, {}).max_relative_error, 1e-6);
}

class UnprojectFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng(8);
    spec.resolution = 4;
    spec.channels = 3;
    acc = make_accumulator(3, 6, rng);
    for (auto& [n, t] : acc.params)
      if (n.ends_with(".b")) t = uniform(t.shape(), rng, -0.3, 0.3);
    cams = camera_ring({2, 4.0, 0.2, 0.4, 0.8}, 10, 10);
    for (int j = 0; j < 2; ++j) maps.push_back(uniform({3, 5, 5}, rng, -1, 1));
  }

  Tensor oracle(std::span<const int> frames) const {
    Tensor out(spec.feature_shape());
    for (int j : frames) {
      const Tensor& map = maps[static_cast<std::size_t>(j)];
      const Camera& cam = cams[static_cast<std::size_t>(j)];
      const Eigen::Vector3d centre = *camera_center(cam);
      for (Index z = 0; z < 4; ++z)
        for (Index y = 0; y < 4; ++y)
          for (Index x = 0; x < 4; ++x) {
            const Eigen::Vector3d v = spec.vertex_position(x, y, z);
            const Eigen::Vector4d clip = cam.projection * v.homogeneous();
            const double px = (clip.x() / clip.w() + 1.0) / 2.0 * 5.0 - 0.5;
            const double py = (1.0 - clip.y() / clip.w()) / 2.0 * 5.0 - 0.5;
            const bool inside = clip.w() > 0 && px >= 0 && py >= 0 && px <= 4 && py <= 4;
            std::vector<double> f(3);
            for (Index c = 0; c < 3; ++c) f[static_cast<std::size_t>(c)] = inside ? bilinear_oracle(map, c, px, py) : 0.0;
            const std::vector<double> t = accumulate_oracle(acc, f, (v - centre).normalized(), inside ? 1.0 : 0.0);
            for (Index c = 0; c < 3; ++c) out[((c * 4 + z) * 4 + y) * 4 + x] += t[static_cast<std::size_t>(c)];
          }
    }
    return out;
  }

  GridSpec spec;
  Accumulator acc;
  std::vector<Camera> cams;
  std::vector<Tensor> maps;
};

TEST_F(UnprojectFixture, EmptyFrameSetGivesZeroVolume) {
  const VoxelGrid v = unproject(std::span<const Tensor>{}, std::span<const Camera>{}, spec, acc);
  EXPECT_EQ(v.features, Tensor(spec.feature_shape()));
}

TEST_F(UnprojectFixture, SingleFrameMatchesOracle) {
  const int frames[] = {0};
  const VoxelGrid v = unproject(std::span(maps).first(1), std::span(cams).first(1), spec, acc);
  test::expect_near(v.features, oracle(frames), 1e-12);
}

TEST_F(UnprojectFixture, UnitWeightReadsBilinearFeature) {
  // Zero the weight logit's inputs and set its bias to log(e - 1) so softplus gives exactly 1.
  Accumulator a = acc;
  Tensor& w1 = a.params.at("accumulator.l1.w");
  for (Index j = 0; j < a.hidden; ++j) w1[j * 4] = 0.0;
  a.params.at("accumulator.l1.b")[0] = std::log(std::exp(1.0) - 1.0);
  const VoxelGrid v = unproject(std::span(maps).first(1), std::span(cams).first(1), spec, a);
  const VertexProjection proj = project_vertices(spec, cams[0], 5, 5);
  for (Index p = 0; p < spec.vertex_count(); ++p) {
    if (proj.visible[p] == 0.0) {
      for (Index c = 0; c < 3; ++c) EXPECT_EQ(v.features[c * 64 + p], 0.0);
      continue;
    }
    // With unit weight the vertex holds f' evaluated on the bilinear sample at its projection.
    std::vector<double> f(3);
    for (Index c = 0; c < 3; ++c) f[static_cast<std::size_t>(c)] = bilinear_oracle(maps[0], c, proj.pixels[2 * p], proj.pixels[2 * p + 1]);
    Eigen::Vector3d dir(proj.directions[3 * p], proj.directions[3 * p + 1], proj.directions[3 * p + 2]);
    const std::vector<double> t = accumulate_oracle(a, f, dir, 1.0);
    for (Index c = 0; c < 3; ++c) EXPECT_NEAR(v.features[c * 64 + p], t[static_cast<std::size_t>(c)], 1e-12);
  }
}

TEST_F(UnprojectFixture, TwoFramesSumAndCommute) {
  const int frames[] = {0, 1};
  const VoxelGrid v = unproject(maps, cams, spec, acc);
  test::expect_near(v.features, oracle(frames), 1e-12);
  const std::vector<Tensor> rmaps{maps[1], maps[0]};
  const std::vector<Camera> rcams{cams[1], cams[0]};
  test::expect_near(unproject(rmaps, rcams, spec, acc).features, v.features, 1e-13);
}

TEST_F(UnprojectFixture, CountMismatchThrows) {
  EXPECT_THROW(unproject(std::span(maps).first(2), std::span(cams).first(1), spec, acc), std::invalid_argument);
}

TEST_F(UnprojectFixture, GradientsThroughMapsAndAccumulator) {
  Graph g;
  std::vector<Var> vars{g.parameter("map0", maps[0]), g.parameter("map1", maps[1])};
  Var v = unproject(g, vars, cams, spec, acc);
  Rng rng(9);
  Var y = sum(v * g.constant(randn(spec.feature_shape(), rng)));
  EXPECT_LE(grad_check(g, y, {}).max_relative_error, 1e-5);
}

TEST(ProjectVertices, OriginLandsAtMapCentreAndBehindIsInvisible) {
  GridSpec spec;
  spec.resolution = 3;
  spec.channels = 2;
  const Camera cam = look_at_camera({0, 0, 4}, {0, 0, 0}, 0.8, 16, 16);
  const VertexProjection p = project_vertices(spec, cam, 9, 9);
  const Index centre = (1 * 3 + 1) * 3 + 1;
  EXPECT_NEAR(p.pixels[2 * centre], 4.0, 1e-12);
  EXPECT_NEAR(p.pixels[2 * centre + 1], 4.0, 1e-12);
  EXPECT_EQ(p.visible[centre], 1.0);

  const Camera inside = look_at_camera({0, 0, 0.5}, {0, 0, 0}, 0.8, 16, 16);
  const VertexProjection q = project_vertices(spec, inside, 9, 9);
  const Index behind = (2 * 3 + 1) * 3 + 1;  // z = +1 lies behind a camera at z = 0.5 looking down -z
  EXPECT_EQ(q.visible[behind], 0.0);
}

}  // namespace
}  // namespace vf
