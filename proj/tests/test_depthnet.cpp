#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "handdagt/depthnet.hpp"

using namespace hdagt;

TEST_CASE("encoder output is H/2 x W/2 x d_2d and finite on background") {
  RandomStream rng(1);
  DepthEncoder<float> enc;
  enc.init("enc", 128, 128, 64, 16, 32, 64, rng);

  Tape<float> t;
  std::vector<float> img(128 * 128, 1.0f);  // all background sentinel
  auto fm = enc(t.constant({128, 128, 1}, img));
  CHECK(fm.shape() == Shape{64, 64, 64});
  for (float v : fm.value()) CHECK(std::isfinite(v));
}

TEST_CASE("encoder rejects mismatched input sizes") {
  RandomStream rng(2);
  DepthEncoder<float> enc;
  enc.init("enc", 32, 32, 8, 4, 8, 8, rng);
  Tape<float> t;
  CHECK_THROWS_AS(enc(t.constant({16, 16, 1}, std::vector<float>(256, 0.f))),
                  DimensionError);
}

TEST_CASE("encoder is deterministic") {
  RandomStream rng(3);
  DepthEncoder<float> enc;
  enc.init("enc", 32, 32, 8, 4, 8, 8, rng);
  std::vector<float> img(32 * 32);
  RandomStream pix(4);
  for (auto& v : img) v = static_cast<float>(pix.uniform(-1, 1));

  auto run = [&]() {
    Tape<float> t;
    return enc(t.constant({32, 32, 1}, img)).value();
  };
  auto a = run();
  auto b = run();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

TEST_CASE("miniature encoder gradients match finite differences") {
  RandomStream rng(5);
  DepthEncoder<double> enc;
  enc.init("enc", 16, 16, 4, 3, 4, 4, rng);
  std::vector<double> img(16 * 16);
  for (auto& v : img) v = rng.uniform(-1, 1);

  ParamList<double> params;
  enc.collect(params);
  auto f = [&](Tape<double>& t) {
    auto fm = enc(t.constant({16, 16, 1}, img));
    return reduce_sum_all(mul(fm, fm));
  };
  auto r = gradcheck<double>(f, params, 1e-5, 1e-4);
  CHECK_MESSAGE(r.pass, r.worst, " rel err ", r.max_rel_err);
}

TEST_CASE("im2col against a hand conv on a tiny image") {
  // 2x2 image, one channel, 3x3 kernel, pad 1: summing each row of the
  // unfold equals convolving with an all-ones kernel
  Tape<double> t;
  auto x = t.constant({2, 2, 1}, {1, 2, 3, 4});
  auto col = im2col(x, 3, 1, 1);
  CHECK(col.shape() == Shape{4, 9});
  for (int r = 0; r < 4; ++r) {
    double s = 0;
    for (int c = 0; c < 9; ++c) s += col.value()[r * 9 + c];
    CHECK(s == doctest::Approx(10));  // 1+2+3+4 visible from every pixel
  }
}

TEST_CASE("projection hits the principal point at half resolution") {
  CameraIntrinsics cam;  // cx = cy = 63.5 for a 128 image
  CropTransform crop;
  std::vector<double> p = {0.0, 0.0, 0.0};  // crop center, on the optical axis
  auto coords = project_to_feature_map(p, 1, crop, cam, 128, 128, 64, 64);
  REQUIRE(coords[0].in_bounds);
  CHECK(coords[0].x == doctest::Approx(63.5 / 2).epsilon(1e-9));
  CHECK(coords[0].y == doctest::Approx(63.5 / 2).epsilon(1e-9));
}

TEST_CASE("out-of-bounds and behind-camera points sample zeros") {
  CameraIntrinsics cam;
  CropTransform crop;
  std::vector<double> pts = {
      50.0, 0.0, 0.0,   // projects far outside the image
      0.0,  0.0, -30.0  // behind the camera after the crop transform
  };
  auto coords = project_to_feature_map(pts, 2, crop, cam, 128, 128, 64, 64);
  CHECK_FALSE(coords[0].in_bounds);
  CHECK_FALSE(coords[1].in_bounds);

  Tape<double> t;
  std::vector<double> fmv(64 * 64 * 3, 7.5);
  auto fm = t.constant({64, 64, 3}, fmv);
  auto sampled = bilinear_sample(fm, coords);
  for (double v : sampled.value()) CHECK(v == 0.0);
}

TEST_CASE("bilinear sampling reproduces constants and grid nodes") {
  RandomStream rng(6);
  const int h = 8, w = 8, c = 2;
  std::vector<double> fmv(h * w * c);
  for (auto& v : fmv) v = rng.uniform(-2, 2);

  Tape<double> t;
  auto fm = t.constant({h, w, c}, fmv);

  // exact grid nodes return node values
  std::vector<SampleCoord> nodes;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) nodes.push_back({double(x), double(y), true});
  }
  auto at_nodes = bilinear_sample(fm, nodes);
  for (int i = 0; i < h * w; ++i) {
    for (int a = 0; a < c; ++a) {
      CHECK(at_nodes.value()[i * c + a] ==
            doctest::Approx(fmv[i * c + a]).epsilon(1e-6));
    }
  }

  // a constant map interpolates to exactly that constant anywhere in bounds
  std::vector<double> constv(h * w * c, 3.25);
  auto cfm = t.constant({h, w, c}, constv);
  std::vector<SampleCoord> scattered;
  for (int i = 0; i < 50; ++i) {
    scattered.push_back({rng.uniform(0, w - 1), rng.uniform(0, h - 1), true});
  }
  auto sampled = bilinear_sample(cfm, scattered);
  for (double v : sampled.value()) CHECK(v == doctest::Approx(3.25));
}

TEST_CASE("bilinear sampling gradient reaches the feature map") {
  RandomStream rng(7);
  const int h = 6, w = 5, c = 3;
  Param<double> fm;
  fm.init("fm", {h, w, c});
  for (auto& v : fm.value) v = rng.uniform(-1, 1);

  std::vector<SampleCoord> coords;
  for (int i = 0; i < 9; ++i) {
    coords.push_back({rng.uniform(0, w - 1), rng.uniform(0, h - 1), true});
  }
  coords.push_back({0, 0, false});  // one dead sample

  ParamList<double> params{&fm};
  auto f = [&](Tape<double>& t) {
    auto s = bilinear_sample(t.leaf(fm), coords);
    return reduce_sum_all(mul(s, s));
  };
  auto r = gradcheck<double>(f, params, 1e-6, 1e-6);
  CHECK_MESSAGE(r.pass, r.worst, " rel err ", r.max_rel_err);
}

TEST_CASE("fusion concatenates and is recoverable by slicing") {
  Tape<double> t;
  auto f3d = t.constant({2, 3}, {1, 2, 3, 4, 5, 6});
  auto f2d = t.constant({2, 2}, {7, 8, 9, 10});
  auto fused = fuse_features(f3d, f2d);
  CHECK(fused.shape() == Shape{2, 5});

  auto back3d = slice(fused, 1, 0, 3);
  auto back2d = slice(fused, 1, 3, 2);
  CHECK(back3d.value() == f3d.value());
  CHECK(back2d.value() == f2d.value());

  // zero 2D features: first block equals the 3D features, second block zero
  auto zeros = t.constant({2, 2}, {0, 0, 0, 0});
  auto fused0 = fuse_features(f3d, zeros);
  for (int r = 0; r < 2; ++r) {
    for (int i = 0; i < 3; ++i) {
      CHECK(fused0.value()[r * 5 + i] == f3d.value()[r * 3 + i]);
    }
    for (int i = 3; i < 5; ++i) CHECK(fused0.value()[r * 5 + i] == 0.0);
  }

  auto bad = t.constant({3, 2}, std::vector<double>(6, 0.0));
  CHECK_THROWS_AS(fuse_features(f3d, bad), DimensionError);
}

TEST_CASE("fused width is d_3d + d_2d") {
  Tape<float> t;
  auto a = t.constant({4, 64}, std::vector<float>(256, 1.f));
  auto b = t.constant({4, 64}, std::vector<float>(256, 2.f));
  CHECK(fuse_features(a, b).shape() == Shape{4, 128});
}
