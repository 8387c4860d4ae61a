/*
 * Copyright 2026 The GPF Authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include <gtest/gtest.h>
#include <gtest/gtest.h>

#include <filesystem>

#include "test_util.hpp"

using namespace gpf;
using namespace gpf::test;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("gpf_test_io_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// Rounds through float so codec output can be compared exactly.
double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

Image random_image(int w, int h, int c, std::mt19937_64& rng, bool quantized) {
  std::uniform_int_distribution<int> q(0, 255);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  Image img(w, h, c);
  for (double& v : img.data) v = quantized ? q(rng) / 255.0 : f32(u(rng));
  return img;
}

template <class F>
void expect_parse_error_or_ok(F&& parse, const std::string& bytes) {
  try {
    parse(bytes);
  } catch (const ParseError&) {
  } catch (const InputError&) {
  }
}

}  // namespace

TEST(Io, PlyRoundTripBinary) {
  std::mt19937_64 rng(1);
  Eigen::Matrix3Xd p = Eigen::Matrix3Xd::Random(3, 57) * 5.0;
  p = p.unaryExpr([](double v) { return f32(v); });
  Eigen::Matrix<double, 3, Eigen::Dynamic> c(3, 57);
  std::uniform_int_distribution<int> q(0, 255);
  for (int i = 0; i < c.size(); ++i) c.data()[i] = q(rng) / 255.0;
  const io::PlyPoints back = io::ply_parse(io::ply_serialize(p, &c));
  EXPECT_EQ(back.positions, p);
  ASSERT_TRUE(back.colors.has_value());
  EXPECT_LT((*back.colors - c).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_FALSE(io::ply_parse(io::ply_serialize(p, nullptr)).colors.has_value());
}

TEST(Io, ExternalAsciiPlyFixture) {
  const io::PlyPoints pts = io::ply_read(fs::path(GPF_TEST_DATA) / "external_three_points.ply");
  ASSERT_EQ(pts.positions.cols(), 3);
  Eigen::Matrix3Xd expect(3, 3);
  expect << 0.5, -3, 1e-3, -1.25, 0.125, 42, 2, 7.75, -0.0625;
  EXPECT_EQ(pts.positions, expect);
  ASSERT_TRUE(pts.colors.has_value());
  EXPECT_EQ(pts.colors->col(0), Vec3(1, 0, 0));
  EXPECT_EQ(pts.colors->col(1), Vec3(0, 1, 0));
  EXPECT_EQ(pts.colors->col(2), Vec3(0, 0, 1));
}

TEST(Io, PlyRejectsMalformedHeaders) {
  const char* bad[] = {
      "plx\n",
      "ply\nformat binary_big_endian 1.0\nelement vertex 1\nproperty float x\nend_header\n",
      "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n",
      "ply\nformat ascii 1.0\nelement vertex 1\nproperty float128 x\nend_header\n",
      "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n",
      "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 nan 3\n",
      "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n",
  };
  for (const char* b : bad) EXPECT_THROW(io::ply_parse(b), ParseError) << b;
}

TEST(Io, BinaryPlyEveryTruncationThrows) {
  const Eigen::Matrix3Xd p = Eigen::Matrix3Xd::Random(3, 6);
  const std::string full = io::ply_serialize(p, nullptr);
  for (std::size_t n = 0; n < full.size(); ++n) EXPECT_THROW(io::ply_parse(full.substr(0, n)), ParseError) << n;
}

TEST(Io, GpffRoundTripAndTruncation) {
  std::mt19937_64 rng(2);
  const NeuralPointField f = random_field(9, rng);
  const std::string bytes = io::gpff_serialize(f);
  const MatX back = io::gpff_parse(bytes);
  ASSERT_EQ(back.cols(), 9);
  for (int i = 0; i < 9; ++i) EXPECT_EQ(back.col(i), f.features(i).unaryExpr([](double v) { return f32(v); }));
  for (std::size_t n = 0; n < bytes.size(); ++n) EXPECT_THROW(io::gpff_parse(bytes.substr(0, n)), ParseError) << n;
  EXPECT_THROW(io::gpff_parse(bytes + "x"), ParseError);
  std::string wrong_version = bytes;
  wrong_version[4] = 7;
  EXPECT_THROW(io::gpff_parse(wrong_version), ParseError);
}

TEST(Io, SceneRoundTripThroughDisk) {
  std::mt19937_64 rng(3);
  NeuralPointField f = random_field(20, rng, 3.0);
  f.mutable_positions() = f.positions().unaryExpr([](double v) { return f32(v); });
  f.mutable_color() = f.color().cwiseAbs().cwiseMin(1.0);
  const fs::path d = scratch_dir("scene");
  io::save_scene(d / "s.gpff", f);
  const NeuralPointField g = io::load_scene(d / "s.gpff");
  EXPECT_EQ(g.positions(), f.positions());
  for (int i = 0; i < 20; ++i) EXPECT_EQ(g.features(i), f.features(i).unaryExpr([](double v) { return f32(v); }));
  fs::remove(d / "s.ply");
  EXPECT_THROW(io::load_scene(d / "s.gpff"), InputError);
}

TEST(Io, PfmRoundTripAndTruncation) {
  std::mt19937_64 rng(4);
  for (int c : {1, 3}) {
    const Image img = random_image(7, 5, c, rng, false);
    const std::string bytes = io::pfm_serialize(img);
    EXPECT_EQ(io::pfm_parse(bytes), img);
    for (std::size_t n = 0; n < bytes.size(); ++n) EXPECT_THROW(io::pfm_parse(bytes.substr(0, n)), ParseError) << n;
  }
}

TEST(Io, PfmBigEndianIsSwapped) {
  std::string bytes = "Pf\n1 1\n1.0\n";
  const float v = 0.75f;
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  u = __builtin_bswap32(u);
  bytes.append(reinterpret_cast<const char*>(&u), 4);
  EXPECT_EQ(io::pfm_parse(bytes).at(0, 0), 0.75);
}

TEST(Io, PngRoundTripQuantized) {
  std::mt19937_64 rng(5);
  const Image img = random_image(13, 9, 3, rng, true);
  const fs::path d = scratch_dir("png");
  io::png_write(d / "a.png", img);
  const Image back = io::png_read(d / "a.png");
  ASSERT_EQ(back.width, 13);
  ASSERT_EQ(back.height, 9);
  for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 1e-12);
  EXPECT_THROW(io::png_read(d / "missing.png"), InputError);
}

TEST(Io, CamerasRoundTrip) {
  std::mt19937_64 rng(6);
  std::vector<CameraView> views;
  for (int i = 0; i < 3; ++i) {
    CameraView v = simple_camera(16, 12, 20.0 + i, random_rigid(rng));
    v.image = random_image(16, 12, 3, rng, true);
    views.push_back(v);
  }
  const fs::path d = scratch_dir("cams");
  std::vector<std::string> names{"a.png", "b.png", "c.png"};
  for (int i = 0; i < 3; ++i) io::png_write(d / names[static_cast<std::size_t>(i)], views[static_cast<std::size_t>(i)].image);
  io::write_cameras(d / "cameras.json", views, names);
  std::vector<std::string> got_names;
  const auto back = io::read_cameras(d / "cameras.json", {}, true, &got_names);
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(got_names, names);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].intrinsics, views[i].intrinsics);
    EXPECT_EQ(back[i].world_to_cam, views[i].world_to_cam);
    EXPECT_EQ(back[i].width, 16);
    EXPECT_LT(mse(back[i].image, views[i].image), 1e-24);
  }
  io::write_file(d / "broken.json", "[{\"K\": [1,2");
  EXPECT_THROW(io::read_cameras(d / "broken.json"), ParseError);
  io::write_file(d / "short.json", "[{\"K\": [1,0,0,0,1,0,0,0,1], \"w2c\": [1], \"width\": 4, \"height\": 4}]");
  EXPECT_THROW(io::read_cameras(d / "short.json"), InputError);
}

TEST(Io, ModelRoundTrip) {
  const fs::path d = scratch_dir("model");
  for (auto kind : {AggregatorKind::learnable, AggregatorKind::idw}) {
    io::ModelFile m;
    m.kernel = KernelParameters::init(7, kind, 12);
    m.fetch = FetchAggregatorParams::init(8, 10);
    KernelConfig k;
    k.aggregator = kind;
    k.k_neighbors = 5;
    k.search_radius_frac = 0.02;
    m.kernel_config = k;
    io::write_model(d / "m.json", m);
    const io::ModelFile back = io::read_model(d / "m.json");
    EXPECT_EQ(back.kernel.kind, kind);
    EXPECT_EQ(flatten_params(back.kernel), flatten_params(m.kernel));
    ASSERT_TRUE(back.fetch.has_value());
    EXPECT_EQ(flatten_params(*back.fetch), flatten_params(*m.fetch));
    ASSERT_TRUE(back.kernel_config.has_value());
    EXPECT_EQ(back.kernel_config->k_neighbors, 5);
    EXPECT_EQ(back.kernel_config->search_radius_frac, 0.02);
  }
  io::write_file(d / "bad.json", "{\"aggregator\": \"learnable\", \"hidden\": 4, \"kernel\": [1, 2, 3]}");
  EXPECT_THROW(io::read_model(d / "bad.json"), InputError);
}

TEST(Io, RandomBytesNeverCrashParsers) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> byte(0, 255), len(0, 300);
  const std::string seeds[] = {"ply\nformat ascii 1.0\nelement vertex ", "ply\nformat binary_little_endian 1.0\n",
                               "GPFF", "Pf\n", "PF\n3 2\n-1.0\n", ""};
  for (int trial = 0; trial < 3000; ++trial) {
    std::string b = seeds[trial % 6];
    const int n = len(rng);
    for (int i = 0; i < n; ++i) b.push_back(static_cast<char>(byte(rng)));
    expect_parse_error_or_ok([](const std::string& s) { io::ply_parse(s); }, b);
    expect_parse_error_or_ok([](const std::string& s) { io::gpff_parse(s); }, b);
    expect_parse_error_or_ok([](const std::string& s) { io::pfm_parse(s); }, b);
  }
}

TEST(Io, ByteFlipsOfValidFilesNeverCrash) {
  std::mt19937_64 rng(8);
  const std::string ply = io::read_file(fs::path(GPF_TEST_DATA) / "external_three_points.ply");
  const std::string pfm = io::pfm_serialize(random_image(4, 3, 3, rng, false));
  const std::string gpff = io::gpff_serialize(random_field(4, rng));
  std::uniform_int_distribution<int> byte(0, 255);
  for (int trial = 0; trial < 2000; ++trial) {
    for (const std::string* src : {&ply, &pfm, &gpff}) {
      std::string b = *src;
      std::uniform_int_distribution<std::size_t> at(0, b.size() - 1);
      for (int k = 0; k < 3; ++k) b[at(rng)] = static_cast<char>(byte(rng));
      expect_parse_error_or_ok([](const std::string& s) { io::ply_parse(s); }, b);
      expect_parse_error_or_ok([](const std::string& s) { io::gpff_parse(s); }, b);
      expect_parse_error_or_ok([](const std::string& s) { io::pfm_parse(s); }, b);
    }
  }
}

TEST(Synth, SpherePointsOnSurface) {
  synth::SynthConfig c;
  c.n_points = 2000;
  c.resolution = 16;
  c.n_views = 2;
  const auto s = synth::synth_scene(c);
  for (int i = 0; i < s.field.size(); ++i) EXPECT_NEAR(s.field.position(i).norm(), synth::kSphereRadius, 1e-9);
}

TEST(Synth, SlabFrontViewDepthIsCameraDistance) {
  synth::SynthConfig c;
  c.kind = synth::SceneKind::slab;
  c.n_points = 500;
  c.resolution = 32;
  c.n_views = 3;
  const auto s = synth::synth_scene(c);
  const Image& d = s.true_depth[0];
  EXPECT_NEAR(d.at(16, 16), 3.0, 1e-9);
  int hits = 0;
  for (double v : d.data) {
    if (v == 0.0) continue;
    EXPECT_NEAR(v, 3.0, 1e-9);
    ++hits;
  }
  EXPECT_GT(hits, 100);
}

TEST(Synth, HoleSlabHasNoPointsInHole) {
  synth::SynthConfig c;
  c.kind = synth::SceneKind::hole_slab;
  c.n_points = 3000;
  c.resolution = 8;
  const auto s = synth::synth_scene(c);
  for (int i = 0; i < s.field.size(); ++i) {
    EXPECT_GE(s.field.position(i).head<2>().norm(), synth::kHoleRadius);
    EXPECT_EQ(s.field.position(i).z(), 0.0);
  }
}

TEST(Synth, Deterministic) {
  synth::SynthConfig c;
  c.kind = synth::SceneKind::textured_cube;
  c.n_points = 400;
  c.resolution = 16;
  const auto a = synth::synth_scene(c), b = synth::synth_scene(c);
  EXPECT_EQ(a.field.positions(), b.field.positions());
  EXPECT_EQ(a.field.color(), b.field.color());
  ASSERT_EQ(a.views.size(), b.views.size());
  for (std::size_t i = 0; i < a.views.size(); ++i) EXPECT_EQ(a.views[i].image, b.views[i].image);
  c.seed = 1;
  EXPECT_NE(synth::synth_scene(c).field.positions(), a.field.positions());
}

TEST(Synth, RejectsBadConfig) {
  synth::SynthConfig c;
  c.n_points = 10;
  EXPECT_THROW(synth::synth_scene(c), InputError);
  EXPECT_THROW(synth::parse_kind("torus"), InputError);
  for (auto k : {synth::SceneKind::sphere, synth::SceneKind::slab, synth::SceneKind::hole_slab, synth::SceneKind::two_slabs,
                 synth::SceneKind::textured_cube}) {
    EXPECT_EQ(synth::parse_kind(synth::to_string(k)), k);
  }
}

TEST(Metrics, PsnrClosedForms) {
  const Image a(8, 8, 3, 0.0), b(8, 8, 3, 0.5);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  EXPECT_NEAR(psnr(a, b), 10.0 * std::log10(4.0), 1e-12);
  EXPECT_NEAR(psnr(a, b), 6.0206, 1e-4);
  EXPECT_THROW(psnr(a, Image(8, 7, 3)), InputError);
}

TEST(Metrics, SsimConstantImagesClosedForm) {
  const Image a(16, 16, 3, 0.2), b(16, 16, 3, 0.6);
  const double c1 = 1e-4;
  EXPECT_NEAR(ssim(a, b), (2 * 0.2 * 0.6 + c1) / (0.04 + 0.36 + c1), 1e-12);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  EXPECT_THROW(ssim(Image(8, 8, 3), Image(8, 8, 3)), InputError);
}

TEST(Metrics, SsimMatchesDirectWindowFormula) {
  std::mt19937_64 rng(9);
  const Image a = random_image(11, 11, 1, rng, true), b = random_image(11, 11, 1, rng, true);
  // With one window position the result is a single weighted-moment ratio.
  double w[11], ws = 0;
  for (int i = 0; i < 11; ++i) ws += (w[i] = std::exp(-(i - 5) * (i - 5) / 4.5));
  double mx = 0, my = 0;
  for (int y = 0; y < 11; ++y)
    for (int x = 0; x < 11; ++x) {
      const double g = w[x] * w[y] / (ws * ws);
      mx += g * a.at(x, y);
      my += g * b.at(x, y);
    }
  double vx = 0, vy = 0, cxy = 0;
  for (int y = 0; y < 11; ++y)
    for (int x = 0; x < 11; ++x) {
      const double g = w[x] * w[y] / (ws * ws);
      vx += g * (a.at(x, y) - mx) * (a.at(x, y) - mx);
      vy += g * (b.at(x, y) - my) * (b.at(x, y) - my);
      cxy += g * (a.at(x, y) - mx) * (b.at(x, y) - my);
    }
  const double c1 = 1e-4, c2 = 9e-4;
  const double expect = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
  EXPECT_NEAR(ssim(a, b), expect, 1e-12);
}
