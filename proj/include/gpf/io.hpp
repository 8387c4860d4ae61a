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

#pragma once

#include <png.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gpf/core_types.hpp"
#include "gpf/feature_pipeline.hpp"
#include "gpf/kernel_renderer.hpp"

namespace gpf::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "binary codecs assume a little-endian host");

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError("cannot open '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InputError("cannot write '" + p.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("write failed for '" + p.string() + "'");
}

template <class T>
void put(std::string& out, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.append(b, sizeof(T));
}

/// Bounds-checked little-endian reader over a byte buffer.
class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes, std::size_t pos = 0) : b_(bytes), pos_(pos) {}

  template <class T>
  T get(const char* what) {
    if (pos_ + sizeof(T) > b_.size()) throw ParseError(std::string("truncated data reading ") + what, pos_);
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  /// Reads up to and including '\n'; the newline is stripped.
  std::string line(const char* what) {
    const auto nl = b_.find('\n', pos_);
    if (nl == std::string::npos) throw ParseError(std::string("unterminated ") + what, pos_);
    std::string s = b_.substr(pos_, nl - pos_);
    pos_ = nl + 1;
    if (!s.empty() && s.back() == '\r') s.pop_back();
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }
  const char* data() const { return b_.data() + pos_; }
  void skip(std::size_t n) { pos_ += n; }

 private:
  const std::string& b_;
  std::size_t pos_;
};

// ---------------------------------------------------------------------------
// PLY

struct PlyPoints {
  Eigen::Matrix3Xd positions;
  std::optional<Eigen::Matrix<double, 3, Eigen::Dynamic>> colors;  ///< in [0,1]
};

namespace detail {
inline int ply_type_size(const std::string& t) {
  if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
  if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
  if (t == "int" || t == "uint" || t == "float" || t == "int32" || t == "uint32" || t == "float32") return 4;
  if (t == "double" || t == "float64") return 8;
  return 0;
}

inline double ply_binary_value(const char* p, const std::string& t) {
  auto rd = [&](auto v) {
    std::memcpy(&v, p, sizeof(v));
    return static_cast<double>(v);
  };
  if (t == "char" || t == "int8") return rd(std::int8_t{});
  if (t == "uchar" || t == "uint8") return rd(std::uint8_t{});
  if (t == "short" || t == "int16") return rd(std::int16_t{});
  if (t == "ushort" || t == "uint16") return rd(std::uint16_t{});
  if (t == "int" || t == "int32") return rd(std::int32_t{});
  if (t == "uint" || t == "uint32") return rd(std::uint32_t{});
  if (t == "float" || t == "float32") return rd(float{});
  return rd(double{});
}
}  // namespace detail

/// Reads the vertex element of an ascii or binary little-endian PLY (x, y, z and optional
/// red, green, blue). Elements after the vertices are ignored.
inline PlyPoints ply_parse(const std::string& bytes) {
  ByteReader r(bytes);
  if (r.line("magic") != "ply") throw ParseError("ply: missing 'ply' magic", 0);
  std::size_t at = r.pos();
  std::string fmt = r.line("format line");
  bool ascii = false;
  if (fmt == "format ascii 1.0") {
    ascii = true;
  } else if (fmt != "format binary_little_endian 1.0") {
    throw ParseError("ply: unsupported format '" + fmt + "'", at);
  }
  struct Prop {
    std::string name, type;
  };
  std::vector<Prop> props;
  long n_vertices = -1;
  bool in_vertex = false, vertex_done = false;
  for (;;) {
    at = r.pos();
    const std::string l = r.line("header");
    std::istringstream ls(l);
    std::string kw;
    ls >> kw;
    if (kw == "end_header") break;
    if (kw == "comment" || kw == "obj_info" || kw.empty()) continue;
    if (kw == "element") {
      std::string name;
      long count = -1;
      ls >> name >> count;
      if (!ls || count < 0) throw ParseError("ply: bad element line", at);
      if (in_vertex) vertex_done = true;
      in_vertex = name == "vertex" && !vertex_done;
      if (in_vertex) {
        if (n_vertices >= 0) throw ParseError("ply: duplicate vertex element", at);
        if (!props.empty() || vertex_done) throw ParseError("ply: vertex must be the first element", at);
        n_vertices = count;
      } else if (n_vertices < 0) {
        throw ParseError("ply: vertex must be the first element", at);
      }
      continue;
    }
    if (kw == "property") {
      std::string type, name;
      ls >> type >> name;
      if (!in_vertex) continue;
      if (type == "list") throw ParseError("ply: list properties on vertices are not supported", at);
      if (detail::ply_type_size(type) == 0) throw ParseError("ply: unknown property type '" + type + "'", at);
      if (!ls) throw ParseError("ply: bad property line", at);
      props.push_back({name, type});
      continue;
    }
    throw ParseError("ply: unexpected header line '" + l + "'", at);
  }
  if (n_vertices < 0) throw ParseError("ply: no vertex element", r.pos());
  int ix = -1, iy = -1, iz = -1, ir = -1, ig = -1, ib = -1;
  for (int i = 0; i < static_cast<int>(props.size()); ++i) {
    const auto& n = props[static_cast<std::size_t>(i)].name;
    if (n == "x") ix = i;
    if (n == "y") iy = i;
    if (n == "z") iz = i;
    if (n == "red") ir = i;
    if (n == "green") ig = i;
    if (n == "blue") ib = i;
  }
  if (ix < 0 || iy < 0 || iz < 0) throw ParseError("ply: vertex element lacks x/y/z", r.pos());
  const bool has_rgb = ir >= 0 && ig >= 0 && ib >= 0;
  auto color_scale = [&](int i) {
    const auto& t = props[static_cast<std::size_t>(i)].type;
    return (t == "uchar" || t == "uint8") ? 1.0 / 255.0 : 1.0;
  };
  // Every ascii value takes at least two bytes, so a count the data cannot hold is rejected
  // before allocating.
  const std::size_t min_row = ascii ? 2 * props.size() : 1;
  if (r.remaining() / min_row < static_cast<std::size_t>(n_vertices)) {
    throw ParseError("ply: truncated vertex data", r.pos() + r.remaining());
  }
  PlyPoints out;
  out.positions.resize(3, n_vertices);
  if (has_rgb) out.colors.emplace(3, n_vertices);
  std::vector<double> vals(props.size());
  if (!ascii) {
    std::size_t stride = 0;
    for (const auto& p : props) stride += static_cast<std::size_t>(detail::ply_type_size(p.type));
    if (r.remaining() / stride < static_cast<std::size_t>(n_vertices)) {
      throw ParseError("ply: truncated vertex data", r.pos() + r.remaining());
    }
  }
  for (long v = 0; v < n_vertices; ++v) {
    if (ascii) {
      at = r.pos();
      std::istringstream ls(r.line("vertex row"));
      for (auto& x : vals) {
        if (!(ls >> x)) throw ParseError("ply: bad ascii vertex row", at);
      }
    } else {
      for (std::size_t i = 0; i < props.size(); ++i) {
        vals[i] = detail::ply_binary_value(r.data(), props[i].type);
        r.skip(static_cast<std::size_t>(detail::ply_type_size(props[i].type)));
      }
    }
    out.positions.col(v) << vals[static_cast<std::size_t>(ix)], vals[static_cast<std::size_t>(iy)], vals[static_cast<std::size_t>(iz)];
    if (!out.positions.col(v).allFinite()) throw ParseError("ply: non-finite vertex position", r.pos());
    if (has_rgb) {
      out.colors->col(v) << vals[static_cast<std::size_t>(ir)] * color_scale(ir), vals[static_cast<std::size_t>(ig)] * color_scale(ig),
          vals[static_cast<std::size_t>(ib)] * color_scale(ib);
    }
  }
  return out;
}

inline PlyPoints ply_read(const fs::path& p) { return ply_parse(read_file(p)); }

/// Binary little-endian PLY with float32 x, y, z and, when given, uchar red, green, blue.
inline std::string ply_serialize(const Eigen::Matrix3Xd& positions, const Eigen::Matrix<double, 3, Eigen::Dynamic>* colors) {
  std::string out = "ply\nformat binary_little_endian 1.0\nelement vertex " + std::to_string(positions.cols()) +
                    "\nproperty float x\nproperty float y\nproperty float z\n";
  if (colors) out += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out += "end_header\n";
  for (Eigen::Index i = 0; i < positions.cols(); ++i) {
    for (int a = 0; a < 3; ++a) put(out, static_cast<float>(positions(a, i)));
    if (colors) {
      for (int c = 0; c < 3; ++c) put(out, static_cast<std::uint8_t>(std::lround(std::clamp((*colors)(c, i), 0.0, 1.0) * 255.0)));
    }
  }
  return out;
}

inline void ply_write(const fs::path& p, const Eigen::Matrix3Xd& positions, const Eigen::Matrix<double, 3, Eigen::Dynamic>* colors = nullptr) {
  write_file(p, ply_serialize(positions, colors));
}

// ---------------------------------------------------------------------------
// GPFF feature sidecar: "GPFF", u32 version, u32 N, u32 dim, then N x dim float32.

inline constexpr std::uint32_t kGpffVersion = 1;

inline std::string gpff_serialize(const NeuralPointField& field) {
  std::string out = "GPFF";
  put(out, kGpffVersion);
  put(out, static_cast<std::uint32_t>(field.size()));
  put(out, static_cast<std::uint32_t>(kFeatureDim));
  out.reserve(out.size() + static_cast<std::size_t>(field.size()) * kFeatureDim * 4);
  for (int i = 0; i < field.size(); ++i) {
    const auto f = field.features(i);
    for (int c = 0; c < kFeatureDim; ++c) put(out, static_cast<float>(f(c)));
  }
  return out;
}

/// Features as a kFeatureDim x N matrix in [color, low, high] order.
inline MatX gpff_parse(const std::string& bytes) {
  ByteReader r(bytes);
  if (bytes.size() < 4 || bytes.compare(0, 4, "GPFF") != 0) throw ParseError("gpff: bad magic", 0);
  r.skip(4);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kGpffVersion) throw ParseError("gpff: unsupported version " + std::to_string(version), 4);
  const auto n = r.get<std::uint32_t>("point count");
  const auto dim = r.get<std::uint32_t>("feature dim");
  if (dim != kFeatureDim) throw ParseError("gpff: feature dim " + std::to_string(dim) + " != " + std::to_string(kFeatureDim), 12);
  const std::size_t need = static_cast<std::size_t>(n) * dim * 4;
  if (r.remaining() < need) throw ParseError("gpff: truncated feature payload", bytes.size());
  if (r.remaining() > need) throw ParseError("gpff: trailing bytes after payload", 16 + need);
  MatX f(kFeatureDim, n);
  for (std::uint32_t i = 0; i < n; ++i)
    for (int c = 0; c < kFeatureDim; ++c) {
      const float v = r.get<float>("feature");
      f(c, i) = v;
    }
  return f;
}

inline void gpff_write(const fs::path& p, const NeuralPointField& field) { write_file(p, gpff_serialize(field)); }
inline MatX gpff_read(const fs::path& p) { return gpff_parse(read_file(p)); }

/// A scene on disk is <stem>.ply (positions) next to <stem>.gpff (features).
inline fs::path sibling_ply(const fs::path& gpff) { return fs::path(gpff).replace_extension(".ply"); }

inline NeuralPointField load_scene(const fs::path& gpff_path) {
  const PlyPoints pts = ply_read(sibling_ply(gpff_path));
  const MatX f = gpff_read(gpff_path);
  if (f.cols() != pts.positions.cols()) throw InputError("scene: point count differs between .ply and .gpff");
  NeuralPointField field(pts.positions);
  for (int i = 0; i < field.size(); ++i) field.set_features(i, f.col(i));
  field.validate();
  return field;
}

inline void save_scene(const fs::path& gpff_path, const NeuralPointField& field) {
  const Eigen::Matrix<double, 3, Eigen::Dynamic> colors = field.color();
  ply_write(sibling_ply(gpff_path), field.positions(), &colors);
  gpff_write(gpff_path, field);
}

// ---------------------------------------------------------------------------
// PFM

inline std::string pfm_serialize(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw InputError("pfm: need 1 or 3 channels");
  std::string out = std::string(img.channels == 1 ? "Pf" : "PF") + "\n" + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n-1.0\n";
  for (int y = img.height - 1; y >= 0; --y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) put(out, static_cast<float>(img.at(x, y, c)));
  return out;
}

inline Image pfm_parse(const std::string& bytes) {
  ByteReader r(bytes);
  const std::string magic = r.line("magic");
  int ch = 0;
  if (magic == "Pf") ch = 1;
  else if (magic == "PF") ch = 3;
  else throw ParseError("pfm: bad magic", 0);
  std::size_t at = r.pos();
  std::istringstream dims(r.line("dimensions"));
  long w = 0, h = 0;
  if (!(dims >> w >> h) || w <= 0 || h <= 0 || w > (1 << 20) || h > (1 << 20)) throw ParseError("pfm: bad dimensions", at);
  at = r.pos();
  const std::string sl = r.line("scale");
  double scale = 0;
  try {
    scale = std::stod(sl);
  } catch (const std::exception&) {
    throw ParseError("pfm: bad scale", at);
  }
  if (scale == 0.0 || !std::isfinite(scale)) throw ParseError("pfm: bad scale", at);
  const bool big = scale > 0.0;
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * static_cast<std::size_t>(ch) * 4;
  if (r.remaining() < need) throw ParseError("pfm: truncated pixel data", bytes.size());
  Image img(static_cast<int>(w), static_cast<int>(h), ch, 0.0);
  for (long y = h - 1; y >= 0; --y)
    for (long x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) {
        auto u = r.get<std::uint32_t>("pixel");
        if (big) u = __builtin_bswap32(u);
        float v;
        std::memcpy(&v, &u, 4);
        img.at(static_cast<int>(x), static_cast<int>(y), c) = v;
      }
  return img;
}

inline void pfm_write(const fs::path& p, const Image& img) { write_file(p, pfm_serialize(img)); }
inline Image pfm_read(const fs::path& p) { return pfm_parse(read_file(p)); }

// ---------------------------------------------------------------------------
// PNG (8-bit RGB)

inline void png_write(const fs::path& p, const Image& img) {
  if (img.channels != 3 && img.channels != 1) throw InputError("png: need 1 or 3 channels");
  png_image im;
  std::memset(&im, 0, sizeof(im));
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(img.width);
  im.height = static_cast<png_uint_32>(img.height);
  im.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<png_byte> buf(img.data.size());
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<png_byte>(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
  if (!png_image_write_to_file(&im, p.string().c_str(), 0, buf.data(), 0, nullptr)) {
    throw InputError("png: cannot write '" + p.string() + "': " + im.message);
  }
}

inline Image png_read(const fs::path& p) {
  png_image im;
  std::memset(&im, 0, sizeof(im));
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, p.string().c_str())) {
    throw InputError("png: cannot read '" + p.string() + "': " + im.message);
  }
  im.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&im);
    throw InputError("png: decode failed for '" + p.string() + "': " + im.message);
  }
  Image img(static_cast<int>(im.width), static_cast<int>(im.height), 3, 0.0);
  for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i] / 255.0;
  return img;
}

// ---------------------------------------------------------------------------
// Cameras JSON

/// Reads the camera list. Image paths are resolved against `image_dir` when given,
/// otherwise against the JSON file's directory; images are loaded when `load_images`.
inline std::vector<CameraView> read_cameras(const fs::path& p, const fs::path& image_dir = {}, bool load_images = true,
                                            std::vector<std::string>* image_names = nullptr) {
  json j;
  try {
    j = json::parse(read_file(p));
  } catch (const json::parse_error& e) {
    throw ParseError("cameras: " + std::string(e.what()), e.byte);
  }
  if (!j.is_array()) throw InputError("cameras: expected a JSON array");
  std::vector<CameraView> views;
  const fs::path base = image_dir.empty() ? p.parent_path() : image_dir;
  for (const auto& c : j) {
    CameraView v;
    try {
      const auto k = c.at("K").get<std::vector<double>>();
      const auto w = c.at("w2c").get<std::vector<double>>();
      if (k.size() != 9 || w.size() != 16) throw InputError("cameras: K needs 9 and w2c 16 values");
      for (int r = 0; r < 3; ++r)
        for (int q = 0; q < 3; ++q) v.intrinsics(r, q) = k[static_cast<std::size_t>(3 * r + q)];
      for (int r = 0; r < 4; ++r)
        for (int q = 0; q < 4; ++q) v.world_to_cam(r, q) = w[static_cast<std::size_t>(4 * r + q)];
      v.width = c.at("width").get<int>();
      v.height = c.at("height").get<int>();
    } catch (const json::exception& e) {
      throw InputError(std::string("cameras: ") + e.what());
    }
    v.validate();
    const std::string name = c.value("image", std::string());
    if (image_names) image_names->push_back(name);
    if (load_images && !name.empty()) {
      v.image = png_read(base / name);
      if (v.image.width != v.width || v.image.height != v.height) throw InputError("cameras: image size differs for " + name);
    }
    views.push_back(std::move(v));
  }
  return views;
}

inline void write_cameras(const fs::path& p, std::span<const CameraView> views, const std::vector<std::string>& image_names) {
  json j = json::array();
  for (std::size_t i = 0; i < views.size(); ++i) {
    const auto& v = views[i];
    std::vector<double> k, w;
    for (int r = 0; r < 3; ++r)
      for (int q = 0; q < 3; ++q) k.push_back(v.intrinsics(r, q));
    for (int r = 0; r < 4; ++r)
      for (int q = 0; q < 4; ++q) w.push_back(v.world_to_cam(r, q));
    j.push_back({{"K", k}, {"w2c", w}, {"width", v.width}, {"height", v.height},
                 {"image", i < image_names.size() ? image_names[i] : std::string()}});
  }
  write_file(p, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Network weights JSON

template <class P>
json params_to_json(const P& p) {
  return flatten_params(p);
}

template <class P>
void params_from_json(P& p, const json& j, const char* what) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != param_count(p)) throw InputError(std::string("model: wrong parameter count for ") + what);
  unflatten_params(p, v);
}

struct ModelFile {
  KernelParameters kernel;
  std::optional<FetchAggregatorParams> fetch;
  /// Neighbourhood the kernel was trained with; finetuning may have enlarged it.
  std::optional<KernelConfig> kernel_config;
};

inline void write_model(const fs::path& p, const ModelFile& m) {
  json j;
  j["aggregator"] = m.kernel.kind == AggregatorKind::idw ? "idw" : "learnable";
  j["hidden"] = m.kernel.hidden();
  j["kernel"] = params_to_json(m.kernel);
  if (m.fetch) {
    j["fetch"] = params_to_json(*m.fetch);
    j["fetch_hidden"] = m.fetch->low.layers().front().weight.rows();
  }
  if (m.kernel_config) {
    j["kernel_config"] = {{"k_neighbors", m.kernel_config->k_neighbors},
                          {"search_radius_frac", m.kernel_config->search_radius_frac},
                          {"density_unit_frac", m.kernel_config->density_unit_frac}};
  }
  write_file(p, j.dump() + "\n");
}

inline ModelFile read_model(const fs::path& p) {
  json j;
  try {
    j = json::parse(read_file(p));
  } catch (const json::parse_error& e) {
    throw ParseError("model: " + std::string(e.what()), e.byte);
  }
  ModelFile m;
  try {
    const auto kind = j.at("aggregator").get<std::string>() == "idw" ? AggregatorKind::idw : AggregatorKind::learnable;
    m.kernel = KernelParameters::init(0, kind, j.at("hidden").get<int>());
    params_from_json(m.kernel, j.at("kernel"), "kernel");
    if (j.contains("fetch")) {
      m.fetch = FetchAggregatorParams::init(0, j.value("fetch_hidden", 32));
      params_from_json(*m.fetch, j.at("fetch"), "fetch");
    }
    if (j.contains("kernel_config")) {
      const auto& c = j.at("kernel_config");
      KernelConfig k;
      k.aggregator = kind;
      k.k_neighbors = c.at("k_neighbors").get<int>();
      k.search_radius_frac = c.at("search_radius_frac").get<double>();
      k.density_unit_frac = c.at("density_unit_frac").get<double>();
      k.validate();
      m.kernel_config = k;
    }
  } catch (const json::exception& e) {
    throw InputError(std::string("model: ") + e.what());
  }
  return m;
}

}  // namespace gpf::io
