#pragma once

// File formats: PNG/PPM images, model manifests with a binary weight
// sidecar, dataset manifests, segment-set directories, VCC JSON and DOT.
// PNG goes through libpng; JSON through nlohmann::json, whose object keys
// are sorted and whose doubles print as shortest round-trip decimals, which
// makes serialized output canonical.

#include <png.h>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vcc/graph.hpp"
#include "vcc/pipeline.hpp"
#include "vcc/image.hpp"
#include "vcc/netcore.hpp"
#include "vcc/segment.hpp"
#include "vcc/toylab.hpp"

namespace vcc {

using Json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- raw files

inline std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::io, "short write to " + path.string());
}

inline std::string read_text(const fs::path& path) {
  const auto b = read_bytes(path);
  return {b.begin(), b.end()};
}

inline void write_text(const fs::path& path, const std::string& text) {
  write_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

inline Json read_json(const fs::path& path) {
  try {
    return Json::parse(read_text(path));
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::io, path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(1) + "\n"); }

// ------------------------------------------------------------------- images

namespace detail {

inline bool is_png(std::span<const std::uint8_t> b) {
  static constexpr std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  return b.size() >= 8 && std::equal(sig, sig + 8, b.begin());
}

inline ImageFile decode_png(std::span<const std::uint8_t> bytes) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    throw Error(ErrorKind::io, std::string("PNG decode failed: ") + img.message);
  const bool has_alpha = img.format & PNG_FORMAT_FLAG_ALPHA;
  const bool rgb8 = (img.format & ~PNG_FORMAT_FLAG_ALPHA) == PNG_FORMAT_FLAG_COLOR;
  if (!rgb8) {
    png_image_free(&img);
    throw Error(ErrorKind::io, "unsupported PNG: only 8-bit RGB and RGBA are accepted");
  }
  img.format = has_alpha ? PNG_FORMAT_RGBA : PNG_FORMAT_RGB;
  const int channels = has_alpha ? 4 : 3;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr))
    throw Error(ErrorKind::io, std::string("PNG decode failed: ") + img.message);
  ImageFile out{static_cast<int>(img.width), static_cast<int>(img.height), {}};
  const std::size_t n = static_cast<std::size_t>(out.width) * out.height;
  out.pixels.resize(n * 3);
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) out.pixels[i * 3 + c] = buf[i * channels + c];
  return out;
}

inline std::vector<std::uint8_t> encode_png(const ImageFile& im) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, im.pixels.data(), 0, nullptr))
    throw Error(ErrorKind::io, std::string("PNG encode failed: ") + img.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, im.pixels.data(), 0, nullptr))
    throw Error(ErrorKind::io, std::string("PNG encode failed: ") + img.message);
  out.resize(size);
  return out;
}

// Next whitespace-delimited header token, skipping '#' comments.
inline std::string ppm_token(std::span<const std::uint8_t> b, std::size_t& pos) {
  for (;;) {
    while (pos < b.size() && std::isspace(b[pos])) ++pos;
    if (pos < b.size() && b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  std::string t;
  while (pos < b.size() && !std::isspace(b[pos]) && b[pos] != '#') t.push_back(static_cast<char>(b[pos++]));
  require(!t.empty(), ErrorKind::io, "truncated PPM header");
  return t;
}

inline int ppm_int(std::span<const std::uint8_t> b, std::size_t& pos) {
  const std::string t = ppm_token(b, pos);
  require(std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; }) && t.size() <= 9,
          ErrorKind::io, "bad PPM header field '" + t + "'");
  return std::stoi(t);
}

inline ImageFile decode_ppm(std::span<const std::uint8_t> b) {
  std::size_t pos = 0;
  require(ppm_token(b, pos) == "P6", ErrorKind::io, "only binary PPM (P6) is supported");
  ImageFile img;
  img.width = ppm_int(b, pos);
  img.height = ppm_int(b, pos);
  const int maxval = ppm_int(b, pos);
  require(img.width >= 1 && img.height >= 1, ErrorKind::io, "PPM dimensions must be positive");
  require(maxval == 255, ErrorKind::io, "only PPM maxval 255 is supported");
  require(pos < b.size() && std::isspace(b[pos]), ErrorKind::io, "PPM header must end in one whitespace byte");
  ++pos;
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * 3;
  require(b.size() - pos >= n, ErrorKind::io, "truncated PPM pixel data");
  img.pixels.assign(b.begin() + static_cast<std::ptrdiff_t>(pos), b.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

}  // namespace detail

enum class ImageFormat { png, ppm };

/// PNG (8-bit RGB/RGBA, alpha dropped) or binary PPM, by signature.
inline ImageFile decode_image(std::span<const std::uint8_t> bytes) {
  if (detail::is_png(bytes)) return detail::decode_png(bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return detail::decode_ppm(bytes);
  throw Error(ErrorKind::io, "unrecognised image format");
}

inline std::vector<std::uint8_t> encode_image(const ImageFile& img, ImageFormat fmt = ImageFormat::png) {
  require(img.width >= 1 && img.height >= 1 &&
              img.pixels.size() == static_cast<std::size_t>(img.width) * img.height * 3,
          ErrorKind::invalid_input, "malformed image");
  if (fmt == ImageFormat::png) return detail::encode_png(img);
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

inline ImageFile load_image(const fs::path& path) { return decode_image(read_bytes(path)); }

inline void save_image(const fs::path& path, const ImageFile& img) {
  const auto ext = path.extension().string();
  write_bytes(path, encode_image(img, ext == ".ppm" ? ImageFormat::ppm : ImageFormat::png));
}

// ---------------------------------------------------------------- RLE masks

/// Row-major run lengths, alternating, starting with a (possibly empty) run
/// of zeros.
inline std::vector<int> encode_rle(const BinaryMask& m) {
  std::vector<int> runs;
  std::uint8_t cur = 0;
  int len = 0;
  for (auto c : m.cells) {
    const std::uint8_t v = c ? 1 : 0;
    if (v != cur) {
      runs.push_back(len);
      cur = v;
      len = 0;
    }
    ++len;
  }
  runs.push_back(len);
  return runs;
}

inline BinaryMask decode_rle(const std::vector<int>& runs, int height, int width) {
  BinaryMask m(height, width);
  std::size_t pos = 0;
  std::uint8_t v = 0;
  for (int r : runs) {
    require(r >= 0 && pos + static_cast<std::size_t>(r) <= m.size(), ErrorKind::io, "mask RLE overruns the grid");
    std::fill_n(m.cells.begin() + static_cast<std::ptrdiff_t>(pos), r, v);
    pos += static_cast<std::size_t>(r);
    v ^= 1;
  }
  require(pos == m.size(), ErrorKind::io, "mask RLE does not cover the grid");
  return m;
}

// ------------------------------------------------------------------- models

namespace detail {

inline void append_le(std::vector<std::uint8_t>& out, std::span<const float> v) {
  for (float f : v) {
    std::uint32_t u = std::bit_cast<std::uint32_t>(f);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(u >> (8 * b)));
  }
}

inline std::vector<float> read_le(std::span<const std::uint8_t> blob, std::size_t offset, std::size_t count) {
  require(offset + count * 4 <= blob.size(), ErrorKind::io, "weight blob shorter than the manifest declares");
  std::vector<float> v(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(blob[offset + i * 4 + b]) << (8 * b);
    v[i] = std::bit_cast<float>(u);
  }
  return v;
}

}  // namespace detail

/// Manifest JSON plus, for trained models, a little-endian f32 sidecar named
/// after the manifest with a .bin extension.
inline void save_model(const fs::path& manifest_path, const LayeredModel& m) {
  Json j;
  j["format"] = "vcc-model";
  j["version"] = 1;
  j["input_shape"] = m.input_shape();
  j["class_count"] = m.class_count();
  j["taps"] = m.taps();
  const bool weights = m.has_weights();
  std::vector<std::uint8_t> blob;
  Json layers = Json::array();
  for (const auto& l : m.layers()) {
    Json e;
    e["kind"] = std::string(to_string(l.kind));
    if (l.kind == LayerKind::conv2d) {
      e["in_channels"] = l.in_channels;
      e["out_channels"] = l.out_channels;
      e["kernel"] = l.kernel;
      e["stride"] = l.stride;
      e["padding"] = l.padding;
    } else if (l.kind == LayerKind::maxpool2d) {
      e["kernel"] = l.kernel;
      e["stride"] = l.stride;
    } else if (l.kind == LayerKind::dense) {
      e["in_features"] = l.in_features;
      e["out_features"] = l.out_features;
    }
    if (weights && l.has_parameters()) {
      e["weight_offset"] = blob.size();
      e["weight_count"] = l.weight.size();
      detail::append_le(blob, l.weight);
      e["bias_offset"] = blob.size();
      e["bias_count"] = l.bias.size();
      detail::append_le(blob, l.bias);
    }
    layers.push_back(std::move(e));
  }
  j["layers"] = std::move(layers);
  if (weights) {
    fs::path bin = manifest_path;
    bin.replace_extension(".bin");
    j["weights"] = bin.filename().string();
    write_bytes(bin, blob);
  } else {
    j["weights"] = nullptr;
  }
  write_json(manifest_path, j);
}

inline LayeredModel model_from_json(const Json& j, const fs::path& base_dir, bool load_weights = true) {
  try {
    require(j.value("format", "") == "vcc-model", ErrorKind::io, "not a model manifest");
    require(j.value("version", 0) == 1, ErrorKind::io, "unsupported model manifest version");
    std::vector<std::uint8_t> blob;
    const bool has_blob = load_weights && j.contains("weights") && !j["weights"].is_null();
    if (has_blob) blob = read_bytes(base_dir / j["weights"].get<std::string>());
    std::vector<LayerSpec> layers;
    for (const auto& e : j.at("layers")) {
      LayerSpec l;
      l.kind = layer_kind_from_string(e.at("kind").get<std::string>());
      l.in_channels = e.value("in_channels", 0);
      l.out_channels = e.value("out_channels", 0);
      l.kernel = e.value("kernel", 0);
      l.stride = e.value("stride", 1);
      l.padding = e.value("padding", 0);
      l.in_features = e.value("in_features", 0);
      l.out_features = e.value("out_features", 0);
      if (has_blob && l.has_parameters()) {
        l.weight = detail::read_le(blob, e.at("weight_offset"), e.at("weight_count"));
        l.bias = detail::read_le(blob, e.at("bias_offset"), e.at("bias_count"));
      }
      layers.push_back(std::move(l));
    }
    return LayeredModel(j.at("input_shape").get<Shape>(), std::move(layers), j.at("class_count").get<int>(),
                        j.value("taps", std::vector<int>{}));
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::io, std::string("malformed model manifest: ") + e.what());
  }
}

inline LayeredModel load_model(const fs::path& manifest_path, bool load_weights = true) {
  return model_from_json(read_json(manifest_path), manifest_path.parent_path(), load_weights);
}

// ----------------------------------------------------------------- datasets

struct DatasetEntry {
  std::string file;
  int label = -1;
  SyntheticScene annotations;  // image left empty; parts and mask filled
};

struct Dataset {
  std::vector<SceneClass> classes;
  std::vector<DatasetEntry> entries;  // sorted by file name
};

/// Writes scene images as PNG plus labels.json; the manifest maps each file
/// name to its class and part annotations.
inline void save_dataset(const fs::path& dir, const std::vector<SceneClass>& classes,
                         const std::vector<SyntheticScene>& scenes, const std::string& prefix = "scene") {
  fs::create_directories(dir);
  Json j;
  j["format"] = "vcc-dataset";
  j["version"] = 1;
  Json cls = Json::array();
  for (const auto& c : classes) cls.push_back(c.name());
  j["classes"] = cls;
  Json files = Json::object();
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%05zu.png", prefix.c_str(), i);
    save_image(dir / name, to_image(scenes[i].image));
    const auto& s = scenes[i];
    files[name] = {{"class", s.label},
                   {"shape", to_string(s.shape)},
                   {"color", to_string(s.color)},
                   {"texture", s.texture},
                   {"mask_height", s.shape_mask.height},
                   {"mask_width", s.shape_mask.width},
                   {"mask_rle", encode_rle(s.shape_mask)}};
  }
  j["files"] = std::move(files);
  write_json(dir / "labels.json", j);
}

inline Dataset load_dataset(const fs::path& dir) {
  const Json j = read_json(dir / "labels.json");
  Dataset d;
  try {
    require(j.value("format", "") == "vcc-dataset", ErrorKind::io, "not a dataset manifest");
    for (const auto& name : j.at("classes")) {
      const std::string n = name.get<std::string>();
      const auto us = n.find('_');
      require(us != std::string::npos, ErrorKind::io, "bad class name " + n);
      d.classes.push_back({shape_from_string(n.substr(us + 1)), color_from_string(n.substr(0, us))});
    }
    for (const auto& [file, e] : j.at("files").items()) {
      DatasetEntry en;
      en.file = file;
      en.label = e.at("class");
      en.annotations.label = en.label;
      en.annotations.shape = shape_from_string(e.at("shape"));
      en.annotations.color = color_from_string(e.at("color"));
      en.annotations.texture = e.at("texture");
      en.annotations.shape_mask =
          decode_rle(e.at("mask_rle").get<std::vector<int>>(), e.at("mask_height"), e.at("mask_width"));
      d.entries.push_back(std::move(en));
    }
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::io, std::string("malformed dataset manifest: ") + e.what());
  }
  return d;
}

inline Tensor load_tensor_image(const fs::path& path) { return to_tensor(load_image(path)); }

// ------------------------------------------------------------- segment sets

/// Masked segment images as PNG plus lineage.json (ids, parents, layer-
/// resolution masks, per-parent split counts).
inline void save_segments(const fs::path& dir, const SegmentSet& set) {
  fs::create_directories(dir);
  Json segs = Json::array();
  for (const auto& [layer, records] : set.by_layer)
    for (const auto& r : records) {
      char name[64];
      std::snprintf(name, sizeof(name), "seg_%06d.png", r.id);
      save_image(dir / name, to_image(r.rgb));
      segs.push_back({{"id", r.id},
                      {"image", r.image},
                      {"layer", r.layer},
                      {"parent", r.parent},
                      {"file", name},
                      {"mask_height", r.mask.height},
                      {"mask_width", r.mask.width},
                      {"mask_rle", encode_rle(r.mask)}});
    }
  Json splits = Json::array();
  for (const auto& s : set.splits)
    splits.push_back({{"image", s.image}, {"layer", s.layer}, {"parent", s.parent}, {"gamma", s.gamma}});
  write_json(dir / "lineage.json",
             {{"format", "vcc-segments"}, {"version", 1}, {"taps", set.taps}, {"segments", segs}, {"splits", splits}});
}

inline SegmentSet load_segments(const fs::path& dir) {
  const Json j = read_json(dir / "lineage.json");
  SegmentSet set;
  try {
    require(j.value("format", "") == "vcc-segments", ErrorKind::io, "not a segment lineage file");
    set.taps = j.at("taps").get<std::vector<int>>();
    for (int t : set.taps) set.by_layer[t];
    for (const auto& e : j.at("segments")) {
      SegmentRecord r;
      r.id = e.at("id");
      r.image = e.at("image");
      r.layer = e.at("layer");
      r.parent = e.at("parent");
      r.mask = decode_rle(e.at("mask_rle").get<std::vector<int>>(), e.at("mask_height"), e.at("mask_width"));
      r.rgb = load_tensor_image(dir / e.at("file").get<std::string>());
      r.image_mask = upsample_mask(r.mask, r.rgb.dim(1), r.rgb.dim(2));
      set.by_layer[r.layer].push_back(std::move(r));
    }
    for (auto& [l, v] : set.by_layer)
      std::sort(v.begin(), v.end(), [](const SegmentRecord& a, const SegmentRecord& b) { return a.id < b.id; });
    for (const auto& e : j.at("splits")) set.splits.push_back({e.at("image"), e.at("layer"), e.at("parent"), e.at("gamma")});
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::io, std::string("malformed lineage file: ") + e.what());
  }
  return set;
}

// ---------------------------------------------------------------- VCC JSON

inline Json edge_json(const EdgeStat& e) {
  return {{"src", e.src}, {"dst", e.dst}, {"weight", e.weight}, {"p_value", e.p_value}, {"runs", e.runs}};
}

inline EdgeStat edge_from_json(const Json& j) {
  EdgeStat e;
  e.src = j.at("src");
  e.dst = j.at("dst");
  e.weight = j.at("weight");
  e.p_value = j.at("p_value");
  e.runs = j.at("runs").get<std::vector<double>>();
  e.significant = true;
  return e;
}

inline Json vcc_to_json(VCCGraph g) {
  canonicalize(g);
  Json layers = Json::array();
  for (const auto& l : g.layers) {
    Json concepts = Json::array();
    for (const auto& c : l.concepts)
      concepts.push_back({{"id", c.id}, {"centroid", c.centroid}, {"members", c.members}});
    layers.push_back({{"index", l.layer}, {"segment_count", l.segment_count}, {"concepts", concepts}});
  }
  Json edges = Json::array();
  for (const auto& e : g.edges) edges.push_back(edge_json(e));
  Json class_edges = Json::array();
  for (const auto& e : g.class_edges) class_edges.push_back(edge_json(e));
  return {{"model_hash", g.model_hash}, {"class", g.class_label}, {"seed", g.seed},     {"alpha", g.alpha},
          {"taps", g.taps},             {"layers", layers},       {"edges", edges},     {"class_edges", class_edges},
          {"config", g.config},         {"warnings", g.warnings}};
}

inline VCCGraph vcc_from_json(const Json& j) {
  VCCGraph g;
  try {
    g.model_hash = j.at("model_hash");
    g.class_label = j.at("class");
    g.seed = j.at("seed");
    g.alpha = j.value("alpha", 0.05);
    for (const auto& l : j.at("layers")) {
      ConceptLayer cl;
      cl.layer = l.at("index");
      cl.segment_count = l.value("segment_count", 0);
      for (const auto& c : l.at("concepts")) {
        Concept con;
        con.id = c.at("id");
        con.layer = cl.layer;
        con.centroid = c.at("centroid").get<std::vector<double>>();
        con.members = c.at("members").get<std::vector<int>>();
        cl.concepts.push_back(std::move(con));
      }
      g.layers.push_back(std::move(cl));
    }
    if (j.contains("taps")) {
      g.taps = j["taps"].get<std::vector<int>>();
    } else {
      for (const auto& l : g.layers) g.taps.push_back(l.layer);
    }
    for (const auto& e : j.at("edges")) g.edges.push_back(edge_from_json(e));
    for (const auto& e : j.at("class_edges")) g.class_edges.push_back(edge_from_json(e));
    if (j.contains("config")) g.config = j["config"].get<std::map<std::string, std::string>>();
    if (j.contains("warnings")) g.warnings = j["warnings"].get<std::vector<std::string>>();
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::io, std::string("malformed VCC JSON: ") + e.what());
  }
  return g;
}

inline std::string vcc_json_string(const VCCGraph& g) { return vcc_to_json(g).dump(1) + "\n"; }

inline void write_vcc_json(const fs::path& path, const VCCGraph& g) { write_text(path, vcc_json_string(g)); }

inline VCCGraph read_vcc_json(const fs::path& path) { return vcc_from_json(read_json(path)); }

// ---------------------------------------------------------------------- DOT

/// Layers bottom to top, one rank each, class node as the sink; pen width
/// grows linearly with edge weight.
inline std::string export_dot(const VCCGraph& g) {
  std::ostringstream o;
  auto pen = [](double w) { return format_double(0.5 + 4.5 * w); };
  o << "digraph vcc {\n  rankdir=BT;\n  node [shape=ellipse];\n";
  for (const auto& l : g.layers) {
    o << "  { rank=same; // layer " << l.layer << "\n";
    for (const auto& c : l.concepts) o << "    \"" << c.id << "\" [label=\"" << c.id << "\\nn=" << c.members.size() << "\"];\n";
    o << "  }\n";
  }
  o << "  { rank=sink; \"" << kClassNode << "\" [shape=doubleoctagon, label=\"class " << g.class_label << "\"]; }\n";
  for (const auto* list : {&g.edges, &g.class_edges})
    for (const auto& e : *list)
      o << "  \"" << e.src << "\" -> \"" << e.dst << "\" [penwidth=" << pen(e.weight) << ", label=\""
        << format_double(std::round(e.weight * 1000.0) / 1000.0) << "\"];\n";
  o << "}\n";
  return o.str();
}

}  // namespace vcc
