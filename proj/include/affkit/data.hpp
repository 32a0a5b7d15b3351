#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "affkit/boxes.hpp"
#include "affkit/error.hpp"
#include "affkit/maskops.hpp"
#include "affkit/netpbm.hpp"
#include "affkit/rng.hpp"
#include "affkit/tensor.hpp"

namespace affkit {

// ---------------------------------------------------------------------------
// Annotations
// ---------------------------------------------------------------------------

struct AnnotatedObject {
  Box bbox;
  std::size_t object_class = 1;
  std::filesystem::path mask;  // full-image PGM holding only this object's labels
};

struct Annotation {
  std::string id;
  std::filesystem::path image;
  std::vector<AnnotatedObject> objects;
};

/// Tight box of the non-background pixels in half-open pixel extents, or
/// nullopt for an all-background mask.
inline std::optional<Box> tight_box(const LabelMask& mask) {
  std::size_t x0 = mask.width(), y0 = mask.height(), x1 = 0, y1 = 0;
  bool any = false;
  for (std::size_t y = 0; y < mask.height(); ++y)
    for (std::size_t x = 0; x < mask.width(); ++x)
      if (mask.at(x, y) != 0) {
        any = true;
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x + 1);
        y1 = std::max(y1, y + 1);
      }
  if (!any) return std::nullopt;
  return Box{double(x0), double(y0), double(x1), double(y1)};
}

/// Each non-background label forms a single 4-connected region.
inline bool label_regions_connected(const LabelMask& mask) {
  const std::size_t w = mask.width(), h = mask.height();
  std::vector<char> seen(w * h, 0);
  std::array<bool, 256> visited_label{};
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < w * h; ++start) {
    const std::uint8_t label = mask.labels()[start];
    if (label == 0 || seen[start]) continue;
    if (visited_label[label]) return false;
    visited_label[label] = true;
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const std::size_t x = i % w, y = i / w;
      auto visit = [&](std::size_t j) {
        if (!seen[j] && mask.labels()[j] == label) {
          seen[j] = 1;
          stack.push_back(j);
        }
      };
      if (x > 0) visit(i - 1);
      if (x + 1 < w) visit(i + 1);
      if (y > 0) visit(i - w);
      if (y + 1 < h) visit(i + w);
    }
  }
  return true;
}

struct AnnotationLimits {
  std::size_t num_object_classes = 2;
  std::size_t num_affordance_classes = 4;
};

inline std::string image_id_of(const std::filesystem::path& p) { return p.stem().string(); }

/// Strict JSONL manifest reader. Paths are resolved against the manifest's
/// directory; every mask is loaded and checked against its bbox.
inline std::vector<Annotation> load_annotations(const std::filesystem::path& manifest_path,
                                                const AnnotationLimits& limits = {}) {
  std::ifstream is(manifest_path);
  if (!is) throw ValidationError("cannot open manifest " + manifest_path.string());
  const auto base = manifest_path.parent_path();
  std::vector<Annotation> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = manifest_path.string() + ":" + std::to_string(line_no);
    auto fail = [&](const std::string& what) -> void { throw FormatError(where + ": " + what, line_no); };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("image") || !j["image"].is_string() || !j.contains("objects") ||
        !j["objects"].is_array())
      fail("expected {\"image\": str, \"objects\": [...]}");
    for (auto it = j.begin(); it != j.end(); ++it)
      if (it.key() != "image" && it.key() != "objects") fail("unknown key '" + it.key() + "'");
    Annotation a;
    a.image = base / j["image"].get<std::string>();
    a.id = image_id_of(a.image);
    if (!std::filesystem::exists(a.image)) fail("missing image file " + a.image.string());
    for (const auto& o : j["objects"]) {
      if (!o.is_object() || !o.contains("bbox") || !o.contains("class") || !o.contains("mask") ||
          o.size() != 3)
        fail("object needs exactly bbox, class and mask");
      if (!o["bbox"].is_array() || o["bbox"].size() != 4) fail("bbox must be [x1,y1,x2,y2]");
      for (const auto& v : o["bbox"])
        if (!v.is_number()) fail("bbox entries must be numbers");
      if (!o["class"].is_number_integer()) fail("class must be an integer");
      if (!o["mask"].is_string()) fail("mask must be a path string");
      AnnotatedObject obj;
      obj.bbox = {o["bbox"][0].get<double>(), o["bbox"][1].get<double>(), o["bbox"][2].get<double>(),
                  o["bbox"][3].get<double>()};
      const auto cls = o["class"].get<long>();
      if (cls < 1 || static_cast<std::size_t>(cls) > limits.num_object_classes)
        fail("class " + std::to_string(cls) + " outside 1.." + std::to_string(limits.num_object_classes));
      obj.object_class = static_cast<std::size_t>(cls);
      obj.mask = base / o["mask"].get<std::string>();
      if (!std::filesystem::exists(obj.mask)) fail("missing mask file " + obj.mask.string());
      LabelMask mask;
      try {
        mask = read_mask(obj.mask, limits.num_affordance_classes);
      } catch (const ValidationError& e) {
        fail(e.what());
      }
      const auto tb = tight_box(mask);
      if (!tb || !(*tb == obj.bbox)) fail("bbox does not match the tight box of " + obj.mask.string());
      a.objects.push_back(std::move(obj));
    }
    out.push_back(std::move(a));
  }
  return out;
}

inline std::string annotation_to_json_line(const Annotation& a, const std::filesystem::path& base) {
  nlohmann::json j;
  j["image"] = std::filesystem::relative(a.image, base).generic_string();
  j["objects"] = nlohmann::json::array();
  for (const auto& o : a.objects) {
    nlohmann::json jo;
    jo["bbox"] = {o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2};
    jo["class"] = o.object_class;
    jo["mask"] = std::filesystem::relative(o.mask, base).generic_string();
    j["objects"].push_back(jo);
  }
  return j.dump();
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<Annotation>& annotations) {
  std::string text;
  for (const auto& a : annotations) text += annotation_to_json_line(a, path.parent_path()) + "\n";
  write_file_atomic(path, text);
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

struct IntRange {
  int lo = 0, hi = 0;  // inclusive
  double mean() const { return 0.5 * (lo + hi); }
};

enum class TemplateKind { tool, cup };

/// tool: a handle bar (first label) with a head block (second label) on one end.
/// cup: a rectangular ring body (first label) around its interior (second label).
struct ObjectTemplate {
  std::string name;
  TemplateKind kind = TemplateKind::tool;
  std::size_t object_class = 1;
  std::uint8_t first_label = 1;
  std::uint8_t second_label = 2;
  // tool: handle length / thickness, head length (along the handle) / breadth
  // cup: outer width / outer height, wall thickness (3rd range), 4th unused
  IntRange a, b, c, d;
};

inline std::vector<ObjectTemplate> default_templates() {
  return {
      {"tool", TemplateKind::tool, 1, 1, 2, {14, 26}, {4, 7}, {7, 11}, {11, 16}},
      {"cup", TemplateKind::cup, 2, 3, 4, {16, 28}, {16, 28}, {3, 5}, {0, 0}},
  };
}

/// Affordance names for the default templates, indexed by label.
inline std::vector<std::string> default_affordance_names() {
  return {"background", "grasp", "pound", "w-grasp", "contain"};
}

struct SceneSpec {
  std::size_t image_w = 96, image_h = 96;
  std::vector<ObjectTemplate> templates = default_templates();
  std::size_t min_objects = 1, max_objects = 3;
  std::size_t margin = 2;
  std::size_t max_attempts = 500;
  std::uint64_t seed = 1;

  void validate() const {
    detail::require(image_w >= 16 && image_h >= 16, "scene: image must be at least 16x16");
    detail::require(!templates.empty(), "scene: no object templates");
    detail::require(min_objects >= 1 && min_objects <= max_objects, "scene: need 1 <= min_objects <= max_objects");
    for (const auto& t : templates) {
      detail::require(t.first_label >= 1 && t.second_label >= 1 && t.first_label != t.second_label,
                      "scene: template labels must be distinct and >= 1");
      detail::require(t.a.lo >= 1 && t.a.lo <= t.a.hi && t.b.lo >= 1 && t.b.lo <= t.b.hi &&
                          t.c.lo >= 1 && t.c.lo <= t.c.hi,
                      "scene: template size ranges must be positive and ordered");
      if (t.kind == TemplateKind::tool)
        detail::require(t.d.lo >= 1 && t.d.lo <= t.d.hi, "scene: tool head breadth range invalid");
      if (t.kind == TemplateKind::cup)
        detail::require(std::min(t.a.lo, t.b.lo) > 2 * t.c.hi, "scene: cup walls leave no interior");
    }
  }
};

/// An object drawn in its own local frame: label grid plus size.
struct ObjectShape {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> labels;
};

inline ObjectShape draw_template(const ObjectTemplate& t, Rng& rng) {
  auto pick = [&](const IntRange& r) { return static_cast<std::size_t>(rng.uniform_int(r.lo, r.hi)); };
  ObjectShape s;
  if (t.kind == TemplateKind::tool) {
    const std::size_t handle_len = pick(t.a), thick = pick(t.b), head_len = pick(t.c);
    const std::size_t head_breadth = std::max(pick(t.d), thick + 2);
    const bool vertical = rng.uniform_int(0, 1) == 1;
    const bool head_first = rng.uniform_int(0, 1) == 1;
    // Lay out horizontally, transpose if vertical.
    const std::size_t len = handle_len + head_len, breadth = head_breadth;
    std::vector<std::uint8_t> grid(len * breadth, 0);
    const std::size_t handle_off = (breadth - thick) / 2;
    for (std::size_t x = 0; x < len; ++x) {
      const bool in_head = head_first ? x < head_len : x >= handle_len;
      for (std::size_t y = 0; y < breadth; ++y) {
        if (in_head) grid[y * len + x] = t.second_label;
        else if (y >= handle_off && y < handle_off + thick) grid[y * len + x] = t.first_label;
      }
    }
    if (!vertical) {
      s = {len, breadth, std::move(grid)};
    } else {
      s.width = breadth;
      s.height = len;
      s.labels.assign(len * breadth, 0);
      for (std::size_t y = 0; y < breadth; ++y)
        for (std::size_t x = 0; x < len; ++x) s.labels[x * breadth + y] = grid[y * len + x];
    }
  } else {
    const std::size_t w = pick(t.a), h = pick(t.b), wall = pick(t.c);
    s.width = w;
    s.height = h;
    s.labels.assign(w * h, t.first_label);
    for (std::size_t y = wall; y + wall < h; ++y)
      for (std::size_t x = wall; x + wall < w; ++x) s.labels[y * w + x] = t.second_label;
  }
  return s;
}

struct GeneratedScene {
  std::string id;
  Image image;
  LabelMask labels;  // full scene
  std::vector<std::size_t> object_classes;
  std::vector<LabelMask> object_masks;  // full-image, one per object
  std::vector<Box> boxes;
};

namespace detail {

inline std::array<std::uint8_t, 3> label_base_color(std::uint8_t label) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 8> colors{{
      {128, 128, 128}, {200, 70, 60}, {60, 90, 200}, {60, 170, 80},
      {220, 200, 70},  {170, 80, 190}, {70, 190, 200}, {230, 140, 60}}};
  return colors[label % colors.size()];
}

inline std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace detail

/// One scene. Objects never overlap (boxes are at least `margin` apart).
inline GeneratedScene generate_scene(const SceneSpec& spec, std::size_t index) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, index));
  GeneratedScene scene;
  char id[32];
  std::snprintf(id, sizeof id, "scene_%05zu", index);
  scene.id = id;
  scene.labels = LabelMask(spec.image_w, spec.image_h);
  const auto count = static_cast<std::size_t>(
      rng.uniform_int(static_cast<long>(spec.min_objects), static_cast<long>(spec.max_objects)));

  struct Placed {
    std::size_t x, y, tpl;
    ObjectShape shape;
  };
  std::vector<Placed> placed;
  for (std::size_t k = 0; k < count; ++k) {
    const auto tpl = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(spec.templates.size()) - 1));
    ObjectShape shape = draw_template(spec.templates[tpl], rng);
    bool ok = false;
    for (std::size_t attempt = 0; attempt < spec.max_attempts && !ok; ++attempt) {
      if (shape.width + 2 > spec.image_w || shape.height + 2 > spec.image_h) break;
      const auto x = static_cast<std::size_t>(rng.uniform_int(1, static_cast<long>(spec.image_w - shape.width - 1)));
      const auto y = static_cast<std::size_t>(rng.uniform_int(1, static_cast<long>(spec.image_h - shape.height - 1)));
      ok = true;
      for (const auto& p : placed) {
        const long m = static_cast<long>(spec.margin);
        const bool apart = long(x) >= long(p.x + p.shape.width) + m || long(p.x) >= long(x + shape.width) + m ||
                           long(y) >= long(p.y + p.shape.height) + m || long(p.y) >= long(y + shape.height) + m;
        if (!apart) {
          ok = false;
          break;
        }
      }
      if (ok) placed.push_back({x, y, tpl, std::move(shape)});
    }
    if (!ok)
      throw Error("generate_scene: could not place object " + std::to_string(k) + " of " + scene.id +
                  " after " + std::to_string(spec.max_attempts) + " attempts");
  }

  // Background: a flat colour with per-pixel noise.
  scene.image = Image(spec.image_w, spec.image_h, 3);
  std::array<double, 3> bg{};
  for (auto& c : bg) c = rng.uniform(70, 150);
  for (std::size_t y = 0; y < spec.image_h; ++y)
    for (std::size_t x = 0; x < spec.image_w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        scene.image.at(x, y, c) = detail::clamp_u8(bg[c] + rng.uniform(-12, 12));

  for (const auto& p : placed) {
    const ObjectTemplate& t = spec.templates[p.tpl];
    LabelMask obj(spec.image_w, spec.image_h);
    std::array<std::array<double, 3>, 2> color{};
    for (int part = 0; part < 2; ++part) {
      const auto base = detail::label_base_color(part == 0 ? t.first_label : t.second_label);
      for (std::size_t c = 0; c < 3; ++c) color[part][c] = base[c] + rng.uniform(-25, 25);
    }
    for (std::size_t y = 0; y < p.shape.height; ++y)
      for (std::size_t x = 0; x < p.shape.width; ++x) {
        const std::uint8_t label = p.shape.labels[y * p.shape.width + x];
        if (label == 0) continue;
        obj.at(p.x + x, p.y + y) = label;
        scene.labels.at(p.x + x, p.y + y) = label;
        const auto& col = color[label == t.first_label ? 0 : 1];
        for (std::size_t c = 0; c < 3; ++c)
          scene.image.at(p.x + x, p.y + y, c) = detail::clamp_u8(col[c] + rng.uniform(-8, 8));
      }
    if (!label_regions_connected(obj))
      throw Error("generate_scene: template produced a disconnected affordance region");
    scene.boxes.push_back(*tight_box(obj));
    scene.object_classes.push_back(t.object_class);
    scene.object_masks.push_back(std::move(obj));
  }
  return scene;
}

/// Layout: images/<id>.ppm, masks/<id>_<k>.pgm, labels/<id>.pgm, manifest.jsonl.
inline std::vector<Annotation> generate_synthetic_dataset(const SceneSpec& spec, std::size_t count,
                                                          const std::filesystem::path& output_dir) {
  spec.validate();
  std::filesystem::create_directories(output_dir);
  std::vector<Annotation> manifest;
  for (std::size_t i = 0; i < count; ++i) {
    const GeneratedScene scene = generate_scene(spec, i);
    Annotation a;
    a.id = scene.id;
    a.image = output_dir / "images" / (scene.id + ".ppm");
    write_image(a.image, scene.image);
    write_mask(output_dir / "labels" / (scene.id + ".pgm"), scene.labels);
    for (std::size_t k = 0; k < scene.object_masks.size(); ++k) {
      AnnotatedObject o;
      o.bbox = scene.boxes[k];
      o.object_class = scene.object_classes[k];
      o.mask = output_dir / "masks" / (scene.id + "_" + std::to_string(k) + ".pgm");
      write_mask(o.mask, scene.object_masks[k]);
      a.objects.push_back(std::move(o));
    }
    manifest.push_back(std::move(a));
  }
  write_manifest(output_dir / "manifest.jsonl", manifest);
  return manifest;
}

// ---------------------------------------------------------------------------
// Network input
// ---------------------------------------------------------------------------

struct ResizedImage {
  Image image;
  double scale = 1.0;
};

inline Image resize_image(const Image& img, std::size_t new_w, std::size_t new_h) {
  Image out(new_w, new_h, img.channels);
  std::vector<double> plane(img.width * img.height);
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t i = 0; i < plane.size(); ++i) plane[i] = img.pixels[i * img.channels + c];
    const auto r = bilinear_resize(plane, img.width, img.height, new_w, new_h);
    for (std::size_t i = 0; i < r.size(); ++i) out.pixels[i * img.channels + c] = detail::clamp_u8(r[i]);
  }
  return out;
}

/// Shorter edge to `shorter_target` unless the longer edge would exceed
/// `longer_cap`, in which case the longer edge becomes `longer_cap`.
inline ResizedImage resize_for_network(const Image& img, double shorter_target = 600,
                                       double longer_cap = 1000) {
  detail::require(img.width > 0 && img.height > 0, "resize_for_network: empty image");
  const double shorter = static_cast<double>(std::min(img.width, img.height));
  const double longer = static_cast<double>(std::max(img.width, img.height));
  double scale = shorter_target / shorter;
  if (longer * scale > longer_cap) scale = longer_cap / longer;
  if (scale == 1.0) return {img, 1.0};
  const auto w = static_cast<std::size_t>(std::max(1L, std::lround(img.width * scale)));
  const auto h = static_cast<std::size_t>(std::max(1L, std::lround(img.height * scale)));
  return {resize_image(img, w, h), scale};
}

/// (1, 3, H, W) float tensor scaled to roughly [-1, 1].
inline Tensor<float> image_to_tensor(const Image& img) {
  detail::require(img.channels == 3 || img.channels == 1, "image_to_tensor: need 1 or 3 channels");
  Tensor<float> t({1, 3, img.height, img.width});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) {
        const std::uint8_t v = img.at(x, y, img.channels == 3 ? c : 0);
        t.at(0, c, y, x) = static_cast<float>(v) / 127.5f - 1.0f;
      }
  return t;
}

}  // namespace affkit
