#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "affkit/data.hpp"
#include "affkit/error.hpp"
#include "affkit/eval.hpp"
#include "affkit/model.hpp"
#include "affkit/netpbm.hpp"

namespace affkit {

/// Everything a command needs, read from one flat `key = value` file.
struct RunConfig {
  ModelConfig model;
  SceneSpec scene;
  EvalConfig eval;
  std::uint64_t seed = 1;       // training sample order and RoI sampling
  std::uint64_t init_seed = 1;  // parameter initialisation
  std::size_t log_every = 100;

  void validate() const {
    model.validate();
    scene.validate();
    eval.validate();
    detail::require(eval.num_classes() == model.num_affordance_classes,
                    "config: eval class names must match model.num_affordance_classes");
    for (const auto& t : scene.templates) {
      detail::require(t.object_class >= 1 && t.object_class <= model.num_object_classes,
                      "config: template object class exceeds model.num_object_classes");
      detail::require(t.first_label <= model.num_affordance_classes &&
                          t.second_label <= model.num_affordance_classes,
                      "config: template label exceeds model.num_affordance_classes");
    }
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
std::string join(const std::vector<T>& v, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
  return out;
}

/// Stages as `k8s4p1,k8s4p1,k4s2p1` (kernel, stride, padding).
inline std::vector<DeconvSpec> parse_mask_head(const std::string& text) {
  std::vector<DeconvSpec> out;
  for (const auto& item : split(text, ',')) {
    DeconvSpec s;
    unsigned k = 0, st = 0, p = 0;
    char tail = 0;
    if (std::sscanf(item.c_str(), "k%us%up%u%c", &k, &st, &p, &tail) != 3)
      throw ValidationError("mask head stage '" + item + "' is not of the form k<kernel>s<stride>p<padding>");
    s.kernel_size = k;
    s.stride = st;
    s.padding = p;
    out.push_back(s);
  }
  return out;
}

inline std::string format_mask_head(const std::vector<DeconvSpec>& stages) {
  return join<DeconvSpec>(stages, [](const DeconvSpec& s) {
    return "k" + std::to_string(s.kernel_size) + "s" + std::to_string(s.stride) + "p" + std::to_string(s.padding);
  });
}

class KeyBinder {
 public:
  using Reader = std::function<void(const std::string&)>;
  using Writer = std::function<std::string()>;

  void bind(const std::string& key, Reader r, Writer w) {
    keys_.push_back(key);
    readers_[key] = std::move(r);
    writers_[key] = std::move(w);
  }

  template <typename T>
  void number(const std::string& key, T& ref) {
    bind(
        key, [&ref, key](const std::string& v) { ref = parse_number<T>(key, v); },
        [&ref]() {
          if constexpr (std::is_floating_point_v<T>) return format_double(ref);
          else return std::to_string(ref);
        });
  }

  void flag(const std::string& key, bool& ref) {
    bind(
        key,
        [&ref, key](const std::string& v) {
          if (v == "true" || v == "1") ref = true;
          else if (v == "false" || v == "0") ref = false;
          else throw ValidationError(key + ": expected true or false, got '" + v + "'");
        },
        [&ref]() { return std::string(ref ? "true" : "false"); });
  }

  template <typename T>
  void list(const std::string& key, std::vector<T>& ref) {
    bind(
        key,
        [&ref, key](const std::string& v) {
          ref.clear();
          for (const auto& item : split(v, ',')) ref.push_back(parse_number<T>(key, item));
        },
        [&ref]() {
          return join<T>(ref, [](const T& x) {
            if constexpr (std::is_floating_point_v<T>) return format_double(x);
            else return std::to_string(x);
          });
        });
  }

  bool has(const std::string& key) const { return readers_.count(key) > 0; }
  void read(const std::string& key, const std::string& value) const { readers_.at(key)(value); }
  const std::vector<std::string>& keys() const { return keys_; }
  std::string write(const std::string& key) const { return writers_.at(key)(); }

  template <typename T>
  static T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const char* end = v.data() + v.size();
    std::from_chars_result r;
    if constexpr (std::is_floating_point_v<T>) {
      r = std::from_chars(v.data(), end, out);
      if (r.ec == std::errc() && r.ptr == end && !std::isfinite(out))
        throw ValidationError(key + ": value must be finite");
    } else {
      r = std::from_chars(v.data(), end, out);
    }
    if (v.empty() || r.ec != std::errc() || r.ptr != end)
      throw ValidationError(key + ": cannot parse '" + v + "' as a number");
    return out;
  }

 private:
  std::vector<std::string> keys_;
  std::map<std::string, Reader> readers_;
  std::map<std::string, Writer> writers_;
};

inline KeyBinder bind_keys(RunConfig& c) {
  KeyBinder b;
  ModelConfig& m = c.model;
  TrainConfig& t = m.train;
  InferConfig& inf = m.infer;
  b.number("model.num_object_classes", m.num_object_classes);
  b.number("model.num_affordance_classes", m.num_affordance_classes);
  b.list("model.backbone_widths", m.backbone_widths);
  b.number("model.rpn_width", m.rpn_width);
  b.number("model.fc_width", m.fc_width);
  b.number("model.roi_size", m.roi_size);
  b.bind(
      "model.mask_head", [&m](const std::string& v) { m.mask_head = parse_mask_head(v); },
      [&m]() { return format_mask_head(m.mask_head); });
  b.number("model.mask_width", m.mask_width);
  b.number("model.mask_conv_kernel", m.mask_conv_kernel);
  b.number("model.mask_alpha", m.mask_alpha);

  b.list("anchors.scales", m.anchors.scales);
  b.list("anchors.ratios", m.anchors.ratios);

  b.number("rpn.pos_iou", t.rpn_targets.pos_iou);
  b.number("rpn.neg_iou", t.rpn_targets.neg_iou);
  b.number("rpn.batch_size", t.rpn_targets.batch_size);
  b.number("rpn.pos_fraction", t.rpn_targets.pos_fraction);
  b.number("rpn.pre_nms_top_n", t.rpn_pre_nms_top_n);
  b.number("rpn.nms_iou", t.rpn_nms_iou);
  b.number("rpn.min_size", t.rpn_min_size);
  b.number("rpn.weight", t.rpn_weight);

  b.number("train.lr", t.lr);
  b.number("train.lr_factor", t.lr_factor);
  b.number("train.lr_step", t.lr_step);
  b.number("train.iterations", t.iterations);
  b.number("train.momentum", t.momentum);
  b.number("train.weight_decay", t.weight_decay);
  b.number("train.clip_norm", t.clip_norm);
  b.number("train.mask_lr_mult", t.mask_lr_mult);
  b.number("train.k_train", t.roi_sampling.k_train);
  b.number("train.batch_size", t.roi_sampling.batch_size);
  b.number("train.fg_iou", t.roi_sampling.fg_iou);
  b.number("train.bg_iou", t.roi_sampling.bg_iou);
  b.number("train.negatives_per_positive", t.roi_sampling.negatives_per_positive);
  b.flag("train.gt_as_proposals", t.gt_as_proposals);
  b.number("train.weight_cls", t.weights.cls);
  b.number("train.weight_loc", t.weights.loc);
  b.number("train.weight_aff", t.weights.aff);
  b.number("train.seed", c.seed);
  b.number("train.init_seed", c.init_seed);
  b.number("train.log_every", c.log_every);

  b.number("infer.k_infer", inf.k_infer);
  b.number("infer.pre_nms_top_n", inf.rpn_pre_nms_top_n);
  b.number("infer.rpn_nms_iou", inf.rpn_nms_iou);
  b.number("infer.nms_iou", inf.nms_iou);
  b.number("infer.score_gate", inf.score_gate);
  b.number("infer.max_detections", inf.max_detections);
  b.list("infer.priority", inf.priority.order);
  b.flag("infer.unlisted_first", inf.priority.unlisted_first);

  b.number("eval.beta_squared", c.eval.beta_squared);
  b.number("eval.match_iou", c.eval.match_iou);
  b.bind(
      "eval.class_names", [&c](const std::string& v) { c.eval.class_names = split(v, ','); },
      [&c]() { return join<std::string>(c.eval.class_names, [](const std::string& s) { return s; }); });

  b.number("data.image_w", c.scene.image_w);
  b.number("data.image_h", c.scene.image_h);
  b.number("data.min_objects", c.scene.min_objects);
  b.number("data.max_objects", c.scene.max_objects);
  b.number("data.margin", c.scene.margin);
  b.number("data.seed", c.scene.seed);
  return b;
}

}  // namespace detail

/// Parses `key = value` lines; `#` starts a comment. Unknown or repeated keys
/// are rejected with the line number. The result is validated.
inline RunConfig parse_config(const std::string& text, const std::string& source = "<config>",
                              RunConfig base = {}) {
  RunConfig c = std::move(base);
  auto binder = detail::bind_keys(c);
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto where = source + ":" + std::to_string(lineno) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError(where + "expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (!binder.has(key)) throw ValidationError(where + "unknown key '" + key + "'");
    if (seen.count(key))
      throw ValidationError(where + "duplicate key '" + key + "' (first set on line " +
                            std::to_string(seen[key]) + ")");
    seen[key] = lineno;
    try {
      binder.read(key, value);
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    }
  }
  try {
    c.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(source + ": " + e.what());
  }
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  return parse_config(read_file_bytes(path), path.string());
}

/// Every key with its current value; parse_config of the result reproduces `c`.
inline std::string config_to_text(const RunConfig& c) {
  RunConfig copy = c;
  auto binder = detail::bind_keys(copy);
  std::string out;
  for (const auto& key : binder.keys()) out += key + " = " + binder.write(key) + "\n";
  return out;
}

}  // namespace affkit
