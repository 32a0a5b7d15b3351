#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "affkit/boxes.hpp"
#include "affkit/error.hpp"
#include "affkit/maskops.hpp"

namespace affkit {

/// Pixelwise F-beta per affordance class. This is the plain (unweighted)
/// F-measure, not the distance-weighted variant.
struct EvalConfig {
  double beta_squared = 0.3;
  std::vector<std::string> class_names{"grasp", "pound", "w-grasp", "contain"};  // labels 1..C
  double match_iou = 0.5;

  std::size_t num_classes() const { return class_names.size(); }

  void validate() const {
    detail::require(beta_squared > 0, "eval: beta_squared must be positive");
    detail::require(!class_names.empty(), "eval: need at least one class name");
    detail::require(match_iou > 0 && match_iou <= 1, "eval: match_iou must lie in (0, 1]");
  }
};

struct ClassScore {
  double precision = 0, recall = 0, f_beta = 0;
  bool in_gt = false;
  bool in_pred = false;
};

inline double f_beta(double precision, double recall, double beta_squared) {
  const double denom = beta_squared * precision + recall;
  return denom > 0 ? (1 + beta_squared) * precision * recall / denom : 0.0;
}

/// index c-1 holds class c. Both empty gives 1 across the board; exactly one
/// empty gives 0.
inline std::vector<ClassScore> f_beta_per_class(const LabelMask& pred, const LabelMask& gt,
                                                const EvalConfig& config) {
  config.validate();
  if (pred.width() != gt.width() || pred.height() != gt.height())
    throw ValidationError("f_beta_per_class: prediction and groundtruth differ in size");
  const std::size_t C = config.num_classes();
  std::vector<std::size_t> tp(C + 1, 0), npred(C + 1, 0), ngt(C + 1, 0);
  const auto p = pred.labels(), g = gt.labels();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= C) ++npred[p[i]];
    if (g[i] <= C) ++ngt[g[i]];
    if (p[i] == g[i] && p[i] <= C) ++tp[p[i]];
  }
  std::vector<ClassScore> out(C);
  for (std::size_t c = 1; c <= C; ++c) {
    ClassScore& s = out[c - 1];
    s.in_gt = ngt[c] > 0;
    s.in_pred = npred[c] > 0;
    if (!s.in_gt && !s.in_pred) {
      s.precision = s.recall = s.f_beta = 1.0;
    } else if (s.in_gt != s.in_pred) {
      s.precision = s.recall = s.f_beta = 0.0;
    } else {
      s.precision = double(tp[c]) / double(npred[c]);
      s.recall = double(tp[c]) / double(ngt[c]);
      s.f_beta = f_beta(s.precision, s.recall, config.beta_squared);
    }
  }
  return out;
}

struct ScoredBox {
  Box box;
  std::size_t object_class = 1;
  double score = 0;
};

/// Everything known about one evaluated image.
struct ImageRecord {
  LabelMask labels;
  std::vector<ScoredBox> boxes;  // detections for predictions, objects for groundtruth
};

struct ReportRow {
  std::string name;
  double precision = 0, recall = 0, f_beta = 0;
  std::size_t images = 0;
};

struct EvalReport {
  std::vector<ReportRow> classes;
  ReportRow average;
  std::optional<double> detection_recall;
  std::size_t objects = 0, objects_detected = 0;
  double beta_squared = 0.3;

  std::string to_csv() const {
    std::ostringstream os;
    os << "class,precision,recall,f_beta\n";
    char buf[256];
    for (const auto& r : classes) {
      std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f\n", r.name.c_str(), r.precision, r.recall, r.f_beta);
      os << buf;
    }
    std::snprintf(buf, sizeof buf, "average,%.6f,%.6f,%.6f\n", average.precision, average.recall, average.f_beta);
    os << buf;
    return os.str();
  }

  std::string to_table() const {
    std::ostringstream os;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-12s %10s %10s %10s %7s\n", "class", "precision", "recall", "F_beta", "images");
    os << buf;
    for (const auto& r : classes) {
      std::snprintf(buf, sizeof buf, "%-12s %10.4f %10.4f %10.4f %7zu\n", r.name.c_str(), r.precision,
                    r.recall, r.f_beta, r.images);
      os << buf;
    }
    std::snprintf(buf, sizeof buf, "%-12s %10.4f %10.4f %10.4f\n", "average", average.precision,
                  average.recall, average.f_beta);
    os << buf;
    std::snprintf(buf, sizeof buf, "(pixelwise F_beta, beta^2 = %g; not the weighted F_beta^w)\n", beta_squared);
    os << buf;
    if (detection_recall) {
      std::snprintf(buf, sizeof buf, "detection recall @ IoU 0.5: %.4f (%zu / %zu)\n", *detection_recall,
                    objects_detected, objects);
      os << buf;
    }
    return os.str();
  }
};

/// Greedy one-to-one matching by descending score, same class, IoU >= threshold.
inline std::size_t count_detected(const std::vector<ScoredBox>& detections,
                                  const std::vector<ScoredBox>& objects, double match_iou) {
  std::vector<std::size_t> order(detections.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });
  std::vector<char> taken(objects.size(), 0);
  std::size_t hit = 0;
  for (auto d : order) {
    double best = 0;
    std::optional<std::size_t> best_o;
    for (std::size_t o = 0; o < objects.size(); ++o) {
      if (taken[o] || objects[o].object_class != detections[d].object_class) continue;
      const double v = iou(detections[d].box, objects[o].box);
      if (v >= match_iou && v > best) {
        best = v;
        best_o = o;
      }
    }
    if (best_o) {
      taken[*best_o] = 1;
      ++hit;
    }
  }
  return hit;
}

/// Per-class scores are averaged over the images whose groundtruth contains
/// the class; the macro average is the mean over classes seen at least once.
/// Detection recall is reported when groundtruth objects are available.
inline EvalReport evaluate_dataset(const std::map<std::string, ImageRecord>& predictions,
                                   const std::map<std::string, ImageRecord>& groundtruth,
                                   const EvalConfig& config) {
  config.validate();
  std::vector<std::string> missing;
  for (const auto& [id, _] : groundtruth)
    if (!predictions.count(id)) missing.push_back(id);
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw ValidationError("evaluate_dataset: missing predictions for " + list);
  }
  const std::size_t C = config.num_classes();
  EvalReport report;
  report.beta_squared = config.beta_squared;
  report.classes.resize(C);
  for (std::size_t c = 0; c < C; ++c) report.classes[c].name = config.class_names[c];
  for (const auto& [id, gt] : groundtruth) {
    const ImageRecord& pred = predictions.at(id);
    const auto scores = f_beta_per_class(pred.labels, gt.labels, config);
    for (std::size_t c = 0; c < C; ++c) {
      if (!scores[c].in_gt) continue;
      auto& row = report.classes[c];
      row.precision += scores[c].precision;
      row.recall += scores[c].recall;
      row.f_beta += scores[c].f_beta;
      ++row.images;
    }
    report.objects += gt.boxes.size();
    report.objects_detected += count_detected(pred.boxes, gt.boxes, config.match_iou);
  }
  std::size_t seen = 0;
  for (auto& row : report.classes) {
    if (row.images == 0) continue;
    row.precision /= double(row.images);
    row.recall /= double(row.images);
    row.f_beta /= double(row.images);
    report.average.precision += row.precision;
    report.average.recall += row.recall;
    report.average.f_beta += row.f_beta;
    ++seen;
  }
  report.average.name = "average";
  if (seen > 0) {
    report.average.precision /= double(seen);
    report.average.recall /= double(seen);
    report.average.f_beta /= double(seen);
  }
  if (report.objects > 0) report.detection_recall = double(report.objects_detected) / double(report.objects);
  return report;
}

/// Row label for a mask size in the mask-size ablation table.
inline std::string ablation_row_name(std::size_t mask_size) {
  return mask_size == 244 ? "AffordanceNet" : "AffordanceNet" + std::to_string(mask_size);
}

}  // namespace affkit
