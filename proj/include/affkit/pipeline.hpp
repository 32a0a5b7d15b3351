#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <vector>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

#include <json.hpp>

#include "affkit/checkpoint.hpp"
#include "affkit/config.hpp"
#include "affkit/data.hpp"
#include "affkit/eval.hpp"
#include "affkit/model.hpp"
#include "affkit/netpbm.hpp"

namespace affkit {

/// Flushes denormals to zero on the calling thread.
inline void enable_flush_to_zero() {
#if defined(__SSE__)
  _mm_setcsr(_mm_getcsr() | 0x8040);
#endif
}

/// One annotated scene loaded into memory.
struct LoadedScene {
  std::string id;
  Image image;
  TrainingExample example;
  LabelMask labels;  // scene label map, when the dataset provides one
};

/// Reads manifest.jsonl under `dir` with its images and per-object masks.
/// Scenes are returned sorted by id.
inline std::vector<LoadedScene> load_dataset(const std::filesystem::path& dir, const RunConfig& run) {
  const auto manifest = dir / "manifest.jsonl";
  if (!std::filesystem::exists(manifest)) throw ValidationError("no manifest.jsonl in " + dir.string());
  const auto annotations =
      load_annotations(manifest, {run.model.num_object_classes, run.model.num_affordance_classes});
  std::vector<LoadedScene> out;
  for (const auto& a : annotations) {
    LoadedScene s;
    s.id = a.id;
    s.image = read_image(a.image);
    if (s.image.channels != 3) throw ValidationError(a.image.string() + ": expected a PPM (P6) image");
    s.example.image = image_to_tensor(s.image);
    s.labels = LabelMask(s.image.width, s.image.height);
    for (const auto& o : a.objects) {
      LabelMask m = read_mask(o.mask, run.model.num_affordance_classes);
      if (m.width() != s.image.width || m.height() != s.image.height)
        throw ValidationError(o.mask.string() + ": mask size differs from its image");
      for (std::size_t i = 0; i < m.labels().size(); ++i)
        if (m.labels()[i]) s.labels.labels()[i] = m.labels()[i];
      s.example.objects.push_back({o.bbox, o.object_class});
      s.example.masks.push_back(std::move(m));
    }
    const auto label_file = dir / "labels" / (a.id + ".pgm");
    if (std::filesystem::exists(label_file)) s.labels = read_mask(label_file, run.model.num_affordance_classes);
    out.push_back(std::move(s));
  }
  std::sort(out.begin(), out.end(), [](const LoadedScene& a, const LoadedScene& b) { return a.id < b.id; });
  return out;
}

struct TrainLogRow {
  std::size_t iteration = 0;
  LossReport loss;
};

/// SGD over the scenes for `iterations` steps, one image per step, visiting
/// scenes in an order reshuffled every epoch.
inline void train_model(Model& model, const std::vector<LoadedScene>& scenes, std::size_t iterations,
                        std::uint64_t seed, const std::function<void(const TrainLogRow&)>& on_step = {}) {
  if (scenes.empty()) throw ValidationError("train: the dataset is empty");
  std::vector<std::size_t> order(scenes.size());
  std::size_t epoch = 0, cursor = order.size();
  const std::size_t start = model.iteration();
  for (std::size_t step = 0; step < iterations; ++step) {
    if (cursor == order.size()) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng rng(derive_seed(seed, 0x5eed0000 + epoch++));
      rng.shuffle(order);
      cursor = 0;
    }
    const std::size_t it = start + step;
    const LossReport r = model.train_step(scenes[order[cursor++]].example, derive_seed(seed, it));
    if (on_step) on_step({it, r});
  }
}

inline std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("AFFKIT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ValidationError("AFFKIT_THREADS must be a positive integer");
    n = std::min<std::size_t>(n, static_cast<std::size_t>(v));
  }
  return n;
}

/// Inference over many images on a small worker pool; results keep input order.
inline std::vector<InferenceResult> infer_all(const Model& model, const std::vector<Tensor<float>>& images) {
  std::vector<InferenceResult> results(images.size());
  const std::size_t workers = std::min(worker_count(), std::max<std::size_t>(1, images.size()));
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  auto work = [&](std::size_t w) {
    enable_flush_to_zero();
    try {
      for (std::size_t i; (i = next.fetch_add(1)) < images.size();) results[i] = model.infer(images[i]);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

/// Fixed diagnostic palette indexed by affordance label.
inline std::array<std::uint8_t, 3> palette_color(std::uint8_t label) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 8> colors{{
      {0, 0, 0}, {230, 25, 75}, {60, 180, 75}, {255, 225, 25}, {0, 130, 200},
      {245, 130, 48}, {145, 30, 180}, {70, 240, 240},
  }};
  return colors[label % colors.size()];
}

/// Labelled pixels are blended 50/50 with their palette colour; background is left as is.
inline Image render_overlay(const Image& image, const LabelMask& labels) {
  Image out = image;
  if (out.channels == 1) {
    out = Image(image.width, image.height, 3);
    for (std::size_t i = 0; i < image.width * image.height; ++i)
      for (std::size_t c = 0; c < 3; ++c) out.pixels[i * 3 + c] = image.pixels[i];
  }
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x) {
      const std::uint8_t l = labels.at(x, y);
      if (l == 0) continue;
      const auto col = palette_color(l);
      for (std::size_t c = 0; c < 3; ++c)
        out.at(x, y, c) = static_cast<std::uint8_t>((out.at(x, y, c) + col[c] + 1) / 2);
    }
  return out;
}

inline std::string detections_json_line(const std::string& id, const InferenceResult& r) {
  nlohmann::json j;
  j["image"] = id;
  j["detections"] = nlohmann::json::array();
  for (const auto& d : r.detections) {
    nlohmann::json jd;
    jd["bbox"] = {d.box.x1, d.box.y1, d.box.x2, d.box.y2};
    jd["class"] = d.object_class;
    jd["score"] = d.score;
    j["detections"].push_back(jd);
  }
  return j.dump();
}

/// Writes detections.jsonl, labels/<id>.pgm and overlays/<id>.ppm under `out`.
inline void write_inference_outputs(const std::filesystem::path& out, const std::vector<std::string>& ids,
                                    const std::vector<Image>& images, const std::vector<InferenceResult>& results) {
  std::string jsonl;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    jsonl += detections_json_line(ids[i], results[i]) + "\n";
    write_mask(out / "labels" / (ids[i] + ".pgm"), results[i].merged);
    write_image(out / "overlays" / (ids[i] + ".ppm"), render_overlay(images[i], results[i].merged));
  }
  write_file_atomic(out / "detections.jsonl", jsonl);
}

/// Detections per image id from a detections.jsonl file.
inline std::map<std::string, std::vector<ScoredBox>> read_detections(const std::filesystem::path& path) {
  std::map<std::string, std::vector<ScoredBox>> out;
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open " + path.string());
  std::string line;
  std::size_t no = 0;
  while (std::getline(is, line)) {
    ++no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      auto& dets = out[j.at("image").get<std::string>()];
      for (const auto& d : j.at("detections")) {
        const auto& b = d.at("bbox");
        dets.push_back({{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()},
                        d.at("class").get<std::size_t>(), d.at("score").get<double>()});
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(no) + ": " + e.what(), no);
    }
  }
  return out;
}

/// Image records for a directory: labels/*.pgm plus boxes from detections.jsonl
/// (predictions) or manifest.jsonl (groundtruth) when present.
inline std::map<std::string, ImageRecord> load_label_directory(const std::filesystem::path& dir,
                                                               std::size_t num_affordance_classes,
                                                               std::size_t num_object_classes) {
  const auto labels_dir = dir / "labels";
  if (!std::filesystem::is_directory(labels_dir)) throw ValidationError("no labels/ directory in " + dir.string());
  std::map<std::string, ImageRecord> out;
  for (const auto& entry : std::filesystem::directory_iterator(labels_dir)) {
    if (entry.path().extension() != ".pgm") continue;
    out[entry.path().stem().string()].labels = read_mask(entry.path(), num_affordance_classes);
  }
  if (std::filesystem::exists(dir / "detections.jsonl")) {
    for (auto& [id, boxes] : read_detections(dir / "detections.jsonl"))
      if (out.count(id)) out[id].boxes = std::move(boxes);
  } else if (std::filesystem::exists(dir / "manifest.jsonl")) {
    for (const auto& a : load_annotations(dir / "manifest.jsonl", {num_object_classes, num_affordance_classes}))
      if (out.count(a.id))
        for (const auto& o : a.objects) out[a.id].boxes.push_back({o.bbox, o.object_class, 1.0});
  }
  return out;
}

inline EvalReport evaluate_directories(const std::filesystem::path& pred, const std::filesystem::path& gt,
                                       const RunConfig& run) {
  auto p = load_label_directory(pred, run.model.num_affordance_classes, run.model.num_object_classes);
  auto g = load_label_directory(gt, run.model.num_affordance_classes, run.model.num_object_classes);
  const bool pred_has_boxes = std::filesystem::exists(pred / "detections.jsonl");
  if (!pred_has_boxes)
    for (auto& [id, rec] : g) rec.boxes.clear();
  return evaluate_dataset(p, g, run.eval);
}

/// In-memory evaluation of inference results against loaded scenes.
inline EvalReport evaluate_results(const std::vector<LoadedScene>& scenes, const std::vector<InferenceResult>& results,
                                   const EvalConfig& config) {
  std::map<std::string, ImageRecord> pred, gt;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    ImageRecord p{results[i].merged, {}}, g{scenes[i].labels, {}};
    for (const auto& d : results[i].detections) p.boxes.push_back({d.box, d.object_class, d.score});
    for (const auto& o : scenes[i].example.objects) g.boxes.push_back({o.box, o.object_class, 1.0});
    pred[scenes[i].id] = std::move(p);
    gt[scenes[i].id] = std::move(g);
  }
  return evaluate_dataset(pred, gt, config);
}

/// Mask-head stages for the mask-size ablation: 14 (one k4s2p1 stage),
/// 28 (k6s4p1), 56 (k6s4p1, k4s2p1), 112 (k6s4p1, k4s2p1, k4s2p1) and the
/// default 244 chain.
inline std::vector<DeconvSpec> ablation_mask_head(std::size_t mask_size) {
  const DeconvSpec s2{4, 2, 1, 0, 0}, s4{6, 4, 1, 0, 0}, s4k8{8, 4, 1, 0, 0};
  switch (mask_size) {
    case 14: return {s2};
    case 28: return {s4};
    case 56: return {s4, s2};
    case 112: return {s4, s2, s2};
    case 244: return {s4k8, s4k8, s2};
    default: throw ValidationError("ablation: unsupported mask size " + std::to_string(mask_size) +
                                   " (choose from 14, 28, 56, 112, 244)");
  }
}

struct AblationRow {
  std::size_t mask_size = 0;
  std::string name;
  EvalReport report;
};

/// Trains one model per mask size from the same initial seed and evaluates each on `test`.
inline std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<LoadedScene>& train,
                                             const std::vector<LoadedScene>& test,
                                             const std::vector<std::size_t>& mask_sizes, std::size_t iterations,
                                             const std::function<void(std::size_t, const TrainLogRow&)>& on_step = {}) {
  std::vector<AblationRow> rows;
  std::vector<Tensor<float>> images;
  for (const auto& s : test) images.push_back(s.example.image);
  for (auto size : mask_sizes) {
    RunConfig run = base;
    run.model.mask_head = ablation_mask_head(size);
    run.model.train.iterations = iterations;
    run.validate();
    Model model(run.model, run.init_seed);
    train_model(model, train, iterations, run.seed, [&](const TrainLogRow& r) {
      if (on_step) on_step(size, r);
    });
    rows.push_back({size, ablation_row_name(size), evaluate_results(test, infer_all(model, images), run.eval)});
  }
  return rows;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-18s %9s %9s %9s\n", "network", "mask", "F_beta", "det@0.5");
  out += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-18s %9s %9.4f %9.4f\n", r.name.c_str(),
                  (std::to_string(r.mask_size) + "x" + std::to_string(r.mask_size)).c_str(), r.report.average.f_beta,
                  r.report.detection_recall.value_or(0.0));
    out += buf;
  }
  return out;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "network,mask_size,f_beta,detection_recall\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.6f,%.6f\n", r.name.c_str(), r.mask_size, r.report.average.f_beta,
                  r.report.detection_recall.value_or(0.0));
    out += buf;
  }
  return out;
}

}  // namespace affkit
