#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "affkit/checkpoint.hpp"
#include "affkit/config.hpp"
#include "affkit/gradcheck.hpp"
#include "affkit/pipeline.hpp"

namespace fs = std::filesystem;
using namespace affkit;

namespace {

RunConfig config_or_default(const std::string& path) {
  if (path.empty()) {
    RunConfig c;
    c.validate();
    return c;
  }
  return load_config(path);
}

void require_dir(const std::string& path, const char* flag) {
  if (!fs::is_directory(path)) throw ValidationError(std::string(flag) + ": no such directory '" + path + "'");
}

std::string loss_csv_row(const TrainLogRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.iteration, r.loss.total, r.loss.cls,
                r.loss.loc, r.loss.aff, r.loss.rpn, r.loss.lr);
  return buf;
}

struct GenData {
  std::string config;
  std::size_t count = 0;
  std::string out;
  std::optional<std::uint64_t> seed;

  int run() const {
    RunConfig c = config_or_default(config);
    if (seed) c.scene.seed = *seed;
    const auto manifest = generate_synthetic_dataset(c.scene, count, out);
    std::cout << "wrote " << manifest.size() << " scenes to " << out << "\n";
    return 0;
  }
};

struct Train {
  std::string config, data, checkpoint, log;
  std::optional<std::size_t> iters;
  std::optional<std::uint64_t> seed;

  int run() const {
    RunConfig c = config_or_default(config);
    if (seed) c.seed = *seed;
    if (iters) c.model.train.iterations = *iters;
    c.validate();
    require_dir(data, "--data");
    const auto scenes = load_dataset(data, c);
    Model model(c.model, c.init_seed);
    std::string csv = "iter,total,cls,loc,aff,rpn,lr\n";
    const auto start = std::chrono::steady_clock::now();
    train_model(model, scenes, c.model.train.iterations, c.seed, [&](const TrainLogRow& r) {
      csv += loss_csv_row(r);
      if (c.log_every && (r.iteration % c.log_every == 0 || r.iteration + 1 == c.model.train.iterations)) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::fprintf(stderr, "iter %6zu  total %.4f  cls %.4f  loc %.4f  aff %.4f  rpn %.4f  lr %.2g  (%.0fs)\n",
                     r.iteration, r.loss.total, r.loss.cls, r.loss.loc, r.loss.aff, r.loss.rpn, r.loss.lr, secs);
      }
    });
    save_checkpoint(model, c, checkpoint);
    fs::path log_path = log.empty() ? fs::path(checkpoint).replace_extension(".loss.csv") : fs::path(log);
    write_file_atomic(log_path, csv);
    std::cout << "checkpoint " << checkpoint << "\nloss log " << log_path.string() << "\n";
    return 0;
  }
};

std::vector<std::pair<std::string, fs::path>> list_images(const fs::path& data) {
  const fs::path dir = fs::is_directory(data / "images") ? data / "images" : data;
  std::vector<std::pair<std::string, fs::path>> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".ppm") out.emplace_back(e.path().stem().string(), e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw ValidationError("--data: no .ppm images in " + dir.string());
  return out;
}

struct Infer {
  std::string checkpoint, image, data, out;

  int run() const {
    auto loaded = load_checkpoint(checkpoint);
    std::vector<std::pair<std::string, fs::path>> inputs;
    if (!image.empty()) {
      inputs.emplace_back(fs::path(image).stem().string(), image);
    } else {
      require_dir(data, "--data");
      inputs = list_images(data);
    }
    std::vector<std::string> ids;
    std::vector<Image> images;
    std::vector<Tensor<float>> tensors;
    for (const auto& [id, path] : inputs) {
      Image img = read_image(path);
      if (img.channels != 3) throw ValidationError(path.string() + ": expected a PPM (P6) image");
      ids.push_back(id);
      tensors.push_back(image_to_tensor(img));
      images.push_back(std::move(img));
    }
    const auto results = infer_all(loaded.model, tensors);
    write_inference_outputs(out, ids, images, results);
    std::size_t total = 0;
    for (const auto& r : results) total += r.detections.size();
    std::cout << "inferred " << ids.size() << " images, " << total << " detections -> " << out << "\n";
    return 0;
  }
};

struct Eval {
  std::string pred, gt, out, config;

  int run() const {
    const RunConfig c = config_or_default(config);
    require_dir(pred, "--pred");
    require_dir(gt, "--gt");
    const EvalReport report = evaluate_directories(pred, gt, c);
    write_file_atomic(fs::path(out) / "report.csv", report.to_csv());
    std::cout << report.to_table();
    return 0;
  }
};

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  for (const auto& item : detail::split(text, ','))
    out.push_back(detail::KeyBinder::parse_number<std::size_t>("--mask-sizes", item));
  for (auto s : out) ablation_mask_head(s);
  return out;
}

struct Ablate {
  std::string config, data, out, sizes = "14,28,56,112,244";
  std::optional<std::size_t> iters;
  std::optional<std::uint64_t> seed;

  int run() const {
    RunConfig c = config_or_default(config);
    if (seed) c.seed = *seed;
    const auto mask_sizes = parse_sizes(sizes);
    require_dir(data, "--data");
    const fs::path root(data);
    if (!fs::is_directory(root / "train") || !fs::is_directory(root / "test"))
      throw ValidationError("--data: expected train/ and test/ dataset directories under " + data);
    const auto train = load_dataset(root / "train", c);
    const auto test = load_dataset(root / "test", c);
    const std::size_t n = iters.value_or(c.model.train.iterations);
    const auto rows = run_ablation(c, train, test, mask_sizes, n, [&](std::size_t size, const TrainLogRow& r) {
      if (c.log_every && r.iteration % c.log_every == 0)
        std::fprintf(stderr, "[%zu] iter %6zu  total %.4f  aff %.4f\n", size, r.iteration, r.loss.total, r.loss.aff);
    });
    if (!out.empty()) write_file_atomic(fs::path(out) / "ablation.csv", ablation_csv(rows));
    std::cout << ablation_table(rows);
    return 0;
  }
};

struct GradCheck {
  std::string op = "all";
  std::uint64_t seed = 1;

  int run() const {
    bool ok = true;
    for (const auto& o : gradcheck::run(op, seed)) {
      std::printf("%-22s max_rel_err %.3e  %s\n", o.op.c_str(), o.max_rel_error, o.passed ? "PASS" : "FAIL");
      ok = ok && o.passed;
    }
    return ok ? 0 : 2;
  }
};

int fail(int code, const std::string& message) {
  std::string line = message;
  for (auto& ch : line)
    if (ch == '\n') ch = ' ';
  std::fprintf(stderr, "error: %s\n", line.c_str());
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  enable_flush_to_zero();
  CLI::App app{"affkit: toy affordance detection and segmentation"};
  app.require_subcommand(1);

  GenData gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  g->add_option("--config", gen.config, "Config file");
  g->add_option("--count", gen.count, "Number of scenes")->required()->check(CLI::PositiveNumber);
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Scene seed (overrides data.seed)");

  Train train;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--config", train.config, "Config file");
  t->add_option("--data", train.data, "Dataset directory")->required();
  t->add_option("--iters", train.iters, "Iterations (overrides train.iterations)")->check(CLI::PositiveNumber);
  t->add_option("--out-checkpoint", train.checkpoint, "Checkpoint path")->required();
  t->add_option("--log", train.log, "Loss CSV path (default: checkpoint with .loss.csv)");
  t->add_option("--seed", train.seed, "Training seed (overrides train.seed)");

  Infer infer;
  auto* i = app.add_subcommand("infer", "Run inference");
  i->add_option("--checkpoint", infer.checkpoint, "Checkpoint path")->required();
  auto* img = i->add_option("--image", infer.image, "Single PPM image");
  auto* dat = i->add_option("--data", infer.data, "Dataset or image directory");
  img->excludes(dat);
  i->add_option("--out", infer.out, "Output directory")->required();

  Eval eval;
  auto* e = app.add_subcommand("eval", "Evaluate predicted label maps");
  e->add_option("--pred", eval.pred, "Prediction directory")->required();
  e->add_option("--gt", eval.gt, "Groundtruth directory")->required();
  e->add_option("--out", eval.out, "Report directory")->required();
  e->add_option("--config", eval.config, "Config file (class names, beta)");

  Ablate ablate;
  auto* a = app.add_subcommand("ablate", "Mask-size ablation");
  a->add_option("--config", ablate.config, "Config file");
  a->add_option("--data", ablate.data, "Directory holding train/ and test/ datasets")->required();
  a->add_option("--mask-sizes", ablate.sizes, "Comma-separated mask sizes");
  a->add_option("--iters", ablate.iters, "Iterations per model")->check(CLI::PositiveNumber);
  a->add_option("--out", ablate.out, "Report directory");
  a->add_option("--seed", ablate.seed, "Training seed");

  GradCheck grad;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_option("--op", grad.op, "Op name or all");
  gc->add_option("--seed", grad.seed, "Base seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    return fail(1, ex.what());
  }

  try {
    if (*g) return gen.run();
    if (*t) return train.run();
    if (*i) {
      if (infer.image.empty() && infer.data.empty()) return fail(1, "infer: one of --image or --data is required");
      return infer.run();
    }
    if (*e) return eval.run();
    if (*a) return ablate.run();
    if (*gc) return grad.run();
  } catch (const ValidationError& ex) {
    return fail(1, ex.what());
  } catch (const fs::filesystem_error& ex) {
    return fail(1, ex.what());
  } catch (const std::exception& ex) {
    return fail(2, ex.what());
  }
  return fail(1, "no command given");
}
