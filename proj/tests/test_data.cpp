#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "affkit/data.hpp"
#include "affkit/netpbm.hpp"

using namespace affkit;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("affkit_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

double mean_over(const IntRange& r, const std::function<double(int)>& f) {
  double s = 0;
  for (int v = r.lo; v <= r.hi; ++v) s += f(v);
  return s / (r.hi - r.lo + 1);
}

// Expected pixel count per label for one object drawn from `t`, by enumerating its size ranges.
std::array<double, 8> expected_label_area(const ObjectTemplate& t) {
  std::array<double, 8> out{};
  if (t.kind == TemplateKind::tool) {
    out[t.first_label] = t.a.mean() * t.b.mean();
    out[t.second_label] = mean_over(t.c, [&](int hl) {
      return mean_over(t.b, [&](int thick) {
        return mean_over(t.d, [&](int breadth) { return double(hl) * std::max(breadth, thick + 2); });
      });
    });
  } else {
    double inner = 0, total = 0;
    for (int w = t.a.lo; w <= t.a.hi; ++w)
      for (int h = t.b.lo; h <= t.b.hi; ++h)
        for (int c = t.c.lo; c <= t.c.hi; ++c) {
          inner += double(w - 2 * c) * (h - 2 * c);
          total += double(w) * h;
        }
    const double n = double(t.a.hi - t.a.lo + 1) * (t.b.hi - t.b.lo + 1) * (t.c.hi - t.c.lo + 1);
    out[t.second_label] = inner / n;
    out[t.first_label] = (total - inner) / n;
  }
  return out;
}

}  // namespace

TEST(Netpbm, RoundTrip) {
  Rng rng(1);
  Image img(7, 5, 3);
  for (auto& v : img.pixels) v = std::uint8_t(rng.uniform_int(0, 255));
  EXPECT_EQ(decode_netpbm(encode_netpbm(img), "mem"), img);
  Image gray(4, 9, 1);
  for (auto& v : gray.pixels) v = std::uint8_t(rng.uniform_int(0, 255));
  EXPECT_EQ(decode_netpbm(encode_netpbm(gray), "mem"), gray);
  EXPECT_THROW(decode_netpbm("P6\n2 2\n255\nabc", "short"), FormatError);
}

TEST(Netpbm, MaskLabelValidation) {
  const auto dir = fresh_dir("mask");
  LabelMask ok(3, 3, 2);
  write_mask(dir / "ok.pgm", ok);
  EXPECT_EQ(read_mask(dir / "ok.pgm", 4), ok);
  LabelMask bad(3, 3, 9);
  write_mask(dir / "bad.pgm", bad);
  EXPECT_THROW(read_mask(dir / "bad.pgm", 4), ValidationError);
}

TEST(Dataset, DeterministicAndTightBoxes) {
  SceneSpec spec;
  spec.seed = 5;
  const auto a = fresh_dir("gen_a"), b = fresh_dir("gen_b");
  const auto ma = generate_synthetic_dataset(spec, 12, a);
  generate_synthetic_dataset(spec, 12, b);
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    EXPECT_EQ(read_file_bytes(e.path()), read_file_bytes(b / rel)) << rel;
  }
  const auto loaded = load_annotations(a / "manifest.jsonl", {2, 4});
  ASSERT_EQ(loaded.size(), ma.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    ASSERT_EQ(loaded[i].objects.size(), ma[i].objects.size());
    for (std::size_t k = 0; k < loaded[i].objects.size(); ++k) {
      const auto& o = loaded[i].objects[k];
      EXPECT_EQ(o.bbox, ma[i].objects[k].bbox);
      EXPECT_EQ(o.object_class, ma[i].objects[k].object_class);
      const auto m = read_mask(o.mask, 4);
      EXPECT_EQ(*tight_box(m), o.bbox);
      EXPECT_TRUE(label_regions_connected(m));
    }
  }
}

TEST(Dataset, LabelHistogramMatchesTemplateExpectation) {
  SceneSpec spec;
  spec.seed = 11;
  std::array<double, 8> observed{}, expected{};
  const double objects_per_scene = 0.5 * double(spec.min_objects + spec.max_objects);
  for (const auto& t : spec.templates) {
    const auto area = expected_label_area(t);
    for (std::size_t l = 0; l < 8; ++l) expected[l] += 1000 * objects_per_scene * area[l] / double(spec.templates.size());
  }
  for (std::size_t i = 0; i < 1000; ++i) {
    const auto s = generate_scene(spec, i);
    for (auto v : s.labels.labels()) observed[v] += 1;
  }
  for (std::size_t l = 1; l <= 4; ++l) {
    EXPECT_GT(expected[l], 0);
    EXPECT_NEAR(observed[l] / expected[l], 1.0, 0.2) << "label " << l;
  }
}

TEST(Manifest, MissingMaskNamesPath) {
  const auto dir = fresh_dir("manifest");
  write_image(dir / "a.ppm", Image(8, 8, 3));
  std::ofstream(dir / "manifest.jsonl")
      << R"({"image":"a.ppm","objects":[{"bbox":[1,1,4,4],"class":1,"mask":"gone.pgm"}]})" << "\n";
  try {
    load_annotations(dir / "manifest.jsonl", {2, 4});
    FAIL() << "expected an error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("gone.pgm"), std::string::npos);
  }
}

TEST(NetworkResize, ShorterEdgeRule) {
  EXPECT_EQ(resize_for_network(Image(800, 600, 3)).scale, 1.0);
  const auto r = resize_for_network(Image(400, 300, 3));
  EXPECT_EQ(r.scale, 2.0);
  EXPECT_EQ(r.image.width, 800u);
  EXPECT_EQ(r.image.height, 600u);
  const auto c = resize_for_network(Image(900, 300, 3));
  EXPECT_NEAR(c.scale, 1000.0 / 900.0, 1e-15);
  EXPECT_EQ(c.image.width, 1000u);
  EXPECT_EQ(c.image.height, 333u);
}
