#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "affkit/netpbm.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "affkit_cli_test";

struct Run {
  int code = -1;
  std::string out;
};

Run cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " AFFKIT_CLI_PATH " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), int(buf.size()), p)) r.out += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = affkit::read_file_bytes(e.path());
  return out;
}

const char* kSmallConfig =
    "model.backbone_widths = 8,8,8,8\nmodel.rpn_width = 8\nmodel.fc_width = 16\n"
    "model.mask_head = k4s2p1\nmodel.mask_width = 4\ninfer.k_infer = 20\n"
    "train.iterations = 3\ntrain.batch_size = 8\nrpn.batch_size = 32\ntrain.log_every = 0\n"
    "data.image_w = 48\ndata.image_h = 48\ndata.max_objects = 1\n";

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    std::ofstream(kRoot / "small.cfg") << kSmallConfig;
  }
  static std::string cfg() { return (kRoot / "small.cfg").string(); }
  static std::string at(const std::string& rel) { return (kRoot / rel).string(); }
};

}  // namespace

TEST_F(Cli, GradcheckAllPasses) {
  const auto r = cli("gradcheck --op all --seed 3");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
  EXPECT_NE(r.out.find("multi_task_loss"), std::string::npos);
}

TEST_F(Cli, ValidationErrorsExitOneWithPrefix) {
  for (const auto& args : {std::string("train --bogus"), std::string("gradcheck --op nope"),
                           "train --data " + at("missing") + " --out-checkpoint " + at("x.afnc"),
                           "eval --pred " + at("nope") + " --gt " + at("nope") + " --out " + at("o"),
                           "infer --checkpoint " + at("none.afnc") + " --data " + at("."),
                           std::string("gen-data --count 2 --out ") + at("g") + " --config " + at("absent.cfg")}) {
    const auto r = cli(args);
    EXPECT_EQ(r.code, 1) << args << "\n" << r.out;
    EXPECT_EQ(r.out.rfind("error:", 0), 0u) << r.out;
    EXPECT_EQ(r.out.find('\n'), r.out.size() - 1) << r.out;
  }
}

TEST_F(Cli, EndToEndIsDeterministic) {
  ASSERT_EQ(cli("gen-data --config " + cfg() + " --count 4 --seed 5 --out " + at("d1")).code, 0);
  ASSERT_EQ(cli("gen-data --config " + cfg() + " --count 4 --seed 5 --out " + at("d2")).code, 0);
  EXPECT_EQ(snapshot(at("d1")), snapshot(at("d2")));
  const auto data_before = snapshot(at("d1"));

  for (const char* tag : {"a", "b"}) {
    const auto r = cli("train --config " + cfg() + " --data " + at("d1") + " --iters 3 --seed 2 --out-checkpoint " +
                       at(std::string("ck_") + tag + "/model.afnc"));
    ASSERT_EQ(r.code, 0) << r.out;
  }
  EXPECT_EQ(snapshot(at("ck_a")), snapshot(at("ck_b")));
  const std::string log = affkit::read_file_bytes(at("ck_a/model.loss.csv"));
  EXPECT_EQ(log.rfind("iter,total,cls,loc,aff,rpn,lr\n", 0), 0u);
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 4);

  ASSERT_EQ(cli("infer --checkpoint " + at("ck_a/model.afnc") + " --data " + at("d1") + " --out " + at("p1"),
                "AFFKIT_THREADS=1").code,
            0);
  ASSERT_EQ(cli("infer --checkpoint " + at("ck_a/model.afnc") + " --data " + at("d1") + " --out " + at("p2"),
                "AFFKIT_THREADS=3").code,
            0);
  const auto p1 = snapshot(at("p1"));
  EXPECT_EQ(p1, snapshot(at("p2")));
  EXPECT_TRUE(p1.count("detections.jsonl"));
  EXPECT_TRUE(p1.count("labels/scene_00000.pgm"));
  EXPECT_TRUE(p1.count("overlays/scene_00003.ppm"));
  EXPECT_EQ(snapshot(at("d1")), data_before);

  const auto single = cli("infer --checkpoint " + at("ck_a/model.afnc") + " --image " +
                          at("d1/images/scene_00001.ppm") + " --out " + at("p3"));
  ASSERT_EQ(single.code, 0) << single.out;
  EXPECT_EQ(snapshot(at("p3")).at("labels/scene_00001.pgm"), p1.at("labels/scene_00001.pgm"));

  const auto ev = cli("eval --pred " + at("p1") + " --gt " + at("d1") + " --out " + at("e1"));
  EXPECT_EQ(ev.code, 0) << ev.out;
  EXPECT_TRUE(fs::exists(at("e1/report.csv")));
}

TEST_F(Cli, EvalOfGroundtruthAgainstItselfIsPerfect) {
  ASSERT_EQ(cli("gen-data --config " + cfg() + " --count 3 --seed 8 --out " + at("self")).code, 0);
  const auto r = cli("eval --pred " + at("self") + " --gt " + at("self") + " --out " + at("self_eval"));
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string csv = affkit::read_file_bytes(at("self_eval/report.csv"));
  EXPECT_NE(csv.find("average,1.000000,1.000000,1.000000"), std::string::npos) << csv;
}

TEST_F(Cli, AblateReportsOneRowPerMaskSize) {
  ASSERT_EQ(cli("gen-data --config " + cfg() + " --count 2 --seed 1 --out " + at("ab/train")).code, 0);
  ASSERT_EQ(cli("gen-data --config " + cfg() + " --count 2 --seed 2 --out " + at("ab/test")).code, 0);
  const auto r = cli("ablate --config " + cfg() + " --data " + at("ab") + " --iters 1 --out " + at("ab_out"));
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* name : {"AffordanceNet14", "AffordanceNet28", "AffordanceNet56", "AffordanceNet112"})
    EXPECT_NE(r.out.find(name), std::string::npos) << r.out;
  const std::string csv = affkit::read_file_bytes(at("ab_out/ablation.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);
  EXPECT_NE(csv.find(",244,"), std::string::npos);
  EXPECT_EQ(cli("ablate --config " + cfg() + " --data " + at("ab") + " --mask-sizes 14,99").code, 1);
}
