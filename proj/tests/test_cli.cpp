#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

#include "bevtrack/scene/array_io.hpp"

namespace {

namespace fs = std::filesystem;

struct Result {
  int code = -1;
  std::string out, err;
};

fs::path work() {
  static const fs::path p = [] {
    auto d = fs::temp_directory_path() / "bevtrack_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return p;
}

Result run(const std::string& args) {
  const auto out = work() / "stdout.txt", err = work() / "stderr.txt";
  const std::string cmd = "cd " + work().string() + " && SPDLOG_LEVEL=warn " + BEVTRACK_CLI + " " + args + " > " +
                          out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = bev::io::read_file(out);
  r.err = bev::io::read_file(err);
  return r;
}

std::string slurp(const fs::path& p) { return bev::io::read_file(work() / p); }

// Every file under a directory, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(work() / dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), work() / dir).string()] = bev::io::read_file(e.path());
  return out;
}

double csv_field(const std::string& csv, const std::string& row, const std::string& column) {
  std::istringstream is(csv);
  std::string line, header;
  std::getline(is, header);
  auto split = [](const std::string& s) {
    std::vector<std::string> f;
    std::stringstream ss(s);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    return f;
  };
  const auto cols = split(header);
  while (std::getline(is, line)) {
    const auto f = split(line);
    if (f[0] != row) continue;
    for (std::size_t i = 0; i < cols.size(); ++i)
      if (cols[i] == column) return std::stod(f[i]);
  }
  throw std::runtime_error("no field " + row + "/" + column);
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    ASSERT_EQ(run("gen --seed 5 --frames 4 --objects 3 --out scene").code, 0);
  }
};

TEST_F(Cli, GroundTruthThroughThePipelineScoresPerfectly) {
  ASSERT_EQ(run("pseudo scene").code, 0);
  ASSERT_EQ(run("export-gt scene --out gt.txt").code, 0);
  const auto r = run("eval gt.txt scene --csv report.csv");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = slurp("report.csv");
  EXPECT_EQ(csv_field(csv, "all", "AMOTA"), 1.0);
  EXPECT_EQ(csv_field(csv, "all", "AP"), 1.0);
  EXPECT_EQ(csv_field(csv, "all", "IDS"), 0.0);
  EXPECT_NE(r.out.find("AMOTA 1.0000"), std::string::npos);
}

TEST_F(Cli, BarePseudoLabelsCoverFewerCells) {
  ASSERT_EQ(run("pseudo scene --out full").code, 0);
  ASSERT_EQ(run("pseudo scene --out bare --no-accumulate --no-dynamic").code, 0);
  const auto full = nlohmann::json::parse(slurp("full/pseudo.json")).at("valid_cells").get<std::size_t>();
  const auto bare = nlohmann::json::parse(slurp("bare/pseudo.json")).at("valid_cells").get<std::size_t>();
  EXPECT_LT(bare, full);
}

TEST_F(Cli, RenderIsByteIdentical) {
  ASSERT_EQ(run("pseudo scene --out full").code, 0);
  ASSERT_EQ(run("render full/0.bin --mask full/0.mask.bin --out a.ppm").code, 0);
  ASSERT_EQ(run("render full/0.bin --mask full/0.mask.bin --out b.ppm").code, 0);
  EXPECT_EQ(slurp("a.ppm"), slurp("b.ppm"));
  EXPECT_EQ(slurp("a.ppm").rfind("P6\n256 256\n255\n", 0), 0u);
  ASSERT_EQ(run("export-gt scene --out gt.txt").code, 0);
  ASSERT_EQ(run("render gt.txt --scene scene --out a.svg").code, 0);
  ASSERT_EQ(run("render gt.txt --scene scene --out b.svg").code, 0);
  EXPECT_EQ(slurp("a.svg"), slurp("b.svg"));
}

TEST_F(Cli, SubcommandsAreIdempotent) {
  ASSERT_EQ(run("gen --seed 5 --frames 4 --objects 3 --out scene2").code, 0);
  EXPECT_EQ(tree("scene2"), [] {
    auto t = tree("scene");
    for (auto it = t.begin(); it != t.end();) it = it->first.rfind("pseudolabels", 0) == 0 ? t.erase(it) : std::next(it);
    return t;
  }());
  ASSERT_EQ(run("pseudo scene --out pa").code, 0);
  ASSERT_EQ(run("pseudo scene --out pb").code, 0);
  EXPECT_EQ(tree("pa"), tree("pb"));
  const std::string train = " --steps 3 --adam --lr 1e-3 --warmup 1";
  ASSERT_EQ(run("train scene --out cka" + train).code, 0);
  ASSERT_EQ(run("train scene --out ckb" + train).code, 0);
  EXPECT_EQ(tree("cka"), tree("ckb"));
  const auto log = slurp("cka/loss.csv");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 4);
  ASSERT_EQ(run("infer scene cka --out ia").code, 0);
  ASSERT_EQ(run("infer scene ckb --out ib").code, 0);
  EXPECT_EQ(tree("ia"), tree("ib"));
  const auto ea = run("eval ia/tracks.txt scene --detections ia/detections.txt");
  const auto eb = run("eval ia/tracks.txt scene --detections ia/detections.txt");
  ASSERT_EQ(ea.code, 0);
  EXPECT_EQ(ea.out, eb.out);
}

TEST_F(Cli, ExitCodesAndErrorLines) {
  auto r = run("");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error: usage: ", 0), 0u) << r.err;
  r = run("train scene --out x --no-bev --no-pv");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error: usage: ", 0), 0u) << r.err;
  EXPECT_FALSE(fs::exists(work() / "x"));
  r = run("gen --frames 0 --out y");
  EXPECT_EQ(r.code, 1);
  r = run("infer scene scene");
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("error: io: ", 0), 0u) << r.err;

  ASSERT_EQ(run("train scene --out ckc --steps 1 --no-bev").code, 0);
  std::string bytes = slurp("ckc/params/0.bin");
  bytes[bytes.size() - 1] ^= 0x40;
  bev::io::write_file(work() / "ckc/params/0.bin", bytes);
  r = run("infer scene ckc");
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("error: checksum: ", 0), 0u) << r.err;
  EXPECT_EQ(run("--help").code, 0);
}

}  // namespace
