#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "crackkw/report.hpp"

using namespace crackkw;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("crackkw_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

std::string quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

Result cli(const std::string& args) {
  static int serial = 0;
  const fs::path err = scratch("stderr_" + std::to_string(serial++) + ".txt");
  const std::string cmd = quote(CRACKKW_CLI_PATH) + " " + args + " 2> " + quote(err.string());
  Result r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  for (std::size_t n; (n = std::fread(buf, 1, sizeof buf, pipe)) > 0;) r.out.append(buf, n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = read_file(err);
  return r;
}

fs::path write_config(const std::string& name, const std::string& text) {
  const fs::path p = scratch(name);
  write_file(p, text);
  return p;
}

std::size_t count_lines(const std::string& s) { return std::size_t(std::count(s.begin(), s.end(), '\n')); }

// Three 16 px images: one box, two boxes, none.
fs::path fixture_dataset() {
  const fs::path dir = scratch("eval_data");
  Dataset ds;
  ds.size = 16;
  ds.generated = 3;
  const GroundTruth boxes{{{0, 0, 4, 4}}, {{8, 8, 12, 12}, {0, 0, 4, 4}}, {}};
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    CrackSample s;
    s.seed = i;
    s.image = Tensor(Shape{16, 16}, 0.5);
    s.mask = Tensor(Shape{16, 16}, 0.0);
    s.boxes = boxes[i];
    ds.samples.push_back(s);
    ds.split.push_back("test");
  }
  save_dataset(ds, dir);
  return dir;
}

const std::string kSmallToy =
    "data.count = 40\n"
    "sgd.epochs = 1\n"
    "sgd.batch = 8\n";

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(cli("--help").code, 0);
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("race --bogus").code, 2);
  EXPECT_EQ(cli("gradcheck --scope everything").code, 2);
}

TEST(Cli, GradcheckLossesIsStable) {
  const auto a = cli("--seed 7 gradcheck --scope losses --instances 20");
  ASSERT_EQ(a.code, 0) << a.err;
  std::size_t rows = 0;
  std::istringstream is(a.out);
  for (std::string line; std::getline(is, line);) rows += line.rfind("losses ", 0) == 0;
  EXPECT_EQ(rows, 10u);
  EXPECT_NE(a.out.find("gradcheck: 10 ops passed"), std::string::npos);
  EXPECT_EQ(cli("--seed 7 gradcheck --scope losses --instances 20").out, a.out);
}

TEST(Cli, GenDataSplitsAndRepeats) {
  const fs::path a = scratch("data_a"), b = scratch("data_b");
  const auto r = cli("--out " + quote(a.string()) + " gen-data --count 100");
  ASSERT_EQ(r.code, 0) << r.err;
  const Dataset ds = load_dataset(a);
  EXPECT_EQ(ds.generated, 100u);
  const std::size_t n = ds.samples.size();
  EXPECT_GE(n, 95u);
  EXPECT_EQ(ds.indices("train").size() + ds.indices("val").size() + ds.indices("test").size(), n);
  if (n == 100) {
    EXPECT_EQ(ds.indices("train").size(), 70u);
    EXPECT_EQ(ds.indices("val").size(), 20u);
    EXPECT_EQ(ds.indices("test").size(), 10u);
  }
  EXPECT_TRUE(fs::exists(a / "run_manifest.json"));
  ASSERT_EQ(cli("--out " + quote(b.string()) + " gen-data --count 100").code, 0);
  EXPECT_EQ(read_file(a / "manifest.json"), read_file(b / "manifest.json"));
  EXPECT_EQ(read_file(a / "boxes.csv"), read_file(b / "boxes.csv"));
  EXPECT_EQ(cli("--out " + quote(scratch("data_c").string()) + " gen-data --count 0").code, 2);
}

TEST(Cli, RaceWritesTablesAndLogsDefaults) {
  const fs::path out = scratch("race");
  const fs::path cfg = write_config("race.cfg", "# short race\nrace.n_pairs = 16\nrace.steps = 60\n");
  const auto r = cli("--config " + quote(cfg.string()) + " --out " + quote(out.string()) + " race");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("config: race.seed not set, using default 42"), std::string::npos);
  const std::string table = read_file(out / "race.csv");
  EXPECT_EQ(count_lines(table), 7u);
  EXPECT_EQ(table.rfind("loss,median_steps_to,", 0), 0u);
  EXPECT_EQ(count_lines(read_file(out / "trace.csv")), 61u);
  for (const char* f : {"report.json", "iou.svg", "loss.svg", "run_manifest.json"}) EXPECT_TRUE(fs::exists(out / f)) << f;
  const auto manifest = nlohmann::json::parse(read_file(out / "run_manifest.json"));
  EXPECT_EQ(manifest.at("command"), "race");
  EXPECT_EQ(manifest.at("seed"), 42);
  EXPECT_EQ(manifest.at("exit_code"), 0);
  EXPECT_EQ(manifest.at("config").at("race.n_pairs"), "16");
}

TEST(Cli, ConfigErrorsExitTwoWithLine) {
  const fs::path out = scratch("bad_cfg");
  const auto unknown = cli("--config " + quote(write_config("u.cfg", "race.steps = 5\n\nrace.stpes = 6\n").string()) +
                           " --out " + quote(out.string()) + " race");
  EXPECT_EQ(unknown.code, 2);
  EXPECT_NE(unknown.err.find(":3: unknown key 'race.stpes'"), std::string::npos) << unknown.err;
  const auto number = cli("--config " + quote(write_config("n.cfg", "race.steps = many\n").string()) + " --out " +
                          quote(out.string()) + " race");
  EXPECT_EQ(number.code, 2);
  EXPECT_NE(number.err.find(":1: race.steps"), std::string::npos) << number.err;
  EXPECT_EQ(cli("--config /nonexistent/x.cfg --out " + quote(out.string()) + " race").code, 2);
  EXPECT_EQ(cli("--config " + quote(write_config("k.cfg", "race.kinds = ciou,nope\n").string()) + " --out " +
                quote(out.string()) + " race")
                .code,
            2);
}

TEST(Cli, EvalMatchesGoldenFixture) {
  const fs::path data = fixture_dataset();
  const std::string fixtures = CRACKKW_FIXTURE_DIR;
  const auto r = cli("eval --pred " + quote(fixtures + "/eval/predictions.csv") + " --data " + quote(data.string()));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, read_file(fixtures + "/eval/expected.json"));

  // The same numbers in process.
  std::ifstream is(fixtures + "/eval/predictions.csv");
  const auto dets = parse_predictions_csv(is);
  GroundTruth gts;
  for (const auto& s : load_dataset(data).samples) gts.push_back(s.boxes);
  const auto report = evaluate(dets, gts);
  EXPECT_EQ(r.out, to_json(report).dump(2) + "\n");

  // Hand-computed: ranked hits T F T T F over 3 boxes; the 0.6 box has IoU exactly 0.5.
  EXPECT_NEAR(report.map50, 5.0 / 6.0, 1e-12);
  EXPECT_NEAR(report.ap_table[1], 5.0 / 9.0, 1e-12);
  EXPECT_NEAR(report.map50_95, 7.0 / 12.0, 1e-12);
  EXPECT_EQ(report.precision, 0.75);
  EXPECT_EQ(report.recall, 1.0);
  EXPECT_EQ(report.fdr, 0.25);
}

TEST(Cli, EvalPerfectEmptyAndMalformed) {
  const fs::path data = fixture_dataset();
  const fs::path perfect = write_config("perfect.csv", "0,0,0,4,4,1\n1,8,8,12,12,1\n1,0,0,4,4,1\n");
  const auto p = cli("eval --pred " + quote(perfect.string()) + " --data " + quote(data.string()));
  ASSERT_EQ(p.code, 0) << p.err;
  const auto jp = nlohmann::json::parse(p.out);
  EXPECT_EQ(jp.at("map50"), 1.0);
  EXPECT_EQ(jp.at("map50_95"), 1.0);
  EXPECT_EQ(jp.at("precision"), 1.0);
  EXPECT_EQ(jp.at("recall"), 1.0);

  const fs::path empty = write_config("empty.csv", "image_id,x1,y1,x2,y2,score\n");
  const auto e = cli("eval --pred " + quote(empty.string()) + " --data " + quote(data.string()));
  ASSERT_EQ(e.code, 0) << e.err;
  const auto je = nlohmann::json::parse(e.out);
  EXPECT_EQ(je.at("recall"), 0.0);
  EXPECT_EQ(je.at("map50"), 0.0);

  const fs::path bad = write_config("bad.csv", "0,0,0,4,4,1\n1,8,8,x,12,1\n");
  const auto b = cli("eval --pred " + quote(bad.string()) + " --data " + quote(data.string()));
  EXPECT_EQ(b.code, 2);
  EXPECT_NE(b.err.find("malformed prediction row 2"), std::string::npos) << b.err;

  const fs::path stray = write_config("stray.csv", "9,0,0,4,4,1\n");
  EXPECT_EQ(cli("eval --pred " + quote(stray.string()) + " --data " + quote(data.string())).code, 2);
  EXPECT_EQ(cli("eval --pred /nonexistent.csv --data " + quote(data.string())).code, 2);
  EXPECT_EQ(cli("eval --pred " + quote(perfect.string()) + " --data /nonexistent").code, 1);
}

TEST(Cli, DivergenceExitsThree) {
  const fs::path out = scratch("diverge");
  const fs::path cfg = write_config("div.cfg", "data.count = 40\nsgd.batch = 8\nsgd.epochs = 20\nsgd.lr0 = 1e8\n");
  const auto r = cli("--config " + quote(cfg.string()) + " --out " + quote(out.string()) + " train");
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_NE(r.err.find("diverged at step"), std::string::npos);
  EXPECT_EQ(nlohmann::json::parse(read_file(out / "run_manifest.json")).at("exit_code"), 3);
}

TEST(Cli, DuplicateKeyIsAConfigError) {
  const fs::path cfg = write_config("dup.cfg", kSmallToy + "sgd.epochs = 2\n");
  const auto r = cli("--config " + quote(cfg.string()) + " --out " + quote(scratch("dup").string()) + " train");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(":4: duplicate key 'sgd.epochs'"), std::string::npos) << r.err;
}

TEST(Cli, TrainThenReport) {
  const fs::path out = scratch("train");
  const fs::path cfg = write_config("train.cfg", kSmallToy + "sgd.seed = 5\n");
  const auto r = cli("--config " + quote(cfg.string()) + " --out " + quote(out.string()) + " train");
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"trace.csv", "epochs.csv", "report.json", "loss.svg", "map.svg", "pr.svg", "run_manifest.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  const auto rep = cli("report --in " + quote(out.string()));
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_TRUE(fs::exists(out / "report" / "summary.txt"));
  EXPECT_TRUE(fs::exists(out / "report" / "run_manifest.json"));
  EXPECT_EQ(cli("report --in " + quote(scratch("nothing_here").string())).code, 2);
}

TEST(Cli, AblateEmitsEightRows) {
  const fs::path out = scratch("ablate");
  const fs::path cfg = write_config("ablate.cfg", kSmallToy);
  const auto r = cli("--config " + quote(cfg.string()) + " --out " + quote(out.string()) + " ablate");
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string table = read_file(out / "ablation.csv");
  EXPECT_EQ(count_lines(table), 9u);
  EXPECT_EQ(table.rfind("row,kwconv,ta,fpiou,precision,recall,map50,map50_95\n1,0,0,0,", 0), 0u);
  EXPECT_EQ(nlohmann::json::parse(read_file(out / "report.json")).size(), 8u);
  std::size_t manifests = 0;
  for (const auto& e : fs::recursive_directory_iterator(out)) manifests += e.path().filename() == "run_manifest.json";
  EXPECT_EQ(manifests, 1u);
}

TEST(Cli, RobustKinds) {
  const fs::path cfg = write_config("robust.cfg", kSmallToy);
  const fs::path sub = scratch("robust_sub"), aug = scratch("robust_aug");
  ASSERT_EQ(cli("--config " + quote(cfg.string()) + " --out " + quote(sub.string()) + " robust").code, 0);
  EXPECT_EQ(count_lines(read_file(sub / "robust_subsample.csv")), 6u);
  ASSERT_EQ(cli("--config " + quote(cfg.string()) + " --out " + quote(aug.string()) + " robust --kind augment").code, 0);
  const std::string t = read_file(aug / "robust_augment.csv");
  EXPECT_EQ(count_lines(t), 3u);
  EXPECT_NE(t.find("\nNo,"), std::string::npos);
  EXPECT_NE(t.find("\nYes,"), std::string::npos);
  EXPECT_EQ(cli("--config " + quote(cfg.string()) + " robust --kind sideways").code, 2);
}

TEST(Cli, DedupReportsDuplicates) {
  const fs::path data = scratch("dedup_data"), out = scratch("dedup_out");
  ASSERT_EQ(cli("--out " + quote(data.string()) + " gen-data --count 12").code, 0);
  // Copy one sample over another so the directory holds an exact duplicate.
  fs::copy_file(data / "samples" / "sample_00000.image.ckt", data / "samples" / "sample_00003.image.ckt",
                fs::copy_options::overwrite_existing);
  const auto r = cli("--out " + quote(out.string()) + " dedup --in " + quote(data.string()));
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = read_file(out / "dedup.csv");
  EXPECT_NE(csv.find("sample_00003,"), std::string::npos);
  EXPECT_NE(csv.find(",0,sample_00000\n"), std::string::npos) << csv;
}
