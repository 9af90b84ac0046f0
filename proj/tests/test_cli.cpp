#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "tta/experiments.hpp"
#include "tta/model.hpp"
#include "tta/rng.hpp"
#include "tta/runconfig.hpp"
#include "tta/synthdata.hpp"

namespace fs = std::filesystem;
using namespace tta;

namespace {

const fs::path& scratch() {
  static const fs::path dir = [] {
    fs::path p = fs::temp_directory_path() / "tta_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream buf;
  buf << f.rdbuf();
  return buf.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

struct CmdResult {
  int code = -1;
  std::string out, err;
};

// `prefix` may carry VAR=value environment assignments.
CmdResult run_cmd(const std::string& args, const std::string& prefix = "") {
  static int counter = 0;
  const fs::path out = scratch() / ("stdout." + std::to_string(counter));
  const fs::path err = scratch() / ("stderr." + std::to_string(counter));
  ++counter;
  std::string cmd = prefix + (prefix.empty() ? "" : " ") + TTA_BIN + " " +
                    args + " >" + out.string() + " 2>" + err.string();
  const int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  return {WEXITSTATUS(rc), slurp(out), slurp(err)};
}

std::string base_config(std::uint64_t seed) {
  return R"({
  "scene": {"height": 16, "width": 16, "num_classes": 5},
  "model": {"num_classes": 5, "width": 8},
  "pretrain": {"images": 40, "epochs": 8, "batch_size": 8},
  "adapt": {"lr": 0.005, "stride": 4},
  "stream": {"count": 4, "rounds": 2},
  "seed": )" + std::to_string(seed) + "\n}\n";
}

// One shared source checkpoint; pretraining runs once per test binary.
const fs::path& shared_config() {
  static const fs::path p = [] {
    fs::path cfg = scratch() / "base.json";
    spit(cfg, base_config(7));
    return cfg;
  }();
  return p;
}

const fs::path& shared_checkpoint() {
  static const fs::path p = [] {
    const fs::path out = scratch() / "pre";
    CmdResult r = run_cmd("pretrain --config " + shared_config().string() +
                          " --out " + out.string());
    REQUIRE(r.code == 0);
    return out / "checkpoint.bin";
  }();
  return p;
}

std::vector<std::string> csv_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

double csv_value(const std::string& comparison_csv, const std::string& row) {
  for (const std::string& line : csv_lines(comparison_csv))
    if (line.rfind(row + ",", 0) == 0)
      return std::strtod(line.c_str() + row.size() + 1, nullptr);
  FAIL("row '" << row << "' missing from comparison table");
  return 0.0;
}

}  // namespace

TEST_CASE("config parsing: defaults, strictness, resolved fixed point") {
  RunConfig c = parse_run_config("{}");
  CHECK(c.scene.num_classes == 6);
  CHECK(c.model.num_classes == 6);  // follows the scene unless overridden
  CHECK(c.shifts.size() == 4);
  CHECK(c.shifts[0].condition == "fog");
  CHECK(c.method == Method::Ocl);
  CHECK(c.seed == 0);

  c = parse_run_config(R"({"scene": {"num_classes": 4}})");
  CHECK(c.model.num_classes == 4);

  CHECK_THROWS_AS(parse_run_config("[]"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"seed\": \"x\"}"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"scene": {"depth": 3}})"),
                  ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"stream": {"length": 9}})"),
                  ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"shifts": [{"fog": 1}]})"),
                  ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"shifts": ["volcano"]})"),
                  ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"method": "warp"})"), ConfigError);

  // Class-count disagreement is a validation error, not a parse error.
  c = parse_run_config(R"({"model": {"num_classes": 3}})");
  CHECK_THROWS_AS(c.validate(), ConfigError);

  // Serializing and re-parsing the resolved form is a fixed point.
  c = parse_run_config(R"({"adapt": {"lr": 0.25}, "shifts": ["night"],
                           "seed": 9, "method": "entropy"})");
  const std::string resolved = resolved_config_text(c);
  CHECK(resolved_config_text(parse_run_config(resolved)) == resolved);
  CHECK(adaptation_for(c).lr == 0.25);
  CHECK(adaptation_for(c).seed == 9);
  CHECK(adaptation_for(c).loss == LossKind::Entropy);
}

TEST_CASE("missing config file exits 1 and names the path") {
  CmdResult r = run_cmd("adapt --config /nowhere/gone.json");
  CHECK(r.code == 1);
  CHECK(r.err.find("/nowhere/gone.json") != std::string::npos);
}

TEST_CASE("unknown config keys are rejected at every level") {
  const fs::path cfg = scratch() / "typo.json";
  spit(cfg, R"({"adapt": {"learning_rate": 0.1}})");
  CmdResult r = run_cmd("pretrain --config " + cfg.string());
  CHECK(r.code == 1);
  CHECK(r.err.find("learning_rate") != std::string::npos);

  spit(cfg, R"({"outputs": "x"})");
  r = run_cmd("pretrain --config " + cfg.string());
  CHECK(r.code == 1);
  CHECK(r.err.find("outputs") != std::string::npos);
}

TEST_CASE("pretrain writes artifacts, beats chance, repeats byte-for-byte") {
  const fs::path ckpt = shared_checkpoint();
  REQUIRE(fs::exists(ckpt));
  const fs::path dir = ckpt.parent_path();
  CHECK(fs::exists(dir / "config.json"));

  const auto metrics = nlohmann::json::parse(slurp(dir / "pretrain_metrics.json"));
  const double source = metrics.at("source_miou").get<double>();
  const double chance = metrics.at("chance_miou").get<double>();
  CHECK(chance == 0.2);
  CHECK(source > chance);

  const fs::path again = scratch() / "pre_again";
  CmdResult r = run_cmd("pretrain --config " + shared_config().string() +
                        " --out " + again.string());
  REQUIRE(r.code == 0);
  CHECK(slurp(ckpt) == slurp(again / "checkpoint.bin"));
  CHECK(slurp(dir / "pretrain_metrics.json") ==
        slurp(again / "pretrain_metrics.json"));
}

TEST_CASE("frozen adapt reproduces plain checkpoint evaluation") {
  const fs::path out = scratch() / "frozen";
  CmdResult r = run_cmd("adapt --config " + shared_config().string() +
                        " --checkpoint " + shared_checkpoint().string() +
                        " --out " + out.string() + " --method frozen");
  REQUIRE(r.code == 0);
  const std::string cmp = slurp(out / "comparison.csv");
  const auto lines = csv_lines(cmp);
  REQUIRE(lines.size() == 3);
  CHECK(lines[1] == lines[2]);  // method row is itself the frozen row
  const double frozen = csv_value(cmp, "frozen");

  // Independent evaluation over the same generated stream.
  SceneSpec scene;
  scene.height = 16;
  scene.width = 16;
  scene.num_classes = 5;
  std::vector<ShiftSpec> shifts;
  for (const std::string& name : ShiftSpec::condition_names())
    shifts.push_back(ShiftSpec::preset(name));
  Stream stream = make_condition_stream(scene, shifts, 4, Rng::mix(7, 0x60));
  std::vector<Sample> samples;
  for (const StreamItem& item : stream)
    samples.push_back({item.image, item.labels});
  SegNetToy model = model_from_checkpoint(
      load_checkpoint(shared_checkpoint().string()));
  CHECK(frozen == evaluate_miou(model, samples, BnMode::TrainStats));
}

TEST_CASE("adapt writes a schema-valid log and distinct seeds differ") {
  auto run_seed = [&](std::uint64_t seed) {
    const fs::path out = scratch() / ("seed" + std::to_string(seed));
    CmdResult r = run_cmd("adapt --config " + shared_config().string() +
                          " --checkpoint " + shared_checkpoint().string() +
                          " --out " + out.string() + " --seed " +
                          std::to_string(seed));
    REQUIRE(r.code == 0);
    return slurp(out / "log.ndjson");
  };
  const std::string log_a = run_seed(101);
  const std::string log_b = run_seed(102);
  CHECK(log_a != log_b);
  for (const std::string& text : {log_a, log_b}) {
    const auto lines = csv_lines(text);
    CHECK(lines.size() == 16);  // 4 images x 4 default conditions
    for (const std::string& line : lines) {
      const auto rec = nlohmann::json::parse(line);
      for (const char* key :
           {"step", "condition", "round", "loss_total", "miou_image",
            "miou_accumulated", "class_ratio", "update_applied", "fault"})
        CHECK(rec.contains(key));
    }
  }
}

TEST_CASE("resolved config re-feeds to a byte-identical run") {
  const fs::path first = scratch() / "rt1";
  CmdResult r = run_cmd("adapt --config " + shared_config().string() +
                        " --checkpoint " + shared_checkpoint().string() +
                        " --out " + first.string());
  REQUIRE(r.code == 0);
  const fs::path second = scratch() / "rt2";
  r = run_cmd("adapt --config " + (first / "config.json").string() +
              " --out " + second.string());
  REQUIRE(r.code == 0);
  for (const char* name : {"log.ndjson", "summary.csv", "comparison.csv"})
    CHECK(slurp(first / name) == slurp(second / name));
}

TEST_CASE("ablation emits exactly the five component rows") {
  const fs::path out = scratch() / "ablate";
  CmdResult r = run_cmd("adapt --config " + shared_config().string() +
                        " --checkpoint " + shared_checkpoint().string() +
                        " --out " + out.string() + " --ablation");
  REQUIRE(r.code == 0);
  const auto lines = csv_lines(slurp(out / "ablation.csv"));
  REQUIRE(lines.size() == 6);
  CHECK(lines[0] == "row,label,ocl,bn,restore,miou");
  CHECK(lines[1].rfind("1,none,0,0,0,", 0) == 0);
  CHECK(lines[2].rfind("2,ocl,1,0,0,", 0) == 0);
  CHECK(lines[3].rfind("3,ocl+bn,1,1,0,", 0) == 0);
  CHECK(lines[4].rfind("4,ocl+restore,1,0,1,", 0) == 0);
  CHECK(lines[5].rfind("5,ocl+bn+restore,1,1,1,", 0) == 0);
}

TEST_CASE("continual writes the round x condition table") {
  const fs::path out = scratch() / "cont";
  CmdResult r = run_cmd("continual --config " + shared_config().string() +
                        " --checkpoint " + shared_checkpoint().string() +
                        " --out " + out.string());
  REQUIRE(r.code == 0);
  const auto lines = csv_lines(slurp(out / "table.csv"));
  REQUIRE(lines.size() == 1 + 2 * 4);  // header + rounds x conditions
  CHECK(lines[0] == "round,condition,miou");
  CHECK(lines[1].rfind("0,0,", 0) == 0);
  CHECK(lines.back().rfind("1,3,", 0) == 0);
  CHECK(fs::exists(out / "comparison.csv"));
}

TEST_CASE("checkpoint architecture mismatch names both descriptors") {
  const fs::path cfg = scratch() / "wide.json";
  std::string text = base_config(7);
  text.replace(text.find("\"width\": 8"), 10, "\"width\": 12");
  spit(cfg, text);
  CmdResult r = run_cmd("adapt --config " + cfg.string() + " --checkpoint " +
                        shared_checkpoint().string());
  CHECK(r.code == 1);
  CHECK(r.err.find("width=8") != std::string::npos);
  CHECK(r.err.find("width=12") != std::string::npos);
}

TEST_CASE("uncaught numeric faults exit with the runtime code") {
  const fs::path cfg = scratch() / "hot.json";
  std::string text = base_config(7);
  text.replace(text.find("\"lr\": 0.005"), 11, "\"lr\": 1e160");
  spit(cfg, text);
  CmdResult r = run_cmd("adapt --config " + cfg.string() + " --checkpoint " +
                        shared_checkpoint().string() + " --out " +
                        (scratch() / "hot").string());
  CHECK(r.code == 2);
  CHECK(r.err.find("runtime fault") != std::string::npos);
}

TEST_CASE("verify lists each suite once and fails under fault injection") {
  CmdResult ok = run_cmd("verify --out " + (scratch() / "verify").string());
  CHECK(ok.code == 0);
  for (const char* suite :
       {"gradient", "tau_limit", "bn_mix", "restoration", "miou_oracle"}) {
    const std::string pass_line = std::string("PASS ") + suite;
    const auto first = ok.out.find(pass_line);
    REQUIRE(first != std::string::npos);
    CHECK(ok.out.find(pass_line, first + 1) == std::string::npos);
  }
  const auto doc =
      nlohmann::json::parse(slurp(scratch() / "verify" / "verify.json"));
  CHECK(doc.at("pass").get<bool>());
  CHECK(doc.at("suites").size() == 5);

  CmdResult bad = run_cmd("verify --self-test-fault");
  CHECK(bad.code == 3);
  CHECK(bad.out.find("FAIL gradient") != std::string::npos);
  CHECK(bad.out.find("PASS tau_limit") != std::string::npos);
}

TEST_CASE("report summarizes runs against the frozen baseline") {
  const fs::path method_dir = scratch() / "rt1";      // from the round-trip case
  const fs::path frozen_dir = scratch() / "frozen";   // from the frozen case
  REQUIRE(fs::exists(method_dir / "log.ndjson"));
  REQUIRE(fs::exists(frozen_dir / "log.ndjson"));
  const fs::path out = scratch() / "rep";
  CmdResult r = run_cmd("report " + method_dir.string() + " " +
                        frozen_dir.string() + " --out " + out.string());
  REQUIRE(r.code == 0);
  const auto lines = csv_lines(slurp(out / "report.csv"));
  REQUIRE(lines.size() == 3);
  CHECK(lines[0].rfind("dir,method,steps,final_miou", 0) == 0);
  CHECK(lines[1].find(",ocl,16,") != std::string::npos);
  CHECK(lines[2].find(",frozen,16,") != std::string::npos);
}

TEST_CASE("output root falls back to the environment variable") {
  const fs::path root = scratch() / "envroot";
  CmdResult r = run_cmd("pretrain --config " + shared_config().string(),
                        "TTA_OUT_ROOT=" + root.string());
  REQUIRE(r.code == 0);
  CHECK(fs::exists(root / "pretrain_seed7" / "checkpoint.bin"));
}
