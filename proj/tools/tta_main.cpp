#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tta/engine.hpp"
#include "tta/error.hpp"
#include "tta/experiments.hpp"
#include "tta/metrics.hpp"
#include "tta/model.hpp"
#include "tta/rng.hpp"
#include "tta/runconfig.hpp"
#include "tta/synthdata.hpp"
#include "verify_suites.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tta;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string desc_str(const ModelDesc& d) {
  std::ostringstream os;
  os << "{in=" << d.in_channels << ", classes=" << d.num_classes
     << ", width=" << d.width << ", kernel=" << d.kernel_size
     << ", downsample=" << (d.downsample ? "true" : "false") << "}";
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open output file " + path.string());
  f << text;
  f.flush();
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + path.string());
  std::ostringstream buf;
  buf << f.rdbuf();
  return buf.str();
}

// One flag set per subcommand; only the chosen subcommand's copy is read.
struct RunFlags {
  std::string config, out, checkpoint, method;
  std::uint64_t seed = 0;
  double cl_tau = 0.0;
  bool ablation = false;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* cl_tau_opt = nullptr;
};

RunFlags* add_run_flags(CLI::App* sub,
                        std::vector<std::unique_ptr<RunFlags>>& store,
                        bool stream_verbs) {
  store.push_back(std::make_unique<RunFlags>());
  RunFlags* f = store.back().get();
  sub->add_option("--config", f->config, "run configuration (JSON)")
      ->required();
  sub->add_option("--out", f->out, "output directory (overrides config)");
  f->seed_opt =
      sub->add_option("--seed", f->seed, "run seed (overrides config)");
  if (stream_verbs) {
    sub->add_option("--checkpoint", f->checkpoint,
                    "source checkpoint (overrides config)");
    sub->add_option("--method", f->method,
                    "frozen|ocl|entropy|ocl_no_bn|ocl_no_restore|"
                    "cl_output_space (overrides config)");
    f->cl_tau_opt = sub->add_option(
        "--cl-tau", f->cl_tau, "temperature for cl_output_space");
  }
  return f;
}

// Precedence: flags > config file > defaults. Empty output directory
// falls back to $TTA_OUT_ROOT/<verb>_seed<seed>, then runs/.
RunConfig resolve(const RunFlags& f, const std::string& verb) {
  RunConfig c = load_run_config(f.config);
  if (f.seed_opt && f.seed_opt->count() > 0) c.seed = f.seed;
  if (!f.out.empty()) c.out = f.out;
  if (!f.checkpoint.empty()) c.checkpoint = f.checkpoint;
  if (!f.method.empty()) c.method = method_from_name(f.method);
  if (f.cl_tau_opt && f.cl_tau_opt->count() > 0) c.adapt.cl_tau = f.cl_tau;
  if (f.ablation) c.ablation = true;
  if (c.out.empty()) {
    const char* root = std::getenv("TTA_OUT_ROOT");
    const std::string base = (root && *root) ? root : "runs";
    c.out = base + "/" + verb + "_seed" + std::to_string(c.seed);
  }
  c.validate();
  return c;
}

ModelCheckpoint load_matching_checkpoint(const RunConfig& c) {
  if (c.checkpoint.empty())
    throw ConfigError(
        "a source checkpoint is required (config key \"checkpoint\" or "
        "--checkpoint)");
  ModelCheckpoint ckpt = load_checkpoint(c.checkpoint);
  if (!(ckpt.desc == c.model))
    throw ConfigError("checkpoint architecture " + desc_str(ckpt.desc) +
                      " does not match configured model " +
                      desc_str(c.model));
  return ckpt;
}

double final_miou(const EpisodeLog& log) {
  return log.records.empty() ? 0.0 : log.records.back().miou_accumulated;
}

std::string comparison_csv(const std::string& method, double method_miou,
                           double frozen_miou) {
  std::string csv = "method,miou\n";
  csv += method + "," + fmt(method_miou) + "\n";
  csv += "frozen," + fmt(frozen_miou) + "\n";
  return csv;
}

void write_episode_files(const fs::path& dir, const EpisodeLog& log) {
  write_text(dir / "log.ndjson", log.ndjson());
  write_text(dir / "summary.csv", log.csv());
}

int cmd_pretrain(const RunFlags& f) {
  RunConfig c = resolve(f, "pretrain");
  fs::create_directories(c.out);
  write_text(fs::path(c.out) / "config.json", resolved_config_text(c));

  auto data = generate(c.scene, ShiftSpec{}, c.pretrain_images,
                       Rng::mix(c.seed, 0x50));
  SegNetToy model(c.model, Rng::mix(c.seed, 0x51));
  PretrainConfig pc = c.pretrain;
  pc.seed = Rng::mix(c.seed, 0x52);
  PretrainReport rep = pretrain(model, data, pc);

  const fs::path ckpt_path = fs::path(c.out) / "checkpoint.bin";
  save_checkpoint(snapshot(model, rep.source_miou), ckpt_path.string());
  json metrics;
  metrics["epoch_loss"] = rep.epoch_loss;
  metrics["source_miou"] = rep.source_miou;
  metrics["chance_miou"] = 1.0 / c.scene.num_classes;
  write_text(fs::path(c.out) / "pretrain_metrics.json",
             metrics.dump(2) + "\n");
  std::cout << "pretrain: source mIoU " << fmt(rep.source_miou)
            << ", checkpoint " << ckpt_path.string() << "\n";
  return 0;
}

int cmd_adapt(const RunFlags& f) {
  RunConfig c = resolve(f, "adapt");
  ModelCheckpoint ckpt = load_matching_checkpoint(c);
  fs::create_directories(c.out);
  write_text(fs::path(c.out) / "config.json", resolved_config_text(c));

  Stream stream = make_condition_stream(c.scene, c.shifts, c.stream.count,
                                        Rng::mix(c.seed, 0x60));
  AdaptationConfig cfg = adaptation_for(c);

  if (c.ablation) {
    auto rows = run_ablation(ckpt, stream, cfg);
    std::string csv = "row,label,ocl,bn,restore,miou\n";
    for (const AblationRow& row : rows) {
      csv += std::to_string(row.row) + "," + row.label + "," +
             (row.ocl ? "1" : "0") + "," + (row.bn ? "1" : "0") + "," +
             (row.restore ? "1" : "0") + "," + fmt(row.miou) + "\n";
      std::cout << "ablation row " << row.row << " (" << row.label
                << "): mIoU " << fmt(row.miou) << "\n";
    }
    write_text(fs::path(c.out) / "ablation.csv", csv);
    return 0;
  }

  EpisodeLog log = run_episode(ckpt, stream, cfg);
  write_episode_files(c.out, log);
  const double method_miou = final_miou(log);
  const double frozen_miou =
      c.method == Method::Frozen
          ? method_miou
          : final_miou(
                run_episode(ckpt, stream, apply_method(Method::Frozen, cfg)));
  write_text(fs::path(c.out) / "comparison.csv",
             comparison_csv(method_name(c.method), method_miou, frozen_miou));
  std::cout << "adapt: " << method_name(c.method) << " mIoU "
            << fmt(method_miou) << " vs frozen " << fmt(frozen_miou) << "\n";
  return 0;
}

int cmd_continual(const RunFlags& f) {
  RunConfig c = resolve(f, "continual");
  ModelCheckpoint ckpt = load_matching_checkpoint(c);
  fs::create_directories(c.out);
  write_text(fs::path(c.out) / "config.json", resolved_config_text(c));

  auto streams = make_condition_streams(c.scene, c.shifts, c.stream.count,
                                        Rng::mix(c.seed, 0x60));
  AdaptationConfig cfg = adaptation_for(c);
  EpisodeLog log = run_continual(ckpt, streams, c.stream.rounds, cfg);
  write_episode_files(c.out, log);
  std::ostringstream table;
  log.write_table_csv(table);
  write_text(fs::path(c.out) / "table.csv", table.str());
  const double method_miou = final_miou(log);
  const double frozen_miou =
      c.method == Method::Frozen
          ? method_miou
          : final_miou(run_continual(ckpt, streams, c.stream.rounds,
                                     apply_method(Method::Frozen, cfg)));
  write_text(fs::path(c.out) / "comparison.csv",
             comparison_csv(method_name(c.method), method_miou, frozen_miou));
  std::cout << "continual: " << method_name(c.method) << " mIoU "
            << fmt(method_miou) << " vs frozen " << fmt(frozen_miou)
            << " over " << c.stream.rounds << " rounds x " << streams.size()
            << " conditions\n";
  return 0;
}

int cmd_verify(const std::string& out, bool self_test_fault) {
  auto results = tta::verify::run_all(self_test_fault);
  bool all = true;
  json suites = json::array();
  for (const auto& r : results) {
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.name;
    if (!r.detail.empty()) std::cout << " (" << r.detail << ")";
    std::cout << "\n";
    all = all && r.pass;
    suites.push_back({{"name", r.name}, {"pass", r.pass}, {"detail", r.detail}});
  }
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(fs::path(out) / "verify.json",
               json{{"pass", all}, {"suites", suites}}.dump(2) + "\n");
  }
  return all ? 0 : 3;
}

struct RunDigest {
  std::string dir, method;
  int steps = 0;
  double final_miou = 0.0;
  double mean_entropy = 0.0;
  std::vector<double> entropies;
};

RunDigest digest_run(const std::string& dir) {
  RunDigest d;
  d.dir = dir;
  json cfg;
  try {
    cfg = json::parse(read_text(fs::path(dir) / "config.json"));
  } catch (const json::exception& e) {
    throw ConfigError(dir + "/config.json: " + e.what());
  }
  d.method = cfg.value("method", std::string("?"));
  std::istringstream lines(read_text(fs::path(dir) / "log.ndjson"));
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
      const auto ratio = rec.at("class_ratio").get<std::vector<double>>();
      d.entropies.push_back(histogram_entropy(ratio));
      d.final_miou = rec.at("miou_accumulated").get<double>();
    } catch (const json::exception& e) {
      throw ConfigError(dir + "/log.ndjson line " +
                        std::to_string(d.steps + 1) + ": " + e.what());
    }
    ++d.steps;
  }
  if (d.steps == 0) throw ConfigError(dir + "/log.ndjson is empty");
  double sum = 0.0;
  for (double e : d.entropies) sum += e;
  d.mean_entropy = sum / d.steps;
  return d;
}

// Cross-run summary table. Collapse is judged against the mean prediction
// entropy of a frozen run when one is among the inputs; without that
// baseline the collapse columns stay empty.
int cmd_report(const std::vector<std::string>& dirs, const std::string& out) {
  std::vector<RunDigest> digests;
  for (const std::string& dir : dirs) digests.push_back(digest_run(dir));
  const RunDigest* frozen = nullptr;
  for (const RunDigest& d : digests)
    if (d.method == "frozen") {
      frozen = &d;
      break;
    }
  std::string csv = "dir,method,steps,final_miou,mean_entropy,collapsed,"
                    "first_collapse_step\n";
  for (const RunDigest& d : digests) {
    csv += d.dir + "," + d.method + "," + std::to_string(d.steps) + "," +
           fmt(d.final_miou) + "," + fmt(d.mean_entropy) + ",";
    if (frozen) {
      CollapseReport rep =
          detect_collapse(d.entropies, frozen->mean_entropy);
      csv += rep.collapsed ? "1" : "0";
      csv += ",";
      if (rep.collapsed) csv += std::to_string(rep.first_flag_step);
    } else {
      csv += ",";
    }
    csv += "\n";
  }
  std::cout << csv;
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(fs::path(out) / "report.csv", csv);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"online test-time adaptation for toy segmentation"};
  app.require_subcommand(1);
  std::vector<std::unique_ptr<RunFlags>> store;

  CLI::App* pre = app.add_subcommand(
      "pretrain", "train a source model, write checkpoint + metrics");
  RunFlags* pre_f = add_run_flags(pre, store, false);

  CLI::App* adapt = app.add_subcommand(
      "adapt", "adapt over one shifted stream, write logs + comparison");
  RunFlags* adapt_f = add_run_flags(adapt, store, true);
  adapt->add_flag("--ablation", adapt_f->ablation,
                  "run the five-row component grid instead of one method");

  CLI::App* cont = app.add_subcommand(
      "continual", "cycle through all conditions for several rounds");
  RunFlags* cont_f = add_run_flags(cont, store, true);

  CLI::App* verify =
      app.add_subcommand("verify", "re-run the built-in property suites");
  std::string verify_out;
  bool self_test_fault = false;
  verify->add_option("--out", verify_out, "where to write verify.json");
  verify->add_flag("--self-test-fault", self_test_fault,
                   "corrupt one analytic gradient; the gradient suite "
                   "must then fail");

  CLI::App* report =
      app.add_subcommand("report", "summarize finished run directories");
  std::vector<std::string> report_dirs;
  std::string report_out;
  report->add_option("dirs", report_dirs, "run directories to summarize")
      ->required();
  report->add_option("--out", report_out, "where to write report.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (pre->parsed()) return cmd_pretrain(*pre_f);
    if (adapt->parsed()) return cmd_adapt(*adapt_f);
    if (cont->parsed()) return cmd_continual(*cont_f);
    if (verify->parsed()) return cmd_verify(verify_out, self_test_fault);
    if (report->parsed()) return cmd_report(report_dirs, report_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime fault: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
