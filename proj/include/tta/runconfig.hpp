#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tta/engine.hpp"
#include "tta/experiments.hpp"
#include "tta/model.hpp"
#include "tta/synthdata.hpp"

namespace tta {

struct StreamSpec {
  int count = 40;  // images generated per condition
  int rounds = 1;  // repetitions of the condition group (continual runs)
};

// Superset document driving every command. JSON parsing is strict: an
// unknown key at any level is a ConfigError, so typos cannot silently
// fall back to defaults. Component toggles are not part of the document;
// they derive from `method`.
struct RunConfig {
  SceneSpec scene;
  ModelDesc model;
  PretrainConfig pretrain;
  int pretrain_images = 64;      // labeled source images for `pretrain`
  AdaptationConfig adapt;        // numeric knobs only; see adaptation_for
  Method method = Method::Ocl;
  std::vector<ShiftSpec> shifts; // default: the four named conditions
  StreamSpec stream;
  bool ablation = false;         // adapt: run the five-row component grid
  std::string checkpoint;        // input path for adapt/continual
  std::string out;               // output directory; empty = env/default
  std::uint64_t seed = 0;

  void validate() const;  // ConfigError; includes the derived AdaptationConfig
};

// Strict parse of a JSON document / file. load names the path in every
// error it raises.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// Fully-resolved round-trip form: every accepted key present, defaults
// materialized. Parsing the result reproduces the config exactly.
std::string resolved_config_text(const RunConfig& c);

// Method preset applied on top of the numeric knobs, run seed wired in.
AdaptationConfig adaptation_for(const RunConfig& c);

}  // namespace tta
