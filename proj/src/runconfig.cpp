#include "tta/runconfig.hpp"

#include <cmath>
#include <fstream>
#include <initializer_list>
#include <sstream>

#include "json.hpp"
#include "tta/error.hpp"

namespace tta {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw ConfigError(where + " must be a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* a : allowed)
      if (item.key() == a) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError("unknown key '" + item.key() + "' in " + where);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

ShiftSpec parse_shift(const json& j, const std::string& where) {
  if (j.is_string()) {
    try {
      return ShiftSpec::preset(j.get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  check_keys(j, where,
             {"condition", "brightness", "contrast", "noise_sigma", "hue",
              "gamma"});
  ShiftSpec s;
  read(j, "condition", s.condition, where);
  read(j, "brightness", s.brightness, where);
  read(j, "contrast", s.contrast, where);
  read(j, "noise_sigma", s.noise_sigma, where);
  read(j, "hue", s.hue, where);
  read(j, "gamma", s.gamma, where);
  return s;
}

json shift_json(const ShiftSpec& s) {
  return {{"condition", s.condition},   {"brightness", s.brightness},
          {"contrast", s.contrast},     {"noise_sigma", s.noise_sigma},
          {"hue", s.hue},               {"gamma", s.gamma}};
}

std::vector<ShiftSpec> default_shifts() {
  std::vector<ShiftSpec> out;
  for (const std::string& name : ShiftSpec::condition_names())
    out.push_back(ShiftSpec::preset(name));
  return out;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, "config",
             {"scene", "model", "pretrain", "adapt", "method", "shifts",
              "stream", "ablation", "checkpoint", "out", "seed"});

  RunConfig c;
  if (j.contains("scene")) {
    const json& s = j.at("scene");
    check_keys(s, "scene",
               {"height", "width", "num_classes", "freq_ratio",
                "background_class"});
    read(s, "height", c.scene.height, "scene");
    read(s, "width", c.scene.width, "scene");
    read(s, "num_classes", c.scene.num_classes, "scene");
    read(s, "freq_ratio", c.scene.freq_ratio, "scene");
    read(s, "background_class", c.scene.background_class, "scene");
  }
  c.model.num_classes = c.scene.num_classes;
  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, "model",
               {"in_channels", "num_classes", "width", "kernel_size",
                "downsample"});
    read(m, "in_channels", c.model.in_channels, "model");
    read(m, "num_classes", c.model.num_classes, "model");
    read(m, "width", c.model.width, "model");
    read(m, "kernel_size", c.model.kernel_size, "model");
    read(m, "downsample", c.model.downsample, "model");
  }
  if (j.contains("pretrain")) {
    const json& p = j.at("pretrain");
    check_keys(p, "pretrain",
               {"images", "epochs", "batch_size", "lr", "momentum",
                "weight_decay", "bn_momentum"});
    read(p, "images", c.pretrain_images, "pretrain");
    read(p, "epochs", c.pretrain.epochs, "pretrain");
    read(p, "batch_size", c.pretrain.batch_size, "pretrain");
    read(p, "lr", c.pretrain.lr, "pretrain");
    read(p, "momentum", c.pretrain.momentum, "pretrain");
    read(p, "weight_decay", c.pretrain.weight_decay, "pretrain");
    read(p, "bn_momentum", c.pretrain.bn_momentum, "pretrain");
  }
  if (j.contains("adapt")) {
    const json& a = j.at("adapt");
    check_keys(a, "adapt",
               {"lambda_pos", "lambda_neg", "bn_alpha", "restore_p", "lr",
                "momentum", "weight_decay", "stride", "pos_stride",
                "joint_view_stats", "cl_tau"});
    read(a, "lambda_pos", c.adapt.lambda_pos, "adapt");
    read(a, "lambda_neg", c.adapt.lambda_neg, "adapt");
    read(a, "bn_alpha", c.adapt.bn_alpha, "adapt");
    read(a, "restore_p", c.adapt.restore_p, "adapt");
    read(a, "lr", c.adapt.lr, "adapt");
    read(a, "momentum", c.adapt.momentum, "adapt");
    read(a, "weight_decay", c.adapt.weight_decay, "adapt");
    read(a, "stride", c.adapt.stride, "adapt");
    read(a, "pos_stride", c.adapt.pos_stride, "adapt");
    read(a, "joint_view_stats", c.adapt.joint_view_stats, "adapt");
    read(a, "cl_tau", c.adapt.cl_tau, "adapt");
  }
  if (j.contains("method")) {
    std::string name;
    read(j, "method", name, "config");
    c.method = method_from_name(name);
  }
  if (j.contains("shifts")) {
    const json& sh = j.at("shifts");
    if (!sh.is_array()) throw ConfigError("shifts must be an array");
    for (std::size_t i = 0; i < sh.size(); ++i)
      c.shifts.push_back(
          parse_shift(sh[i], "shifts[" + std::to_string(i) + "]"));
  } else {
    c.shifts = default_shifts();
  }
  if (j.contains("stream")) {
    const json& st = j.at("stream");
    check_keys(st, "stream", {"count", "rounds"});
    read(st, "count", c.stream.count, "stream");
    read(st, "rounds", c.stream.rounds, "stream");
  }
  read(j, "ablation", c.ablation, "config");
  read(j, "checkpoint", c.checkpoint, "config");
  read(j, "out", c.out, "config");
  read(j, "seed", c.seed, "config");
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config file not found: " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  try {
    return parse_run_config(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void RunConfig::validate() const {
  if (scene.height < 8 || scene.width < 8)
    throw ConfigError("scene must be at least 8x8");
  if (scene.height % 4 != 0 || scene.width % 4 != 0)
    throw ConfigError("scene dimensions must be divisible by 4");
  if (scene.num_classes < 2) throw ConfigError("scene needs >= 2 classes");
  if (!(scene.freq_ratio > 0.0 && scene.freq_ratio <= 1.0))
    throw ConfigError("scene.freq_ratio must lie in (0, 1]");
  if (scene.background_class < 0 ||
      scene.background_class >= scene.num_classes)
    throw ConfigError("scene.background_class out of range");
  if (model.num_classes != scene.num_classes)
    throw ConfigError("model.num_classes (" +
                      std::to_string(model.num_classes) +
                      ") must match scene.num_classes (" +
                      std::to_string(scene.num_classes) + ")");
  if (model.in_channels != 3)
    throw ConfigError("model.in_channels must be 3 for synthetic scenes");
  if (pretrain_images < 1) throw ConfigError("pretrain.images must be >= 1");
  if (pretrain.epochs < 1 || pretrain.batch_size < 1)
    throw ConfigError("pretrain.epochs and batch_size must be >= 1");
  if (!(pretrain.lr > 0.0) || !std::isfinite(pretrain.lr))
    throw ConfigError("pretrain.lr must be finite and positive");
  if (!(pretrain.bn_momentum > 0.0 && pretrain.bn_momentum <= 1.0))
    throw ConfigError("pretrain.bn_momentum must lie in (0, 1]");
  if (shifts.empty()) throw ConfigError("shifts must not be empty");
  for (const ShiftSpec& s : shifts) s.validate();
  if (stream.count < 1) throw ConfigError("stream.count must be >= 1");
  if (stream.rounds < 1) throw ConfigError("stream.rounds must be >= 1");
  adaptation_for(*this).validate();
}

std::string resolved_config_text(const RunConfig& c) {
  json j;
  j["scene"] = {{"height", c.scene.height},
                {"width", c.scene.width},
                {"num_classes", c.scene.num_classes},
                {"freq_ratio", c.scene.freq_ratio},
                {"background_class", c.scene.background_class}};
  j["model"] = {{"in_channels", c.model.in_channels},
                {"num_classes", c.model.num_classes},
                {"width", c.model.width},
                {"kernel_size", c.model.kernel_size},
                {"downsample", c.model.downsample}};
  j["pretrain"] = {{"images", c.pretrain_images},
                   {"epochs", c.pretrain.epochs},
                   {"batch_size", c.pretrain.batch_size},
                   {"lr", c.pretrain.lr},
                   {"momentum", c.pretrain.momentum},
                   {"weight_decay", c.pretrain.weight_decay},
                   {"bn_momentum", c.pretrain.bn_momentum}};
  j["adapt"] = {{"lambda_pos", c.adapt.lambda_pos},
                {"lambda_neg", c.adapt.lambda_neg},
                {"bn_alpha", c.adapt.bn_alpha},
                {"restore_p", c.adapt.restore_p},
                {"lr", c.adapt.lr},
                {"momentum", c.adapt.momentum},
                {"weight_decay", c.adapt.weight_decay},
                {"stride", c.adapt.stride},
                {"pos_stride", c.adapt.pos_stride},
                {"joint_view_stats", c.adapt.joint_view_stats},
                {"cl_tau", c.adapt.cl_tau}};
  j["method"] = method_name(c.method);
  json shifts = json::array();
  for (const ShiftSpec& s : c.shifts) shifts.push_back(shift_json(s));
  j["shifts"] = shifts;
  j["stream"] = {{"count", c.stream.count}, {"rounds", c.stream.rounds}};
  j["ablation"] = c.ablation;
  j["checkpoint"] = c.checkpoint;
  j["out"] = c.out;
  j["seed"] = c.seed;
  return j.dump(2) + "\n";
}

AdaptationConfig adaptation_for(const RunConfig& c) {
  AdaptationConfig a = apply_method(c.method, c.adapt);
  a.seed = c.seed;
  return a;
}

}  // namespace tta
