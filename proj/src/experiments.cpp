#include "tta/experiments.hpp"

#include <utility>

#include "tta/error.hpp"
#include "tta/metrics.hpp"
#include "tta/rng.hpp"

namespace tta {

const char* method_name(Method m) {
  switch (m) {
    case Method::Frozen: return "frozen";
    case Method::Ocl: return "ocl";
    case Method::Entropy: return "entropy";
    case Method::OclNoBn: return "ocl_no_bn";
    case Method::OclNoRestore: return "ocl_no_restore";
    case Method::ClOutputSpace: return "cl_output_space";
  }
  throw ContractError("unreachable method");
}

Method method_from_name(const std::string& name) {
  for (Method m : {Method::Frozen, Method::Ocl, Method::Entropy,
                   Method::OclNoBn, Method::OclNoRestore,
                   Method::ClOutputSpace})
    if (name == method_name(m)) return m;
  throw ConfigError("unknown method '" + name + "'");
}

AdaptationConfig apply_method(Method m, AdaptationConfig base) {
  switch (m) {
    case Method::Frozen:
      base.enable_ocl = base.enable_bn_mod = base.enable_restore = false;
      break;
    case Method::Ocl:
      base.loss = LossKind::Ocl;
      base.enable_ocl = base.enable_bn_mod = base.enable_restore = true;
      break;
    case Method::Entropy:
      // Entropy minimization over the BN affine parameters only, no
      // restoration: the classic collapse-prone baseline.
      base.loss = LossKind::Entropy;
      base.enable_ocl = base.enable_bn_mod = true;
      base.enable_restore = false;
      base.affine_only = true;
      break;
    case Method::OclNoBn:
      base.loss = LossKind::Ocl;
      base.enable_ocl = base.enable_restore = true;
      base.enable_bn_mod = false;
      break;
    case Method::OclNoRestore:
      base.loss = LossKind::Ocl;
      base.enable_ocl = base.enable_bn_mod = true;
      base.enable_restore = false;
      break;
    case Method::ClOutputSpace:
      // Isolates the temperature effect on class ratios: no restoration
      // pulling the weights back toward the source.
      base.loss = LossKind::ReferenceCl;
      base.enable_ocl = base.enable_bn_mod = true;
      base.enable_restore = false;
      break;
  }
  return base;
}

Stream make_condition_stream(const SceneSpec& scene,
                             const std::vector<ShiftSpec>& shifts, int count,
                             std::uint64_t seed) {
  Stream out;
  for (std::size_t c = 0; c < shifts.size(); ++c) {
    auto samples = generate(scene, shifts[c], count, Rng::mix(seed, 0xC0, c));
    for (Sample& s : samples)
      out.push_back({std::move(s.image), std::move(s.labels),
                     static_cast<int>(c)});
  }
  return out;
}

std::vector<Stream> make_condition_streams(const SceneSpec& scene,
                                           const std::vector<ShiftSpec>& shifts,
                                           int count, std::uint64_t seed) {
  std::vector<Stream> out;
  for (std::size_t c = 0; c < shifts.size(); ++c) {
    Stream s;
    auto samples = generate(scene, shifts[c], count, Rng::mix(seed, 0xC0, c));
    for (Sample& smp : samples)
      s.push_back({std::move(smp.image), std::move(smp.labels),
                   static_cast<int>(c)});
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<double> mean_class_ratio(const EpisodeLog& log) {
  if (log.records.empty())
    throw ContractError("class ratio of an empty log is undefined");
  std::vector<double> mean(log.num_classes, 0.0);
  for (const StepRecord& r : log.records)
    for (int c = 0; c < log.num_classes; ++c) mean[c] += r.class_ratio[c];
  for (double& v : mean) v /= static_cast<double>(log.records.size());
  return mean;
}

double ratio_entropy(const EpisodeLog& log) {
  return histogram_entropy(mean_class_ratio(log));
}

std::vector<double> step_ratio_entropies(const EpisodeLog& log) {
  std::vector<double> out;
  out.reserve(log.records.size());
  for (const StepRecord& r : log.records)
    out.push_back(histogram_entropy(r.class_ratio));
  return out;
}

std::vector<AblationRow> run_ablation(const ModelCheckpoint& source,
                                      const Stream& stream,
                                      const AdaptationConfig& base) {
  struct RowSpec {
    const char* label;
    bool ocl, bn, restore;
  };
  static const RowSpec kRows[5] = {
      {"none", false, false, false},
      {"ocl", true, false, false},
      {"ocl+bn", true, true, false},
      {"ocl+restore", true, false, true},
      {"ocl+bn+restore", true, true, true},
  };
  std::vector<AblationRow> out;
  for (int i = 0; i < 5; ++i) {
    AdaptationConfig cfg = base;
    cfg.loss = LossKind::Ocl;
    cfg.enable_ocl = kRows[i].ocl;
    cfg.enable_bn_mod = kRows[i].bn;
    cfg.enable_restore = kRows[i].restore;
    EpisodeLog log = run_episode(source, stream, cfg);
    AblationRow row;
    row.row = i + 1;
    row.label = kRows[i].label;
    row.ocl = kRows[i].ocl;
    row.bn = kRows[i].bn;
    row.restore = kRows[i].restore;
    row.miou = log.records.empty() ? 0.0
                                   : log.records.back().miou_accumulated;
    out.push_back(std::move(row));
  }
  return out;
}

TemperatureRatioReport class_ratio_vs_temperature(
    const ModelCheckpoint& source, const Stream& stream,
    const std::vector<double>& taus, const AdaptationConfig& base) {
  if (stream.empty())
    throw ContractError("temperature sweep needs a nonempty stream");
  TemperatureRatioReport rep;
  {
    EpisodeLog frozen =
        run_episode(source, stream, apply_method(Method::Frozen, base));
    rep.frozen_ratio = mean_class_ratio(frozen);
    rep.frozen_entropy = histogram_entropy(rep.frozen_ratio);
  }
  for (double tau : taus) {
    AdaptationConfig cfg = apply_method(Method::ClOutputSpace, base);
    cfg.cl_tau = tau;
    EpisodeLog log = run_episode(source, stream, cfg);
    TemperatureRatioReport::Row row;
    row.tau = tau;
    row.ratio = mean_class_ratio(log);
    row.entropy = histogram_entropy(row.ratio);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace tta
