#pragma once

#include <string>
#include <vector>

#include "tta/engine.hpp"

namespace tta {

// Named adaptation recipes selectable from run configs. `ocl` is the full
// pipeline; the `ocl_no_*` variants drop one component each; `entropy` is
// the affine-only entropy-minimization baseline; `cl_output_space` swaps in
// the temperature-controlled contrastive loss over output vectors.
enum class Method {
  Frozen,
  Ocl,
  Entropy,
  OclNoBn,
  OclNoRestore,
  ClOutputSpace,
};

const char* method_name(Method m);
Method method_from_name(const std::string& name);  // ConfigError on unknown

// Applies the method's toggles on top of shared settings (lr, seed, ...).
AdaptationConfig apply_method(Method m, AdaptationConfig base);

// Stream assembly: `count` images per condition, one condition after the
// other, condition ids in list order. Image seeds differ per condition.
Stream make_condition_stream(const SceneSpec& scene,
                             const std::vector<ShiftSpec>& shifts, int count,
                             std::uint64_t seed);
std::vector<Stream> make_condition_streams(const SceneSpec& scene,
                                           const std::vector<ShiftSpec>& shifts,
                                           int count, std::uint64_t seed);

// Mean of the per-step predicted-class ratios; sums to 1 for equal-size
// images. Empty logs are rejected.
std::vector<double> mean_class_ratio(const EpisodeLog& log);
double ratio_entropy(const EpisodeLog& log);  // entropy of the mean ratio
std::vector<double> step_ratio_entropies(const EpisodeLog& log);

// Component ablation: the five-row grid from no adaptation to the full
// pipeline, all adapted from the same checkpoint over the same stream.
struct AblationRow {
  int row = 0;  // 1-based, matching the published grid
  std::string label;
  bool ocl = false;
  bool bn = false;
  bool restore = false;
  double miou = 0.0;  // pooled over the stream
};
std::vector<AblationRow> run_ablation(const ModelCheckpoint& source,
                                      const Stream& stream,
                                      const AdaptationConfig& base);

// Temperature sweep: adapt a fresh model copy per temperature with the
// output-space contrastive loss and report the resulting class histograms;
// low temperatures flatten the histogram (higher entropy).
struct TemperatureRatioReport {
  struct Row {
    double tau = 0.0;
    std::vector<double> ratio;
    double entropy = 0.0;
  };
  std::vector<Row> rows;
  std::vector<double> frozen_ratio;  // no adaptation, same stream
  double frozen_entropy = 0.0;
};
TemperatureRatioReport class_ratio_vs_temperature(
    const ModelCheckpoint& source, const Stream& stream,
    const std::vector<double>& taus, const AdaptationConfig& base);

}  // namespace tta
