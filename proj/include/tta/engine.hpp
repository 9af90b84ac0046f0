#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "tta/model.hpp"
#include "tta/ocl.hpp"
#include "tta/optim.hpp"
#include "tta/synthdata.hpp"

namespace tta {

// Objective minimized during the online update: the two-term contrastive
// loss over both views, mean prediction entropy (single view) as the
// collapse-prone baseline, or the full temperature-controlled contrastive
// loss over sampled output vectors of both views.
enum class LossKind { Ocl, Entropy, ReferenceCl };

struct AdaptationConfig {
  double lambda_pos = 3.0;
  double lambda_neg = 1.0;
  double bn_alpha = 0.85;   // mixed = alpha*train + (1-alpha)*test
  double restore_p = 0.01;  // per-element reset probability
  double lr = 0.005;        // 0 is allowed and makes the update a no-op
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int stride = 8;      // pairwise-term sampling grid
  int pos_stride = 1;  // positive-term sampling grid (1 = all pixels)
  bool enable_bn_mod = true;
  bool enable_restore = true;
  bool enable_ocl = true;        // false = frozen model, predictions only
  bool affine_only = false;      // update only BN gamma/beta
  bool joint_view_stats = true;  // test stats over both views vs original only
  LossKind loss = LossKind::Ocl;
  double cl_tau = 1.0;  // temperature for LossKind::ReferenceCl
  std::uint64_t seed = 0;
  // Test fixture: simulate a numeric fault in the loss phase at this step.
  int inject_fault_at_step = -1;

  void validate() const;  // ConfigError on out-of-range fields
};

struct StreamItem {
  Tensor image;  // [C,H,W] in [0,1]
  std::vector<int> labels;
  int condition = 0;
};
using Stream = std::vector<StreamItem>;

struct StepRecord {
  int step = 0;
  int condition = 0;
  int round = 0;
  // nan when the update phase did not run or faulted before producing them.
  double loss_pos = 0.0;
  double loss_neg = 0.0;
  double loss_total = 0.0;
  double miou_image = 0.0;
  double miou_accumulated = 0.0;
  std::vector<double> class_ratio;  // predicted-class pixel shares, size C
  bool update_applied = false;
  bool fault = false;
  std::string fault_what;
};

struct EpisodeLog {
  int num_classes = 0;
  std::vector<StepRecord> records;
  // Argmax label maps per step, kept only when requested.
  std::vector<std::vector<int>> predictions;

  struct TableRow {
    int round = 0;
    int condition = 0;
    double miou = 0.0;
  };
  std::vector<TableRow> table;  // pooled mIoU per (round, condition)

  void write_ndjson(std::ostream& os) const;
  void write_csv(std::ostream& os) const;
  void write_table_csv(std::ostream& os) const;
  std::string ndjson() const;
  std::string csv() const;
};

// Re-mixes every BN layer's train/test statistics in place.
void bn_modulate(SegNetToy& model, double alpha);

// Mean per-pixel Shannon entropy of a prediction map (0*log 0 := 0).
Tensor entropy_loss(const PredictionMap& pred);

// Resets each weight element to its source-checkpoint value independently
// with probability p. BN running statistics and optimizer state are left
// alone. The mask is reproducible: it depends only on (seed, step, layer).
void stochastic_restore(SegNetToy& model, const ModelCheckpoint& source,
                        double p, std::uint64_t seed, int step);

struct LossValues {
  double pos = 0.0;
  double neg = 0.0;
  double total = 0.0;
};

// Evaluates the configured loss on one image without touching parameters,
// BN statistics, or optimizer state. `mode` selects the normalization the
// forward passes use (TrainStats or MixedStats with already-set stats).
LossValues eval_loss(SegNetToy& model, const Tensor& image,
                     const AdaptationConfig& cfg, BnMode mode);

struct TttStepResult {
  Tensor prediction;  // [C,H,W] simplex map, scored output
  StepRecord record;  // losses and update/fault flags; metrics filled later
};

// One online step: (1) estimate + mix BN statistics if enabled, (2) emit the
// prediction — strictly before any parameter change, (3) one gradient step
// on the configured loss over the two views, (4) stochastic restoration.
// A numeric fault inside the loss phase skips the update for this image and
// is recorded; the prediction survives.
TttStepResult ttt_step(SegNetToy& model, SgdOptimizer& opt,
                       const ModelCheckpoint& source, const Tensor& image,
                       const AdaptationConfig& cfg, int step_index);

// Sequential ttt_step over the stream on a model freshly restored from the
// checkpoint; per-image metrics plus the accumulated-mIoU curve.
EpisodeLog run_episode(const ModelCheckpoint& source, const Stream& stream,
                       const AdaptationConfig& cfg,
                       bool keep_predictions = false);

// One model instance adapted through condition streams repeated `rounds`
// times without reset. Records carry (round, condition-index); the table
// holds exactly rounds x streams pooled-mIoU rows.
EpisodeLog run_continual(const ModelCheckpoint& source,
                         const std::vector<Stream>& streams, int rounds,
                         const AdaptationConfig& cfg,
                         bool keep_predictions = false);

}  // namespace tta
