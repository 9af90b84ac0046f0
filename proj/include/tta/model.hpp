#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tta/synthdata.hpp"
#include "tta/tensor.hpp"

namespace tta {

// How BN layers normalize during a forward pass.
//   BatchStats:  batch statistics, gradients flow through them (pretraining)
//   TrainStats:  stored running statistics (standard eval)
//   MixedStats:  alpha-blended train/test statistics
//   CollectTest: batch statistics, additionally captured as the test stats
enum class BnMode { BatchStats, TrainStats, MixedStats, CollectTest };

struct ModelDesc {
  int in_channels = 3;
  int num_classes = 6;
  int width = 16;
  int kernel_size = 3;    // 1 gives the flip-equivariant oracle variant
  bool downsample = true; // two stride-2 encoder convs + two 2x upsamples
  bool operator==(const ModelDesc&) const = default;
};

struct BNLayerState {
  std::vector<double> mu_train, var_train;  // running stats, init N(0,1)
  std::vector<double> mu_test, var_test;    // per-image estimates
  std::vector<double> mu_mixed, var_mixed;  // alpha*train + (1-alpha)*test
  std::vector<double> mu_batch, var_batch;  // scratch from last batch pass
  double alpha = 1.0;

  bool has_test() const { return !mu_test.empty(); }
  bool has_mixed() const { return !mu_mixed.empty(); }
};

struct ConvBlock {
  std::string name;
  Tensor w, b;
  int stride = 1;
  int pad = 0;
  bool upsample_before = false;
  bool has_bn = false;
  Tensor gamma, beta;
  BNLayerState bn;
};

// Encoder-decoder per-pixel classifier: 7 conv+BN+relu blocks and a 1x1
// head. Output spatial size always equals input spatial size.
class SegNetToy {
 public:
  SegNetToy(const ModelDesc& desc, std::uint64_t seed);

  // Tensor handles share buffers, so an implicit copy would alias all
  // parameters; clone through snapshot()/model_from_checkpoint instead.
  SegNetToy(const SegNetToy&) = delete;
  SegNetToy& operator=(const SegNetToy&) = delete;
  SegNetToy(SegNetToy&&) = default;
  SegNetToy& operator=(SegNetToy&&) = default;

  const ModelDesc& desc() const { return desc_; }

  // x: [N,in_channels,H,W] -> logits [N,num_classes,H,W].
  Tensor forward(const Tensor& x, BnMode mode);

  // image: [in_channels,H,W] in [0,1] -> per-pixel simplex [num_classes,H,W].
  // Only the two inference modes are allowed here.
  Tensor predict_probs(const Tensor& image, BnMode mode);

  void estimate_test_stats(const Tensor& batch);  // CollectTest pass, no tape
  void modulate(double alpha);  // mixed = alpha*train + (1-alpha)*test
  void clear_test_stats();
  void update_train_stats(double momentum);  // run <- (1-m)*run + m*batch

  std::vector<Tensor> parameters() const;         // conv + BN affine
  std::vector<Tensor> affine_parameters() const;  // BN gamma/beta only
  std::size_t parameter_count() const;

  std::size_t num_blocks() const { return blocks_.size(); }
  ConvBlock& block(std::size_t i) { return blocks_.at(i); }
  const ConvBlock& block(std::size_t i) const { return blocks_.at(i); }

 private:
  ModelDesc desc_;
  std::vector<ConvBlock> blocks_;
};

// Flat, ordered parameter/statistic container; the serialized form.
struct ModelCheckpoint {
  ModelDesc desc;
  struct Entry {
    std::string name;
    std::vector<double> data;
  };
  std::vector<Entry> entries;
  double source_miou = -1.0;

  const Entry* find(const std::string& name) const;
};

ModelCheckpoint snapshot(const SegNetToy& model, double source_miou = -1.0);
void restore(SegNetToy& model, const ModelCheckpoint& ckpt);
SegNetToy model_from_checkpoint(const ModelCheckpoint& ckpt);

// Versioned container: magic "TTACKPT1", JSON header (architecture, entry
// table, source mIoU), then raw little-endian float64 payload. Round-trip is
// bit-exact.
void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path);
ModelCheckpoint load_checkpoint(const std::string& path);

struct PretrainConfig {
  int epochs = 12;
  int batch_size = 8;
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double bn_momentum = 0.1;
  std::uint64_t seed = 1;
};

struct PretrainReport {
  std::vector<double> epoch_loss;
  double source_miou = 0.0;  // pooled, TrainStats mode, on the given data
};

// Cross-entropy training on labeled source data; freezes running BN stats.
PretrainReport pretrain(SegNetToy& model, const std::vector<Sample>& data,
                        const PretrainConfig& cfg);

// Pooled mIoU of model predictions over a labeled set.
double evaluate_miou(SegNetToy& model, const std::vector<Sample>& data,
                     BnMode mode);

}  // namespace tta
