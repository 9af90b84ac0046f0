#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tta/tensor.hpp"

namespace tta {

// Integer confusion counts; rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  void add(std::span<const int> gt, std::span<const int> pred);
  void merge(const ConfusionMatrix& other);

  std::int64_t at(int gt, int pred) const;
  std::int64_t total() const;
  int num_classes() const { return C_; }

 private:
  int C_;
  std::vector<std::int64_t> counts_;
};

// IoU_c = TP / (TP + FP + FN). A class absent from both ground truth and
// prediction is undefined and excluded, never zero-filled.
struct ClassIoU {
  std::vector<double> iou;
  std::vector<bool> defined;
};

ClassIoU iou_per_class(const ConfusionMatrix& cm);

// Mean over defined classes. ContractError when nothing has been scored.
double miou(const ConfusionMatrix& cm);

// Running pooled mIoU: entry n is miou of the summed matrices 0..n.
std::vector<double> accumulated_miou(std::span<const ConfusionMatrix> per_image);

// Channel-axis argmax of [C,H,W] or [N,C,H,W] scores; ties pick the lowest id.
std::vector<int> argmax_channel(const Tensor& scores);

std::vector<double> class_ratio(std::span<const int> pred, int num_classes);

// Shannon entropy in nats with 0*log(0) := 0. Input need not be normalized
// exactly; negative entries are a contract error.
double histogram_entropy(std::span<const double> ratio);

// Flags when the per-step prediction-histogram entropy stays strictly below
// fraction*source_entropy for `consecutive` steps in a row. first_flag_step
// is the step completing the run (-1 when never flagged).
struct CollapseReport {
  bool collapsed = false;
  int first_flag_step = -1;
};

CollapseReport detect_collapse(std::span<const double> entropy_per_step,
                               double source_entropy, double fraction = 0.25,
                               int consecutive = 10);

}  // namespace tta
