#include "tta/metrics.hpp"

#include <cmath>
#include <string>

namespace tta {

ConfusionMatrix::ConfusionMatrix(int num_classes) : C_(num_classes) {
  if (num_classes < 1)
    throw ContractError("ConfusionMatrix: need at least one class");
  counts_.assign(static_cast<std::size_t>(C_) * C_, 0);
}

void ConfusionMatrix::add(std::span<const int> gt, std::span<const int> pred) {
  if (gt.size() != pred.size())
    throw ContractError("ConfusionMatrix::add: size mismatch");
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] < 0 || gt[i] >= C_ || pred[i] < 0 || pred[i] >= C_)
      throw ContractError("ConfusionMatrix::add: label outside [0," +
                          std::to_string(C_) + ")");
    ++counts_[static_cast<std::size_t>(gt[i]) * C_ + pred[i]];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.C_ != C_)
    throw ContractError("ConfusionMatrix::merge: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i)
    counts_[i] += other.counts_[i];
}

std::int64_t ConfusionMatrix::at(int gt, int pred) const {
  if (gt < 0 || gt >= C_ || pred < 0 || pred >= C_)
    throw ContractError("ConfusionMatrix::at: index out of range");
  return counts_[static_cast<std::size_t>(gt) * C_ + pred];
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (std::int64_t c : counts_) t += c;
  return t;
}

ClassIoU iou_per_class(const ConfusionMatrix& cm) {
  const int C = cm.num_classes();
  ClassIoU r;
  r.iou.assign(static_cast<std::size_t>(C), 0.0);
  r.defined.assign(static_cast<std::size_t>(C), false);
  for (int c = 0; c < C; ++c) {
    const std::int64_t tp = cm.at(c, c);
    std::int64_t fp = 0, fn = 0;
    for (int k = 0; k < C; ++k) {
      if (k == c) continue;
      fp += cm.at(k, c);
      fn += cm.at(c, k);
    }
    const std::int64_t denom = tp + fp + fn;
    if (denom > 0) {
      r.defined[static_cast<std::size_t>(c)] = true;
      r.iou[static_cast<std::size_t>(c)] =
          static_cast<double>(tp) / static_cast<double>(denom);
    }
  }
  return r;
}

double miou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ContractError("miou: no pixels scored");
  const ClassIoU r = iou_per_class(cm);
  double s = 0.0;
  int n = 0;
  for (int c = 0; c < cm.num_classes(); ++c)
    if (r.defined[static_cast<std::size_t>(c)]) {
      s += r.iou[static_cast<std::size_t>(c)];
      ++n;
    }
  return s / n;  // n >= 1 whenever total() > 0
}

std::vector<double> accumulated_miou(
    std::span<const ConfusionMatrix> per_image) {
  if (per_image.empty())
    throw ContractError("accumulated_miou: empty stream");
  ConfusionMatrix pooled(per_image[0].num_classes());
  std::vector<double> curve;
  curve.reserve(per_image.size());
  for (const ConfusionMatrix& cm : per_image) {
    pooled.merge(cm);
    curve.push_back(miou(pooled));
  }
  return curve;
}

std::vector<int> argmax_channel(const Tensor& scores) {
  const Shape& sh = scores.shape();
  int N, C, H, W;
  if (sh.size() == 3) {
    N = 1;
    C = sh[0];
    H = sh[1];
    W = sh[2];
  } else if (sh.size() == 4) {
    N = sh[0];
    C = sh[1];
    H = sh[2];
    W = sh[3];
  } else {
    throw ShapeError("argmax_channel: expected [C,H,W] or [N,C,H,W], got " +
                     shape_str(sh));
  }
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  std::vector<int> out(static_cast<std::size_t>(N) * HW);
  const double* S = scores.values().data();
  for (int n = 0; n < N; ++n)
    for (std::size_t p = 0; p < HW; ++p) {
      const std::size_t base = static_cast<std::size_t>(n) * C * HW + p;
      int best = 0;
      double bv = S[base];
      for (int c = 1; c < C; ++c) {
        const double v = S[base + static_cast<std::size_t>(c) * HW];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      out[static_cast<std::size_t>(n) * HW + p] = best;
    }
  return out;
}

std::vector<double> class_ratio(std::span<const int> pred, int num_classes) {
  if (pred.empty()) throw ContractError("class_ratio: empty prediction");
  std::vector<double> r(static_cast<std::size_t>(num_classes), 0.0);
  for (int p : pred) {
    if (p < 0 || p >= num_classes)
      throw ContractError("class_ratio: label outside range");
    r[static_cast<std::size_t>(p)] += 1.0;
  }
  const double inv = 1.0 / static_cast<double>(pred.size());
  for (double& v : r) v *= inv;
  return r;
}

double histogram_entropy(std::span<const double> ratio) {
  double h = 0.0;
  for (double p : ratio) {
    if (p < 0.0) throw ContractError("histogram_entropy: negative mass");
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

CollapseReport detect_collapse(std::span<const double> entropy_per_step,
                               double source_entropy, double fraction,
                               int consecutive) {
  CollapseReport rep;
  const double threshold = fraction * source_entropy;
  int run = 0;
  for (std::size_t i = 0; i < entropy_per_step.size(); ++i) {
    if (entropy_per_step[i] < threshold) {
      if (++run >= consecutive) {
        rep.collapsed = true;
        rep.first_flag_step = static_cast<int>(i);
        return rep;
      }
    } else {
      run = 0;
    }
  }
  return rep;
}

}  // namespace tta
