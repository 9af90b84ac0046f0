#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tta/error.hpp"

namespace tta {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

class Tape;

// Dense float64 tensor. Values are immutable once an op has produced them;
// only the grad buffer (and leaf parameter data, between graphs) may change.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int dim(int i) const;
  std::size_t size() const;

  std::span<double> values();
  std::span<const double> values() const;
  double operator[](std::size_t flat_index) const;
  double item() const;  // scalar tensors only

  bool requires_grad() const;
  void set_requires_grad(bool rg);

  bool has_grad() const;
  std::span<double> grad();              // allocates zeroed buffer on demand
  std::span<const double> grad() const;  // ContractError when absent
  std::span<double> grad_buf() const;    // autodiff write path: allocate+view
  void zero_grad();
  void reset_grad();  // allocate + clear

  // True when backward will deliver a gradient here: either a leaf that
  // requires grad, or an intermediate recorded on the given tape.
  bool tracked_on(const Tape* tape) const;
  bool is_leaf() const;

  bool same_buffer(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend class Tape;
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty == absent
    bool requires_grad = false;
    const Tape* tape = nullptr;  // set when produced by a recorded op
    std::uint64_t tape_epoch = 0;
  };
  std::shared_ptr<Impl> impl_;
};

// Records each operation of a forward pass (inputs already recorded precede
// their consumers by construction) and replays the backward rules in reverse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  // Seeds d(loss)/d(loss) = 1 and propagates. Leaf gradients accumulate
  // across repeated calls; intermediate gradients are transient per call.
  void backward(const Tensor& loss);

  void record(const char* op, Tensor& output, std::function<void()> backward);

  std::size_t size() const { return records_.size(); }
  std::uint64_t epoch() const { return epoch_; }
  void clear();

  static Tape* active();

 private:
  friend class TapeScope;
  struct Record {
    const char* op;
    Tensor output;
    std::function<void()> backward;
  };
  std::vector<Record> records_;
  std::uint64_t epoch_ = 1;
};

// RAII activation of a tape for the current thread. Ops record themselves
// only while a tape is active and some input is tracked.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// ---------------------------------------------------------------------------
// Operations. All run eagerly; when a tape is active and an input is tracked,
// the matching backward rule is recorded. Every op validates shapes
// (ShapeError) and rejects non-finite outputs (NumericFault).
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor transpose(const Tensor& a);                // [m,n] -> [n,m]
Tensor reshape(const Tensor& a, Shape shape);     // same element count

Tensor sum(const Tensor& a);      // -> scalar
Tensor mean(const Tensor& a);     // -> scalar
Tensor l2_norm(const Tensor& a);  // -> scalar, sqrt(sum x^2)

// Softmax along `axis`, log-sum-exp stabilized. Output sums to 1 along the
// axis within 1e-9.
Tensor softmax(const Tensor& a, int axis);

// x: [N,Cin,H,W], w: [Cout,Cin,kh,kw], optional bias [Cout]. Zero padding,
// floor output size: Ho = (H + 2*pad - kh)/stride + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int pad);
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);

Tensor upsample_nearest_2x(const Tensor& x);  // [N,C,H,W] -> [N,C,2H,2W]

// y = gamma * (x - mu)/sqrt(var + eps) + beta with mu/var held constant.
// x: [N,C,H,W]; gamma/beta: [C]; mu/var: C values.
Tensor batchnorm_fixed(const Tensor& x, const Tensor& gamma,
                       const Tensor& beta, std::span<const double> mu,
                       std::span<const double> var, double eps);

// Same affine form but normalizing by the batch statistics of x (population
// variance over N*H*W per channel); gradients flow through the statistics.
// When batch_mu/batch_var are non-null they receive the computed statistics.
Tensor batchnorm_train(const Tensor& x, const Tensor& gamma,
                       const Tensor& beta, double eps,
                       std::vector<double>* batch_mu,
                       std::vector<double>* batch_var);

Tensor flip_w(const Tensor& x);  // mirror along the last (width) axis

// Select pixels of one image on a stride grid and lay them out as rows:
// x [N,C,H,W] or [C,H,W] -> [ceil(H/s)*ceil(W/s), C].
Tensor pixels_to_rows(const Tensor& x, int batch_index, int stride);

Tensor l2_normalize_rows(const Tensor& x);  // [R,C], zero rows rejected
Tensor concat_rows(const Tensor& a, const Tensor& b);

// out[r] = log(sum_{k != r} exp(s[r][k] * inv_tau)), stabilized. s: [R,R].
Tensor masked_row_logsumexp(const Tensor& s, double inv_tau);

// Weighted sum of selected matrix entries -> scalar.
Tensor gather_weighted_sum(const Tensor& s,
                           const std::vector<std::pair<int, int>>& entries,
                           const std::vector<double>& weights);

// Mean over pixels of (logsumexp(logits) - logit[label]).
// logits: [N,C,H,W]; labels: N*H*W class ids in row-major (n,h,w) order.
Tensor cross_entropy_with_logits(const Tensor& logits,
                                 std::span<const int> labels);

// Mean over pixels of the Shannon entropy of the channel distribution,
// with 0*log(0) := 0. probs: [N,C,H,W] or [C,H,W].
Tensor mean_pixel_entropy(const Tensor& probs);

// Plain utility (never recorded): stack [C,H,W] images into [N,C,H,W].
Tensor stack_images(std::span<const Tensor> images);

}  // namespace tta
