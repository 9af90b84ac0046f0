#include "tta/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace tta {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->data.assign(shape_numel(shape), 0.0);
  t.impl_->shape = std::move(shape);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_numel(shape) != data.size())
    throw ShapeError("from_data: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(data);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("shape() on undefined tensor");
  return impl_->shape;
}

int Tensor::dim(int i) const { return shape().at(static_cast<std::size_t>(i)); }

std::size_t Tensor::size() const {
  if (!impl_) return 0;
  return impl_->data.size();
}

std::span<double> Tensor::values() {
  if (!impl_) throw ContractError("values() on undefined tensor");
  return impl_->data;
}

std::span<const double> Tensor::values() const {
  if (!impl_) throw ContractError("values() on undefined tensor");
  return impl_->data;
}

double Tensor::operator[](std::size_t flat_index) const {
  return values()[flat_index];
}

double Tensor::item() const {
  if (size() != 1)
    throw ContractError("item() requires a scalar tensor, shape is " +
                        shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
  if (!impl_) throw ContractError("set_requires_grad on undefined tensor");
  impl_->requires_grad = rg;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<double> Tensor::grad() {
  if (!impl_) throw ContractError("grad() on undefined tensor");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("grad() absent; run backward first");
  return impl_->grad;
}

std::span<double> Tensor::grad_buf() const {
  if (!impl_) throw ContractError("grad_buf() on undefined tensor");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty())
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::reset_grad() {
  if (!impl_) throw ContractError("reset_grad on undefined tensor");
  impl_->grad.assign(impl_->data.size(), 0.0);
}

bool Tensor::tracked_on(const Tape* tape) const {
  if (!impl_) return false;
  if (impl_->requires_grad && impl_->tape == nullptr) return true;
  return tape != nullptr && impl_->tape == tape &&
         impl_->tape_epoch == tape->epoch();
}

bool Tensor::is_leaf() const {
  return impl_ && impl_->requires_grad && impl_->tape == nullptr;
}

// ---------------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

void Tape::record(const char* op, Tensor& output,
                  std::function<void()> backward) {
  output.impl_->tape = this;
  output.impl_->tape_epoch = epoch_;
  records_.push_back(Record{op, output, std::move(backward)});
}

void Tape::clear() {
  records_.clear();
  ++epoch_;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward: loss must be a scalar tensor");
  if (!loss.tracked_on(this) || loss.is_leaf())
    throw ContractError("backward: loss is not recorded on this tape");
  // Intermediate gradients are per-call scratch; leaves keep accumulating.
  for (auto& r : records_) r.output.reset_grad();
  loss.impl_->grad[0] = 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
}

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) {
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = prev_; }

}  // namespace tta
