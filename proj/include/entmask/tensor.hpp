#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "entmask/errors.hpp"

namespace entmask {

inline int64_t numel_of(const std::vector<int>& dims) {
  int64_t n = 1;
  for (int d : dims) {
    if (d < 0) throw ShapeError("negative dimension in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const std::vector<int>& dims) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ", ";
    os << dims[i];
  }
  os << "]";
  return os.str();
}

struct TensorImpl {
  std::vector<int> dims;
  std::vector<float> value;
  std::vector<float> grad;  // empty until touched by backward
  bool requires_grad = false;
};

// Value handle over shared storage. Copies alias the same buffer, which is
// what lets backward closures write gradients the caller can see.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> dims, bool requires_grad = false) {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->dims = std::move(dims);
    t.impl_->value.assign(static_cast<size_t>(numel_of(t.impl_->dims)), 0.0f);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from_values(std::vector<int> dims, std::vector<float> v,
                            bool requires_grad = false) {
    if (static_cast<int64_t>(v.size()) != numel_of(dims)) {
      throw ShapeError("from_values: " + std::to_string(v.size()) +
                       " values for shape " + shape_str(dims));
    }
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->dims = std::move(dims);
    t.impl_->value = std::move(v);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_values({1}, {static_cast<float>(v)}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }

  const std::vector<int>& dims() const { return impl_->dims; }
  int rank() const { return static_cast<int>(impl_->dims.size()); }
  int dim(int i) const { return impl_->dims[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->value.size()); }

  int rows() const {
    require_rank2("rows");
    return impl_->dims[0];
  }
  int cols() const {
    require_rank2("cols");
    return impl_->dims[1];
  }

  // Handles are shallow-const: a const Tensor still aliases mutable shared
  // storage, mirroring how copies of the handle behave.
  float* data() const { return impl_->value.data(); }
  std::vector<float>& values() const { return impl_->value; }

  float& at(int i, int j) const {
    require_rank2("at");
    return impl_->value[static_cast<size_t>(i) * impl_->dims[1] + j];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool b) const { impl_->requires_grad = b; }

  bool has_grad() const { return !impl_->grad.empty(); }

  std::vector<float>& grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), 0.0f);
    return impl_->grad;
  }

  void zero_grad() const {
    if (!impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), 0.0f);
  }

  void drop_grad() const { impl_->grad.clear(); }

  bool same_impl(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  void require_rank2(const char* what) const {
    if (impl_->dims.size() != 2) {
      throw ShapeError(std::string(what) + ": tensor is not rank 2, shape " +
                       shape_str(impl_->dims));
    }
  }

  std::shared_ptr<TensorImpl> impl_;
};

inline void check_finite(const Tensor& t, const std::string& what) {
  for (float v : t.values()) {
    if (!std::isfinite(v)) {
      throw NumericError(what + " contains a non-finite value");
    }
  }
}

// Reverse-mode tape: ops push a closure at forward time, backward replays
// them last to first. Gradients accumulate additively, so a tensor used in
// several places collects every contribution.
class Tape {
 public:
  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

  void backward(Tensor loss) {
    if (loss.numel() != 1) {
      throw ShapeError("backward: loss must be a scalar, shape " +
                       shape_str(loss.dims()));
    }
    loss.grad()[0] += 1.0f;
    for (size_t i = ops_.size(); i > 0; --i) ops_[i - 1]();
  }

  size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

 private:
  std::vector<std::function<void()>> ops_;
};

}  // namespace entmask
