// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ecglab/common.hpp"

namespace ecglab {

using Shape = std::vector<int>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // same length as data while requires_grad is set
  bool requires_grad = false;
  int node = -1;  // id of the producing operation on the active tape
};

// Dense row-major tensor of 64-bit reals. Copies are shallow (shared
// storage); clone() makes a detached deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double sd, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return impl_->data.size(); }

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& grad() { return impl_->grad; }
  const std::vector<double>& grad() const { return impl_->grad; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag);
  void zero_grad();

  double item() const;
  double at(int i, int j) const;

  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

struct TapeNode {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::shared_ptr<TensorImpl> output;
  std::function<void()> backward;
};

// Ordered record of executed operations. Operations are appended as they
// execute, so the record is topological by construction. One tape is active
// per thread at a time.
class Tape {
 public:
  static Tape* active();

  int record(std::vector<std::shared_ptr<TensorImpl>> inputs,
             std::shared_ptr<TensorImpl> output, std::function<void()> fn);
  std::size_t size() const { return nodes_.size(); }
  void clear();

 private:
  friend class GradTape;
  std::vector<TapeNode> nodes_;
  friend void backward(const Tensor&);
};

// RAII scope that activates a fresh tape (restoring the previous one on
// exit). Forward passes outside any GradTape build no graph.
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;
  std::size_t size() const { return tape_.size(); }

 private:
  Tape tape_;
  Tape* previous_;
};

// Propagates d loss / d tensor to every requires_grad tensor reachable from
// loss on the active tape. Gradients accumulate additively across fan-out
// and across repeated backward calls.
void backward(const Tensor& loss);

// ---- primitive operations -------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor softmax_rows(const Tensor& x);
Tensor rms_norm(const Tensor& x, const Tensor& gain);
Tensor silu(const Tensor& x);
Tensor tanh_act(const Tensor& x);
Tensor concat_cols(const std::vector<Tensor>& parts);
std::vector<Tensor> split_cols(const Tensor& x, const std::vector<int>& widths);
Tensor broadcast_add_row(const Tensor& x, const Tensor& v);
// x scaled by a learnable scalar tensor s (shape [1]).
Tensor scale_by(const Tensor& x, const Tensor& s);
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
Tensor dropout(const Tensor& x, double keep_prob, Rng& rng);
Tensor sum_all(const Tensor& x);

// Row-wise cross-entropy against integer targets, summed over rows whose
// target is not ignore_index.
Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int>& targets,
                         int ignore_index);
int count_non_ignored(const std::vector<int>& targets, int ignore_index);

// Additive causal mask: 0 on and below the diagonal, -1e30 above.
Tensor causal_mask(int len);

// Compares the analytic gradient of a scalar-valued f against central
// differences at every coordinate of x and returns the worst relative error
// with denominator max(|analytic|, |numeric|, 1e-8). f must be
// deterministic; a mismatch between two evaluations raises ContractError.
double grad_check(const std::function<Tensor(Tensor&)>& f, Tensor& x, double h);

}  // namespace ecglab
