// SPDX-License-Identifier: Apache-2.0
#include "ecglab/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>

namespace ecglab {

namespace {

thread_local Tape* g_active_tape = nullptr;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

bool tracing(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Marks the output as a graph node: it requires grad and owns a zeroed
// gradient buffer that the consumers' backward rules accumulate into.
void mark_output(Tensor& out) {
  out.impl()->requires_grad = true;
  out.impl()->grad.assign(out.numel(), 0.0);
}

void record(std::vector<std::shared_ptr<TensorImpl>> inputs, Tensor& out,
            std::function<void()> fn) {
  mark_output(out);
  Tape::active()->record(std::move(inputs), out.impl(), std::move(fn));
}

void check_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
  }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("extent must be positive, got " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(numel_of(shape), 0.0);
  impl->shape = std::move(shape);
  Tensor t(std::move(impl));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel_of(shape) != data.size()) {
    throw ShapeError("from: " + shape_str(shape) + " does not hold " +
                     std::to_string(data.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  Tensor t(std::move(impl));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double sd, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.data()) v = rng.normal(0.0, sd);
  return t;
}

void Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  if (flag) {
    if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0);
  } else {
    impl_->grad.clear();
  }
}

void Tensor::zero_grad() {
  if (impl_->requires_grad) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item: tensor is not scalar, shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(int i, int j) const {
  check_rank2(*this, "at");
  return impl_->data[static_cast<std::size_t>(i) * dim(1) + j];
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tape* Tape::active() { return g_active_tape; }

int Tape::record(std::vector<std::shared_ptr<TensorImpl>> inputs,
                 std::shared_ptr<TensorImpl> output, std::function<void()> fn) {
  const int id = static_cast<int>(nodes_.size());
  output->node = id;
  nodes_.push_back(TapeNode{std::move(inputs), std::move(output), std::move(fn)});
  return id;
}

void Tape::clear() {
  for (TapeNode& n : nodes_) n.output->node = -1;
  nodes_.clear();
}

GradTape::GradTape() : previous_(g_active_tape) { g_active_tape = &tape_; }

GradTape::~GradTape() {
  tape_.clear();
  g_active_tape = previous_;
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, shape " + shape_str(loss.shape()));
  }
  Tape* tape = Tape::active();
  if (tape == nullptr || loss.impl()->node < 0) {
    throw ContractError("backward: loss is not on the active tape");
  }
  loss.impl()->grad.assign(1, 1.0);

  std::vector<char> reachable(tape->nodes_.size(), 0);
  reachable[static_cast<std::size_t>(loss.impl()->node)] = 1;
  for (int i = loss.impl()->node; i >= 0; --i) {
    if (!reachable[static_cast<std::size_t>(i)]) continue;
    TapeNode& node = tape->nodes_[static_cast<std::size_t>(i)];
    node.backward();
    for (const auto& in : node.inputs) {
      if (in->node >= 0) reachable[static_cast<std::size_t>(in->node)] = 1;
    }
  }
}

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (tracing({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record({ai, bi}, out, [ai, bi, oi]() {
      const std::size_t m = oi->data.size();
      if (ai->requires_grad)
        for (std::size_t i = 0; i < m; ++i) ai->grad[i] += oi->grad[i];
      if (bi->requires_grad)
        for (std::size_t i = 0; i < m; ++i) bi->grad[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (tracing({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record({ai, bi}, out, [ai, bi, oi]() {
      const std::size_t m = oi->data.size();
      if (ai->requires_grad)
        for (std::size_t i = 0; i < m; ++i) ai->grad[i] += oi->grad[i];
      if (bi->requires_grad)
        for (std::size_t i = 0; i < m; ++i) bi->grad[i] -= oi->grad[i];
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (tracing({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record({ai, bi}, out, [ai, bi, oi]() {
      const std::size_t m = oi->data.size();
      if (ai->requires_grad)
        for (std::size_t i = 0; i < m; ++i) ai->grad[i] += oi->grad[i] * bi->data[i];
      if (bi->requires_grad)
        for (std::size_t i = 0; i < m; ++i) bi->grad[i] += oi->grad[i] * ai->data[i];
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
  if (tracing({&a})) {
    auto ai = a.impl(), oi = out.impl();
    record({ai}, out, [ai, oi, s]() {
      if (!ai->requires_grad) return;
      const std::size_t m = oi->data.size();
      for (std::size_t i = 0; i < m; ++i) ai->grad[i] += oi->grad[i] * s;
    });
  }
  return out;
}

// ---- matmul / transpose -----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank2(a, "matmul");
  check_rank2(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  {
    ConstMap am(a.data().data(), m, k);
    ConstMap bm(b.data().data(), k, n);
    MutMap om(out.data().data(), m, n);
    om.noalias() = am * bm;
  }
  if (tracing({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record({ai, bi}, out, [ai, bi, oi, m, k, n]() {
      ConstMap go(oi->grad.data(), m, n);
      if (ai->requires_grad) {
        ConstMap bm(bi->data.data(), k, n);
        MutMap ga(ai->grad.data(), m, k);
        ga.noalias() += go * bm.transpose();
      }
      if (bi->requires_grad) {
        ConstMap am(ai->data.data(), m, k);
        MutMap gb(bi->grad.data(), k, n);
        gb.noalias() += am.transpose() * go;
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  check_rank2(a, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.data()[static_cast<std::size_t>(j) * m + i] = a.data()[static_cast<std::size_t>(i) * n + j];
  if (tracing({&a})) {
    auto ai = a.impl(), oi = out.impl();
    record({ai}, out, [ai, oi, m, n]() {
      if (!ai->requires_grad) return;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ai->grad[static_cast<std::size_t>(i) * n + j] +=
              oi->grad[static_cast<std::size_t>(j) * m + i];
    });
  }
  return out;
}

// ---- softmax / norms / activations -------------------------------------------

Tensor softmax_rows(const Tensor& x) {
  check_rank2(x, "softmax_rows");
  for (double v : x.data()) {
    if (std::isnan(v)) throw NumericError("softmax_rows: NaN input");
  }
  const int rows = x.dim(0), cols = x.dim(1);
  Tensor out = Tensor::zeros(x.shape());
  for (int i = 0; i < rows; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * cols;
    double mx = x.data()[base];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x.data()[base + j]);
    double denom = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double e = std::exp(x.data()[base + j] - mx);
      out.data()[base + j] = e;
      denom += e;
    }
    for (int j = 0; j < cols; ++j) out.data()[base + j] /= denom;
  }
  if (tracing({&x})) {
    auto xi = x.impl(), oi = out.impl();
    record({xi}, out, [xi, oi, rows, cols]() {
      if (!xi->requires_grad) return;
      for (int i = 0; i < rows; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * cols;
        double dot = 0.0;
        for (int j = 0; j < cols; ++j) dot += oi->grad[base + j] * oi->data[base + j];
        for (int j = 0; j < cols; ++j)
          xi->grad[base + j] += oi->data[base + j] * (oi->grad[base + j] - dot);
      }
    });
  }
  return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain) {
  if (x.rank() < 1 || gain.rank() != 1 || x.dim(x.rank() - 1) != gain.dim(0)) {
    throw ShapeError("rms_norm: gain " + shape_str(gain.shape()) + " does not match " +
                     shape_str(x.shape()));
  }
  constexpr double kEps = 1e-6;
  const int d = gain.dim(0);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> inv_rms(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * static_cast<std::size_t>(d);
    double sq = 0.0;
    for (int j = 0; j < d; ++j) sq += x.data()[base + j] * x.data()[base + j];
    inv_rms[r] = 1.0 / std::sqrt(sq / d + kEps);
    for (int j = 0; j < d; ++j)
      out.data()[base + j] = x.data()[base + j] * inv_rms[r] * gain.data()[j];
  }
  if (tracing({&x, &gain})) {
    auto xi = x.impl(), gi = gain.impl(), oi = out.impl();
    record({xi, gi}, out, [xi, gi, oi, d, rows, inv_rms = std::move(inv_rms)]() {
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * static_cast<std::size_t>(d);
        const double s = inv_rms[r];
        if (gi->requires_grad) {
          for (int j = 0; j < d; ++j) gi->grad[j] += oi->grad[base + j] * xi->data[base + j] * s;
        }
        if (xi->requires_grad) {
          double dot = 0.0;
          for (int j = 0; j < d; ++j)
            dot += oi->grad[base + j] * gi->data[j] * xi->data[base + j];
          const double c = dot * s * s * s / d;
          for (int j = 0; j < d; ++j)
            xi->grad[base + j] += oi->grad[base + j] * gi->data[j] * s - xi->data[base + j] * c;
        }
      }
    });
  }
  return out;
}

Tensor silu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x.data()[i];
    out.data()[i] = v * sigmoid(v);
  }
  if (tracing({&x})) {
    auto xi = x.impl(), oi = out.impl();
    record({xi}, out, [xi, oi]() {
      if (!xi->requires_grad) return;
      const std::size_t m = oi->data.size();
      for (std::size_t i = 0; i < m; ++i) {
        const double v = xi->data[i];
        const double s = sigmoid(v);
        xi->grad[i] += oi->grad[i] * s * (1.0 + v * (1.0 - s));
      }
    });
  }
  return out;
}

Tensor tanh_act(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::tanh(x.data()[i]);
  if (tracing({&x})) {
    auto xi = x.impl(), oi = out.impl();
    record({xi}, out, [xi, oi]() {
      if (!xi->requires_grad) return;
      const std::size_t m = oi->data.size();
      for (std::size_t i = 0; i < m; ++i)
        xi->grad[i] += oi->grad[i] * (1.0 - oi->data[i] * oi->data[i]);
    });
  }
  return out;
}

// ---- concat / split ----------------------------------------------------------

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int rows = parts[0].dim(0);
  int total = 0;
  for (const Tensor& p : parts) {
    check_rank2(p, "concat_cols");
    if (p.dim(0) != rows) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    total += p.dim(1);
  }
  Tensor out = Tensor::zeros({rows, total});
  int off = 0;
  for (const Tensor& p : parts) {
    const int w = p.dim(1);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < w; ++j)
        out.data()[static_cast<std::size_t>(i) * total + off + j] =
            p.data()[static_cast<std::size_t>(i) * w + j];
    off += w;
  }
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  if (Tape::active() != nullptr && any) {
    std::vector<std::shared_ptr<TensorImpl>> impls;
    impls.reserve(parts.size());
    for (const Tensor& p : parts) impls.push_back(p.impl());
    auto oi = out.impl();
    record(impls, out, [impls, oi, rows, total]() {
      int o = 0;
      for (const auto& pi : impls) {
        const int w = pi->shape[1];
        if (pi->requires_grad) {
          for (int i = 0; i < rows; ++i)
            for (int j = 0; j < w; ++j)
              pi->grad[static_cast<std::size_t>(i) * w + j] +=
                  oi->grad[static_cast<std::size_t>(i) * total + o + j];
        }
        o += w;
      }
    });
  }
  return out;
}

std::vector<Tensor> split_cols(const Tensor& x, const std::vector<int>& widths) {
  check_rank2(x, "split_cols");
  int total = 0;
  for (int w : widths) {
    if (w <= 0) throw ShapeError("split_cols: widths must be positive");
    total += w;
  }
  if (total != x.dim(1)) {
    throw ShapeError("split_cols: widths sum to " + std::to_string(total) + " but x is " +
                     shape_str(x.shape()));
  }
  const int rows = x.dim(0), cols = x.dim(1);
  std::vector<Tensor> outs;
  int off = 0;
  for (int w : widths) {
    Tensor part = Tensor::zeros({rows, w});
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < w; ++j)
        part.data()[static_cast<std::size_t>(i) * w + j] =
            x.data()[static_cast<std::size_t>(i) * cols + off + j];
    if (tracing({&x})) {
      auto xi = x.impl(), pi = part.impl();
      const int o = off;
      record({xi}, part, [xi, pi, rows, cols, w, o]() {
        if (!xi->requires_grad) return;
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < w; ++j)
            xi->grad[static_cast<std::size_t>(i) * cols + o + j] +=
                pi->grad[static_cast<std::size_t>(i) * w + j];
      });
    }
    outs.push_back(part);
    off += w;
  }
  return outs;
}

Tensor broadcast_add_row(const Tensor& x, const Tensor& v) {
  check_rank2(x, "broadcast_add_row");
  if (v.rank() != 1 || v.dim(0) != x.dim(1)) {
    throw ShapeError("broadcast_add_row: vector " + shape_str(v.shape()) +
                     " does not match " + shape_str(x.shape()));
  }
  const int rows = x.dim(0), cols = x.dim(1);
  Tensor out = Tensor::zeros(x.shape());
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      out.data()[static_cast<std::size_t>(i) * cols + j] =
          x.data()[static_cast<std::size_t>(i) * cols + j] + v.data()[j];
  if (tracing({&x, &v})) {
    auto xi = x.impl(), vi = v.impl(), oi = out.impl();
    record({xi, vi}, out, [xi, vi, oi, rows, cols]() {
      if (xi->requires_grad) {
        const std::size_t m = oi->data.size();
        for (std::size_t i = 0; i < m; ++i) xi->grad[i] += oi->grad[i];
      }
      if (vi->requires_grad) {
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j)
            vi->grad[j] += oi->grad[static_cast<std::size_t>(i) * cols + j];
      }
    });
  }
  return out;
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) {
    throw ShapeError("scale_by: scale must be scalar, got " + shape_str(s.shape()));
  }
  const double sv = s.data()[0];
  Tensor out = Tensor::zeros(x.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * sv;
  if (tracing({&x, &s})) {
    auto xi = x.impl(), si = s.impl(), oi = out.impl();
    record({xi, si}, out, [xi, si, oi]() {
      const std::size_t m = oi->data.size();
      if (xi->requires_grad) {
        const double sv2 = si->data[0];
        for (std::size_t i = 0; i < m; ++i) xi->grad[i] += oi->grad[i] * sv2;
      }
      if (si->requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < m; ++i) acc += oi->grad[i] * xi->data[i];
        si->grad[0] += acc;
      }
    });
  }
  return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  check_rank2(table, "embedding_lookup");
  const int vocab = table.dim(0), width = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw ContractError("embedding_lookup: id " + std::to_string(id) + " outside [0," +
                          std::to_string(vocab) + ")");
    }
  }
  const int rows = static_cast<int>(ids.size());
  Tensor out = Tensor::zeros({rows, width});
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < width; ++j)
      out.data()[static_cast<std::size_t>(i) * width + j] =
          table.data()[static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * width + j];
  if (tracing({&table})) {
    auto ti = table.impl(), oi = out.impl();
    record({ti}, out, [ti, oi, ids, rows, width]() {
      if (!ti->requires_grad) return;
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < width; ++j)
          ti->grad[static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * width + j] +=
              oi->grad[static_cast<std::size_t>(i) * width + j];
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double keep_prob, Rng& rng) {
  if (keep_prob < 0.0 || keep_prob > 1.0) {
    throw ValidationError("dropout: keep probability " + std::to_string(keep_prob) +
                          " outside [0,1]");
  }
  const std::size_t n = x.numel();
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> mask(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    mask[i] = rng.uniform() < keep_prob ? 1.0 : 0.0;
    out.data()[i] = x.data()[i] * mask[i];
  }
  if (tracing({&x})) {
    auto xi = x.impl(), oi = out.impl();
    record({xi}, out, [xi, oi, mask = std::move(mask)]() {
      if (!xi->requires_grad) return;
      const std::size_t m = oi->data.size();
      for (std::size_t i = 0; i < m; ++i) xi->grad[i] += oi->grad[i] * mask[i];
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (tracing({&x})) {
    auto xi = x.impl(), oi = out.impl();
    record({xi}, out, [xi, oi]() {
      if (!xi->requires_grad) return;
      const double g = oi->grad[0];
      const std::size_t m = xi->data.size();
      for (std::size_t i = 0; i < m; ++i) xi->grad[i] += g;
    });
  }
  return out;
}

int count_non_ignored(const std::vector<int>& targets, int ignore_index) {
  int c = 0;
  for (int t : targets) {
    if (t != ignore_index) ++c;
  }
  return c;
}

Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int>& targets,
                         int ignore_index) {
  check_rank2(logits, "cross_entropy_sum");
  const int rows = logits.dim(0), vocab = logits.dim(1);
  if (static_cast<int>(targets.size()) != rows) {
    throw ShapeError("cross_entropy_sum: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(rows) + " rows");
  }
  for (int t : targets) {
    if (t != ignore_index && (t < 0 || t >= vocab)) {
      throw ContractError("cross_entropy_sum: target " + std::to_string(t) + " outside [0," +
                          std::to_string(vocab) + ")");
    }
  }
  double total = 0.0;
  for (int i = 0; i < rows; ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t == ignore_index) continue;
    const std::size_t base = static_cast<std::size_t>(i) * vocab;
    double mx = logits.data()[base];
    for (int j = 1; j < vocab; ++j) mx = std::max(mx, logits.data()[base + j]);
    double denom = 0.0;
    for (int j = 0; j < vocab; ++j) denom += std::exp(logits.data()[base + j] - mx);
    total += std::log(denom) + mx - logits.data()[base + t];
  }
  Tensor out = Tensor::scalar(total);
  if (tracing({&logits})) {
    auto li = logits.impl(), oi = out.impl();
    record({li}, out, [li, oi, targets, ignore_index, rows, vocab]() {
      if (!li->requires_grad) return;
      const double g = oi->grad[0];
      for (int i = 0; i < rows; ++i) {
        const int t = targets[static_cast<std::size_t>(i)];
        if (t == ignore_index) continue;
        const std::size_t base = static_cast<std::size_t>(i) * vocab;
        double mx = li->data[base];
        for (int j = 1; j < vocab; ++j) mx = std::max(mx, li->data[base + j]);
        double denom = 0.0;
        for (int j = 0; j < vocab; ++j) denom += std::exp(li->data[base + j] - mx);
        for (int j = 0; j < vocab; ++j) {
          const double p = std::exp(li->data[base + j] - mx) / denom;
          li->grad[base + j] += g * (p - (j == t ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

Tensor causal_mask(int len) {
  Tensor m = Tensor::zeros({len, len});
  for (int i = 0; i < len; ++i)
    for (int j = i + 1; j < len; ++j)
      m.data()[static_cast<std::size_t>(i) * len + j] = -1e30;
  return m;
}

double grad_check(const std::function<Tensor(Tensor&)>& f, Tensor& x, double h) {
  if (h <= 0.0) throw ContractError("grad_check: h must be positive");

  // Determinism probe: stochastic operations (e.g. dropout) must be disabled.
  const double probe1 = f(x).item();
  const double probe2 = f(x).item();
  if (!(probe1 == probe2)) {
    throw ContractError("grad_check: f is not deterministic; disable stochastic ops");
  }

  const bool prior_flag = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  {
    GradTape tape;
    Tensor loss = f(x);
    if (loss.numel() != 1) throw ContractError("grad_check: f must return a scalar");
    // A loss that never touched the tape (f constant in x) has zero gradient.
    if (loss.impl()->node >= 0) backward(loss);
  }
  const std::vector<double> analytic = x.grad();
  x.set_requires_grad(prior_flag);

  double worst = 0.0;
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double orig = x.data()[i];
    x.data()[i] = orig + h;
    const double fp = f(x).item();
    x.data()[i] = orig - h;
    const double fm = f(x).item();
    x.data()[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace ecglab
