// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ecglab/lora.hpp"
#include "ecglab/tensor.hpp"

namespace ecglab {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct ForwardCtx {
  bool training = false;
  Rng* rng = nullptr;  // dropout source while training
};

// Dense layer, weight stored [d_in x d_out]; y = x W (+ bias). When an
// adapter is attached and not merged its scaled low-rank delta is added.
struct Linear {
  Tensor weight;
  Tensor bias;  // undefined when the layer has none
  std::shared_ptr<LoraAdapter> adapter;

  static Linear build(int d_in, int d_out, Rng& rng, bool with_bias = false);

  Tensor forward(const Tensor& x, const ForwardCtx& ctx) const;
  int d_in() const { return weight.dim(0); }
  int d_out() const { return weight.dim(1); }

  void collect(const std::string& prefix, std::vector<NamedParam>& out);
  void collect_hosts(const std::string& prefix, std::vector<LoraHost>& out);
};

struct RmsNorm {
  Tensor gain;
  static RmsNorm build(int dim);
  Tensor forward(const Tensor& x) const { return rms_norm(x, gain); }
  void collect(const std::string& prefix, std::vector<NamedParam>& out);
};

struct MultiHeadAttention {
  int heads = 1;
  Linear wq, wk, wv, wo;

  static MultiHeadAttention build(int dim, int heads, Rng& rng);

  // Queries from q_src, keys/values from kv_src. causal restricts each query
  // row to positions at or before it (q_src == kv_src in that case).
  Tensor forward(const Tensor& q_src, const Tensor& kv_src, bool causal,
                 const ForwardCtx& ctx) const;

  void collect(const std::string& prefix, std::vector<NamedParam>& out);
  void collect_hosts(const std::string& prefix, std::vector<LoraHost>& out);
};

struct FeedForward {
  Linear w1, w2;
  static FeedForward build(int dim, int hidden, Rng& rng);
  Tensor forward(const Tensor& x, const ForwardCtx& ctx) const {
    return w2.forward(silu(w1.forward(x, ctx)), ctx);
  }
  void collect(const std::string& prefix, std::vector<NamedParam>& out);
  void collect_hosts(const std::string& prefix, std::vector<LoraHost>& out);
};

// Pre-norm transformer block: x += Attn(norm(x)); x += FFN(norm(x)).
// When gated, each sub-block update is scaled by tanh of a learned scalar.
struct EncoderBlock {
  RmsNorm attn_norm;
  MultiHeadAttention attn;
  RmsNorm ffn_norm;
  FeedForward ffn;
  bool gated = false;
  Tensor attn_gate;  // [1], present when gated
  Tensor ffn_gate;

  static EncoderBlock build(int dim, int heads, int ffn_hidden, Rng& rng, bool gated,
                            double gate_init);

  Tensor forward(const Tensor& x, bool causal, const ForwardCtx& ctx) const;

  void collect(const std::string& prefix, std::vector<NamedParam>& out);
  void collect_hosts(const std::string& prefix, std::vector<LoraHost>& out);
};

}  // namespace ecglab
