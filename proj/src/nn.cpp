// SPDX-License-Identifier: Apache-2.0
#include "ecglab/nn.hpp"

#include <cmath>

namespace ecglab {

Linear Linear::build(int d_in, int d_out, Rng& rng, bool with_bias) {
  Linear l;
  l.weight = Tensor::randn({d_in, d_out}, rng, 1.0 / std::sqrt(static_cast<double>(d_in)));
  if (with_bias) l.bias = Tensor::zeros({d_out});
  return l;
}

Tensor Linear::forward(const Tensor& x, const ForwardCtx& ctx) const {
  Tensor y = matmul(x, weight);
  if (bias.defined()) y = broadcast_add_row(y, bias);
  if (adapter && !adapter->merged) {
    y = add(y, adapter->forward_delta(x, ctx.training, ctx.rng));
  }
  return y;
}

void Linear::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
  if (adapter) {
    out.push_back({prefix + ".weight.lora_a", adapter->a});
    out.push_back({prefix + ".weight.lora_b", adapter->b});
  }
}

void Linear::collect_hosts(const std::string& prefix, std::vector<LoraHost>& out) {
  out.push_back({prefix + ".weight", weight, false, &adapter});
}

RmsNorm RmsNorm::build(int dim) {
  RmsNorm n;
  n.gain = Tensor::full({dim}, 1.0);
  return n;
}

void RmsNorm::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  out.push_back({prefix + ".gain", gain});
}

MultiHeadAttention MultiHeadAttention::build(int dim, int heads, Rng& rng) {
  MultiHeadAttention a;
  a.heads = heads;
  a.wq = Linear::build(dim, dim, rng);
  a.wk = Linear::build(dim, dim, rng);
  a.wv = Linear::build(dim, dim, rng);
  a.wo = Linear::build(dim, dim, rng);
  return a;
}

Tensor MultiHeadAttention::forward(const Tensor& q_src, const Tensor& kv_src, bool causal,
                                   const ForwardCtx& ctx) const {
  const int dim = wq.d_out();
  const int head_dim = dim / heads;
  Tensor q = wq.forward(q_src, ctx);
  Tensor k = wk.forward(kv_src, ctx);
  Tensor v = wv.forward(kv_src, ctx);

  const std::vector<int> widths(static_cast<std::size_t>(heads), head_dim);
  std::vector<Tensor> qs = split_cols(q, widths);
  std::vector<Tensor> ks = split_cols(k, widths);
  std::vector<Tensor> vs = split_cols(v, widths);

  Tensor mask;
  if (causal) mask = causal_mask(q_src.dim(0));

  std::vector<Tensor> contexts;
  contexts.reserve(static_cast<std::size_t>(heads));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  for (int h = 0; h < heads; ++h) {
    const auto hi = static_cast<std::size_t>(h);
    Tensor scores = scale(matmul(qs[hi], transpose(ks[hi])), inv_sqrt);
    if (causal) scores = add(scores, mask);
    Tensor weights = softmax_rows(scores);
    contexts.push_back(matmul(weights, vs[hi]));
  }
  return wo.forward(concat_cols(contexts), ctx);
}

void MultiHeadAttention::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  wq.collect(prefix + ".wq", out);
  wk.collect(prefix + ".wk", out);
  wv.collect(prefix + ".wv", out);
  wo.collect(prefix + ".wo", out);
}

void MultiHeadAttention::collect_hosts(const std::string& prefix, std::vector<LoraHost>& out) {
  wq.collect_hosts(prefix + ".wq", out);
  wk.collect_hosts(prefix + ".wk", out);
  wv.collect_hosts(prefix + ".wv", out);
  wo.collect_hosts(prefix + ".wo", out);
}

FeedForward FeedForward::build(int dim, int hidden, Rng& rng) {
  FeedForward f;
  f.w1 = Linear::build(dim, hidden, rng);
  f.w2 = Linear::build(hidden, dim, rng);
  return f;
}

void FeedForward::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  w1.collect(prefix + ".w1", out);
  w2.collect(prefix + ".w2", out);
}

void FeedForward::collect_hosts(const std::string& prefix, std::vector<LoraHost>& out) {
  w1.collect_hosts(prefix + ".w1", out);
  w2.collect_hosts(prefix + ".w2", out);
}

EncoderBlock EncoderBlock::build(int dim, int heads, int ffn_hidden, Rng& rng, bool gated,
                                 double gate_init) {
  EncoderBlock b;
  b.attn_norm = RmsNorm::build(dim);
  b.attn = MultiHeadAttention::build(dim, heads, rng);
  b.ffn_norm = RmsNorm::build(dim);
  b.ffn = FeedForward::build(dim, ffn_hidden, rng);
  b.gated = gated;
  if (gated) {
    b.attn_gate = Tensor::full({1}, gate_init);
    b.ffn_gate = Tensor::full({1}, gate_init);
  }
  return b;
}

Tensor EncoderBlock::forward(const Tensor& x, bool causal, const ForwardCtx& ctx) const {
  Tensor normed = attn_norm.forward(x);
  Tensor attn_out = attn.forward(normed, normed, causal, ctx);
  Tensor h = gated ? add(x, scale_by(attn_out, tanh_act(attn_gate))) : add(x, attn_out);
  Tensor ffn_out = ffn.forward(ffn_norm.forward(h), ctx);
  return gated ? add(h, scale_by(ffn_out, tanh_act(ffn_gate))) : add(h, ffn_out);
}

void EncoderBlock::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  attn_norm.collect(prefix + ".attn.norm", out);
  attn.collect(prefix + ".attn", out);
  if (gated) out.push_back({prefix + ".attn_gate", attn_gate});
  ffn_norm.collect(prefix + ".ffn.norm", out);
  ffn.collect(prefix + ".ffn", out);
  if (gated) out.push_back({prefix + ".ffn_gate", ffn_gate});
}

void EncoderBlock::collect_hosts(const std::string& prefix, std::vector<LoraHost>& out) {
  attn.collect_hosts(prefix + ".attn", out);
  ffn.collect_hosts(prefix + ".ffn", out);
}

}  // namespace ecglab
