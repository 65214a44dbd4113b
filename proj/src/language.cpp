// SPDX-License-Identifier: Apache-2.0
#include "ecglab/language.hpp"

#include <cmath>
#include <numeric>

namespace ecglab {

void LmConfig::validate() const {
  if (vocab_size <= 0 || layers <= 0 || hidden_dim <= 0 || heads <= 0 || max_seq <= 0 ||
      ffn_mult <= 0) {
    throw ConfigError("lm: extents must be positive");
  }
  if (hidden_dim % heads != 0) throw ConfigError("lm: heads must divide hidden_dim");
  if (cross_start < 1) throw ConfigError("lm: cross_start must be >= 1");
  if (cross_interval < 1) throw ConfigError("lm: cross_interval must be >= 1");
}

TokenSequence tokenize(const std::string& text) {
  TokenSequence seq;
  seq.ids.reserve(text.size());
  for (unsigned char c : text) seq.push(static_cast<int>(c) + kByteOffset, Role::question);
  return seq;
}

std::string detokenize(const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= kByteVocab) {
      throw ContractError("detokenize: id " + std::to_string(id) + " outside [0," +
                          std::to_string(kByteVocab) + ")");
    }
    if (id >= kByteOffset) out.push_back(static_cast<char>(id - kByteOffset));
  }
  return out;
}

std::vector<int> cross_attn_layer_indices(const LmConfig& cfg) {
  std::vector<int> indices;
  for (int layer = cfg.cross_start; layer <= cfg.layers; layer += cfg.cross_interval) {
    indices.push_back(layer);
  }
  return indices;
}

void DecoderBlock::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  self_norm.collect(prefix + ".self_attn.norm", out);
  self_attn.collect(prefix + ".self_attn", out);
  if (has_cross) {
    cross_norm.collect(prefix + ".cross_attn.norm", out);
    cross_attn.collect(prefix + ".cross_attn", out);
    out.push_back({prefix + ".cross_attn.gate", cross_gate});
  }
  ffn_norm.collect(prefix + ".ffn.norm", out);
  ffn.collect(prefix + ".ffn", out);
}

void DecoderBlock::collect_hosts(const std::string& prefix, std::vector<LoraHost>& out) {
  self_attn.collect_hosts(prefix + ".self_attn", out);
  if (has_cross) cross_attn.collect_hosts(prefix + ".cross_attn", out);
  ffn.collect_hosts(prefix + ".ffn", out);
}

LanguageModel LanguageModel::build(const LmConfig& cfg, Rng& rng) {
  cfg.validate();
  LanguageModel lm;
  lm.cfg = cfg;
  const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
  lm.embed_tokens = Tensor::randn({cfg.vocab_size, cfg.hidden_dim}, rng, sd);
  lm.pos_embed = Tensor::randn({cfg.max_seq, cfg.hidden_dim}, rng, sd);

  const std::vector<int> cross_layers = cross_attn_layer_indices(cfg);
  std::size_t next_cross = 0;
  for (int layer = 1; layer <= cfg.layers; ++layer) {
    DecoderBlock block;
    block.self_norm = RmsNorm::build(cfg.hidden_dim);
    block.self_attn = MultiHeadAttention::build(cfg.hidden_dim, cfg.heads, rng);
    if (next_cross < cross_layers.size() && cross_layers[next_cross] == layer) {
      block.has_cross = true;
      block.cross_norm = RmsNorm::build(cfg.hidden_dim);
      block.cross_attn = MultiHeadAttention::build(cfg.hidden_dim, cfg.heads, rng);
      block.cross_gate = Tensor::full({1}, cfg.gate_init);
      ++next_cross;
    }
    block.ffn_norm = RmsNorm::build(cfg.hidden_dim);
    block.ffn = FeedForward::build(cfg.hidden_dim, cfg.hidden_dim * cfg.ffn_mult, rng);
    lm.blocks.push_back(std::move(block));
  }
  lm.final_norm = RmsNorm::build(cfg.hidden_dim);
  lm.lm_head = Linear::build(cfg.hidden_dim, cfg.vocab_size, rng);
  return lm;
}

Tensor LanguageModel::forward(const TokenSequence& tokens, const Tensor& visual,
                              const ForwardCtx& ctx) const {
  const int len = static_cast<int>(tokens.size());
  if (len == 0) throw ContractError("lm forward: empty sequence");
  if (len > cfg.max_seq) {
    throw ContractError("lm forward: sequence length " + std::to_string(len) +
                        " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  if (visual.defined() && (visual.rank() != 2 || visual.dim(1) != cfg.hidden_dim)) {
    throw ShapeError("lm forward: visual width " + shape_str(visual.shape()) +
                     " does not match hidden_dim " + std::to_string(cfg.hidden_dim));
  }

  Tensor x = embedding_lookup(embed_tokens, tokens.ids);
  std::vector<int> positions(static_cast<std::size_t>(len));
  std::iota(positions.begin(), positions.end(), 0);
  x = add(x, embedding_lookup(pos_embed, positions));

  for (const DecoderBlock& block : blocks) {
    Tensor normed = block.self_norm.forward(x);
    x = add(x, block.self_attn.forward(normed, normed, /*causal=*/true, ctx));
    if (block.has_cross && visual.defined()) {
      Tensor q = block.cross_norm.forward(x);
      Tensor cross = block.cross_attn.forward(q, visual, /*causal=*/false, ctx);
      x = add(x, scale_by(cross, tanh_act(block.cross_gate)));
    }
    x = add(x, block.ffn.forward(block.ffn_norm.forward(x), ctx));
  }
  return lm_head.forward(final_norm.forward(x), ctx);
}

std::string LanguageModel::generate(const TokenSequence& prompt, const Tensor& visual,
                                    int max_new) const {
  if (prompt.size() == 0) throw ContractError("generate: prompt is empty");
  if (static_cast<int>(prompt.size()) > cfg.max_seq) {
    throw ContractError("generate: prompt length " + std::to_string(prompt.size()) +
                        " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  ForwardCtx ctx;  // inference: no dropout, no tape
  TokenSequence seq = prompt;
  std::vector<int> emitted;
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(seq.size()) >= cfg.max_seq) break;
    Tensor logits = forward(seq, visual, ctx);
    const int last = static_cast<int>(seq.size()) - 1;
    const std::size_t base = static_cast<std::size_t>(last) * cfg.vocab_size;
    int best = 0;
    double best_v = logits.data()[base];
    for (int j = 1; j < cfg.vocab_size; ++j) {
      const double v = logits.data()[base + j];
      if (v > best_v) {  // strict: ties keep the lowest id
        best_v = v;
        best = j;
      }
    }
    if (best == kEosToken) break;
    seq.push(best, Role::answer);
    emitted.push_back(best);
  }
  return detokenize(emitted);
}

void LanguageModel::collect(std::vector<NamedParam>& out) {
  out.push_back({"lm.embed_tokens", embed_tokens});
  out.push_back({"lm.pos_embed", pos_embed});
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].collect("lm.layers." + std::to_string(i), out);
  }
  final_norm.collect("lm.final_norm", out);
  lm_head.collect("lm.lm_head", out);
}

void LanguageModel::collect_hosts(std::vector<LoraHost>& out) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].collect_hosts("lm.layers." + std::to_string(i), out);
  }
  lm_head.collect_hosts("lm.lm_head", out);
}

}  // namespace ecglab
