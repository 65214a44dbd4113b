// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "ecglab/nn.hpp"

namespace ecglab {

// Byte-level vocabulary: 4 specials followed by the 256 byte values.
inline constexpr int kPadToken = 0;
inline constexpr int kBosToken = 1;
inline constexpr int kEosToken = 2;
inline constexpr int kImgToken = 3;
inline constexpr int kByteOffset = 4;
inline constexpr int kByteVocab = 260;

struct LmConfig {
  int vocab_size = kByteVocab;
  int layers = 40;
  int hidden_dim = 4096;
  int heads = 32;
  int cross_start = 3;     // 1-based layer index of the first cross block
  int cross_interval = 5;  // spacing between cross blocks
  int max_seq = 512;
  int ffn_mult = 4;
  double gate_init = 0.0;  // cross-attention gates

  void validate() const;
};

enum class Role : std::uint8_t { question, answer, pad };

struct TokenSequence {
  std::vector<int> ids;
  std::vector<Role> roles;
  std::size_t size() const { return ids.size(); }
  void push(int id, Role role) {
    ids.push_back(id);
    roles.push_back(role);
  }
};

// Raw byte ids offset by the special count; no specials are inserted.
TokenSequence tokenize(const std::string& text);
// Strips specials; ids outside the vocabulary raise ContractError.
std::string detokenize(const std::vector<int>& ids);

// {cross_start + i * cross_interval} intersected with [1, layers].
std::vector<int> cross_attn_layer_indices(const LmConfig& cfg);

struct DecoderBlock {
  RmsNorm self_norm;
  MultiHeadAttention self_attn;
  bool has_cross = false;
  RmsNorm cross_norm;
  MultiHeadAttention cross_attn;
  Tensor cross_gate;  // [1]
  RmsNorm ffn_norm;
  FeedForward ffn;

  void collect(const std::string& prefix, std::vector<NamedParam>& out);
  void collect_hosts(const std::string& prefix, std::vector<LoraHost>& out);
};

// Causal decoder over byte tokens with gated cross-attention sub-blocks at
// the configured layer schedule. Visual context, when given, must already be
// projected to hidden_dim.
struct LanguageModel {
  LmConfig cfg;
  Tensor embed_tokens;  // [vocab x hidden]
  Tensor pos_embed;     // [max_seq x hidden]
  std::vector<DecoderBlock> blocks;
  RmsNorm final_norm;
  Linear lm_head;  // [hidden x vocab]

  static LanguageModel build(const LmConfig& cfg, Rng& rng);

  // Logits [L x vocab]. visual may be undefined; cross sub-blocks are then
  // skipped entirely.
  Tensor forward(const TokenSequence& tokens, const Tensor& visual,
                 const ForwardCtx& ctx) const;

  // Greedy decoding, ties broken by lowest token id; stops at EOS or after
  // max_new tokens. Returns the detokenized completion.
  std::string generate(const TokenSequence& prompt, const Tensor& visual, int max_new) const;

  void collect(std::vector<NamedParam>& out);
  void collect_hosts(std::vector<LoraHost>& out);
};

}  // namespace ecglab
