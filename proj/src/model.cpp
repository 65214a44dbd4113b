// SPDX-License-Identifier: Apache-2.0
#include "ecglab/model.hpp"

namespace ecglab {

MultimodalModel MultimodalModel::build(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  MultimodalModel m;
  m.cfg = cfg;
  Rng rng(seed);
  m.vision = VisionEncoder::build(cfg.vision, rng);
  m.proj = Projection::build(cfg.vision.out_dim(), cfg.lm.hidden_dim, rng);
  m.lm = LanguageModel::build(cfg.lm, rng);
  return m;
}

std::vector<NamedParam> MultimodalModel::params() {
  std::vector<NamedParam> out;
  vision.collect(out);
  proj.collect(out);
  lm.collect(out);
  return out;
}

std::vector<LoraHost> MultimodalModel::lora_hosts() {
  std::vector<LoraHost> out;
  vision.collect_hosts(out);
  proj.collect_hosts(out);
  lm.collect_hosts(out);
  return out;
}

Tensor MultimodalModel::param_by_name(const std::string& name) {
  for (NamedParam& p : params()) {
    if (p.name == name) return p.tensor;
  }
  throw ContractError("no parameter named " + name);
}

Tensor MultimodalModel::encode_image(const Raster& image, const ForwardCtx& ctx) const {
  return proj.forward(vision.encode(image, ctx).z_v, ctx);
}

void MultimodalModel::set_all_gates(double value) {
  for (EncoderBlock& block : vision.global_blocks) {
    std::fill(block.attn_gate.data().begin(), block.attn_gate.data().end(), value);
    std::fill(block.ffn_gate.data().begin(), block.ffn_gate.data().end(), value);
  }
  for (DecoderBlock& block : lm.blocks) {
    if (block.has_cross) {
      std::fill(block.cross_gate.data().begin(), block.cross_gate.data().end(), value);
    }
  }
}

void MultimodalModel::refresh_adapters() {
  adapters.clear();
  for (LoraHost& host : lora_hosts()) {
    if (*host.slot) adapters.push_back(*host.slot);
  }
}

}  // namespace ecglab
