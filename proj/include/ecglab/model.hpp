// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ecglab/integration.hpp"
#include "ecglab/language.hpp"
#include "ecglab/vision.hpp"

namespace ecglab {

struct ModelConfig {
  VisionConfig vision;
  LmConfig lm;
  void validate() const {
    vision.validate();
    lm.validate();
  }
};

// Vision encoder + projection bridge + decoder, with a flat named-parameter
// view used by LoRA targeting, mode selection and checkpoints.
struct MultimodalModel {
  ModelConfig cfg;
  VisionEncoder vision;
  Projection proj;
  LanguageModel lm;
  std::vector<std::shared_ptr<LoraAdapter>> adapters;  // in host order

  static MultimodalModel build(const ModelConfig& cfg, std::uint64_t seed);

  std::vector<NamedParam> params();
  std::vector<LoraHost> lora_hosts();
  Tensor param_by_name(const std::string& name);

  // Projected visual context F [N x hidden] for one image.
  Tensor encode_image(const Raster& image, const ForwardCtx& ctx) const;
  Tensor forward_logits(const TokenSequence& tokens, const Tensor& visual,
                        const ForwardCtx& ctx) const {
    return lm.forward(tokens, visual, ctx);
  }

  void set_all_gates(double value);
  void refresh_adapters();  // re-collects adapter list from hosts
};

}  // namespace ecglab
