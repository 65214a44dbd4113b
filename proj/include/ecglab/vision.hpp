// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "ecglab/nn.hpp"
#include "ecglab/raster.hpp"

namespace ecglab {

struct VisionConfig {
  int image_size = 448;
  int patch_size = 14;
  int channels = 1;
  int embed_dim = 1280;
  int local_layers = 32;
  int global_layers = 8;
  std::vector<int> tap_layers = {3, 7, 15, 23, 30};
  int heads = 16;
  int ffn_mult = 4;
  double gate_init = 0.0;

  void validate() const;
  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size * channels; }
  // d' = d * (1 + |tap_layers|)
  int out_dim() const { return embed_dim * (1 + static_cast<int>(tap_layers.size())); }
};

struct VisionOutput {
  Tensor z_v;                // [N x d']
  std::vector<Tensor> taps;  // per-tap residual-stream copies, [N x d] each
  Tensor z_g;                // [N x d]
};

// Row i of the result holds patch (i div grid, i mod grid) flattened
// row-major, channel-minor, with pixel bytes scaled to [0,1].
Tensor patchify(const Raster& image, const VisionConfig& cfg);

// Two-stage encoder: a deep ungated local stage with tapped intermediate
// layers feeding a shallow gated global stage; the taps bypass the global
// stage and join at the final concatenation.
struct VisionEncoder {
  VisionConfig cfg;
  Linear patch_embed;  // [patch_dim x d], with bias
  Tensor pos_embed;    // [N x d], learned, added once after patch projection
  std::vector<EncoderBlock> local;
  std::vector<EncoderBlock> global_blocks;

  static VisionEncoder build(const VisionConfig& cfg, Rng& rng);

  // Returns the final local state z_l and the post-block tap copies in tap
  // order.
  std::pair<Tensor, std::vector<Tensor>> local_encode(const Tensor& patches,
                                                      const ForwardCtx& ctx) const;
  Tensor global_encode(const Tensor& z_l, const ForwardCtx& ctx) const;
  VisionOutput encode(const Raster& image, const ForwardCtx& ctx) const;
  VisionOutput encode_patches(const Tensor& patches, const ForwardCtx& ctx) const;

  void collect(std::vector<NamedParam>& out);
  void collect_hosts(std::vector<LoraHost>& out);
};

}  // namespace ecglab
