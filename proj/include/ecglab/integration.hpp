// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "ecglab/nn.hpp"

namespace ecglab {

// Linear bridge from the concatenated vision features into the language
// model's hidden space: F = z_v w_p^T + b_p per row.
struct Projection {
  Tensor w_p;  // [hidden_dim x d']
  Tensor b_p;  // [hidden_dim]
  std::shared_ptr<LoraAdapter> adapter;

  static Projection build(int vision_out_dim, int hidden_dim, Rng& rng);

  Tensor forward(const Tensor& z_v, const ForwardCtx& ctx) const;

  int in_dim() const { return w_p.dim(1); }
  int out_dim() const { return w_p.dim(0); }

  void collect(std::vector<NamedParam>& out);
  void collect_hosts(std::vector<LoraHost>& out);
};

}  // namespace ecglab
