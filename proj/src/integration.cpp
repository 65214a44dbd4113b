// SPDX-License-Identifier: Apache-2.0
#include "ecglab/integration.hpp"

#include <cmath>

namespace ecglab {

Projection Projection::build(int vision_out_dim, int hidden_dim, Rng& rng) {
  Projection p;
  p.w_p = Tensor::randn({hidden_dim, vision_out_dim}, rng,
                        1.0 / std::sqrt(static_cast<double>(vision_out_dim)));
  p.b_p = Tensor::zeros({hidden_dim});
  return p;
}

Tensor Projection::forward(const Tensor& z_v, const ForwardCtx& ctx) const {
  if (z_v.rank() != 2 || z_v.dim(1) != in_dim()) {
    throw ShapeError("project: input " + shape_str(z_v.shape()) + " does not match w_p " +
                     shape_str(w_p.shape()));
  }
  Tensor f = broadcast_add_row(matmul(z_v, transpose(w_p)), b_p);
  if (adapter && !adapter->merged) {
    f = add(f, adapter->forward_delta(z_v, ctx.training, ctx.rng));
  }
  return f;
}

void Projection::collect(std::vector<NamedParam>& out) {
  out.push_back({"proj.w_p", w_p});
  out.push_back({"proj.b_p", b_p});
  if (adapter) {
    out.push_back({"proj.w_p.lora_a", adapter->a});
    out.push_back({"proj.w_p.lora_b", adapter->b});
  }
}

void Projection::collect_hosts(std::vector<LoraHost>& out) {
  out.push_back({"proj.w_p", w_p, /*out_by_in=*/true, &adapter});
}

}  // namespace ecglab
