// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "ecglab/tensor.hpp"

namespace ecglab {

struct MultimodalModel;

struct LoraConfig {
  int rank = 64;
  double alpha = 128.0;
  double dropout_p = 0.05;
  // Extra exclusions may be added; under paper_mode the two below must stay.
  std::set<std::string> exclusions = {"lm_head", "embed_tokens"};
  bool paper_mode = true;
  // nullptr selects the built-in default rule: every 2-D weight in
  // attention, feed-forward and projection sub-blocks plus the output head.
  std::function<bool(const std::string&)> target_rule;

  void validate() const;
  bool targets(const std::string& name) const;
  bool excluded(const std::string& name) const;
};

// Low-rank factor pair for one host matrix. The delta applied to the host is
// scaling * B * A; b starts at zero so the attached model is initially
// identical to the base model.
struct LoraAdapter {
  std::string host_name;
  Tensor a;  // [rank x d_in]
  Tensor b;  // [d_out x rank]
  double scaling = 1.0;  // alpha / rank
  double dropout_keep = 1.0;
  bool merged = false;

  static LoraAdapter create(const std::string& host_name, int d_in, int d_out,
                            const LoraConfig& cfg, Rng& rng);

  // Adapter contribution for row-major input x [m x d_in]:
  // scaling * (x A^T) B^T, with dropout on x while training.
  Tensor forward_delta(const Tensor& x, bool training, Rng* rng) const;

  std::size_t param_count() const { return a.numel() + b.numel(); }
};

// One adaptable weight matrix in the model. out_by_in marks hosts stored
// [d_out x d_in] (the integration w_p); linear layers store [d_in x d_out].
struct LoraHost {
  std::string name;
  Tensor weight;
  bool out_by_in = false;
  std::shared_ptr<LoraAdapter>* slot = nullptr;

  int d_in() const { return out_by_in ? weight.dim(1) : weight.dim(0); }
  int d_out() const { return out_by_in ? weight.dim(0) : weight.dim(1); }
};

// Installs adapters on every targeted, non-excluded host, freezes all base
// parameters and leaves only the adapter factors trainable. Returns the
// number of adapters created.
int attach(MultimodalModel& model, const LoraConfig& cfg, Rng& rng);

// W' = W + scaling * B A folded into the host storage (inference mode).
void merge(LoraAdapter& adapter, LoraHost& host);
void unmerge(LoraAdapter& adapter, LoraHost& host);

std::size_t trainable_param_count(const MultimodalModel& model);

}  // namespace ecglab
