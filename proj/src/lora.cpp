// SPDX-License-Identifier: Apache-2.0
#include "ecglab/lora.hpp"

#include <Eigen/Core>

#include "ecglab/model.hpp"

namespace ecglab {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

bool default_target(const std::string& name) {
  static const char* kSuffixes[] = {
      ".wq.weight", ".wk.weight", ".wv.weight", ".wo.weight",
      ".w1.weight", ".w2.weight",
  };
  for (const char* s : kSuffixes) {
    if (name.size() >= std::string(s).size() &&
        name.compare(name.size() - std::string(s).size(), std::string::npos, s) == 0) {
      return true;
    }
  }
  return name == "vision.patch_embed.weight" || name == "proj.w_p" ||
         name == "lm.lm_head.weight";
}

// scaling * B A, in the host's storage orientation.
RowMat scaled_delta(const LoraAdapter& adapter, bool out_by_in) {
  const int r = adapter.a.dim(0);
  const int d_in = adapter.a.dim(1);
  const int d_out = adapter.b.dim(0);
  ConstMap a(adapter.a.data().data(), r, d_in);
  ConstMap b(adapter.b.data().data(), d_out, r);
  RowMat delta = adapter.scaling * (b * a);  // [d_out x d_in]
  if (out_by_in) return delta;
  return delta.transpose();
}

}  // namespace

void LoraConfig::validate() const {
  if (rank < 1) throw ConfigError("lora: rank must be >= 1");
  if (dropout_p < 0.0 || dropout_p >= 1.0) {
    throw ConfigError("lora: dropout_p must lie in [0,1)");
  }
  if (paper_mode &&
      (exclusions.count("lm_head") == 0 || exclusions.count("embed_tokens") == 0)) {
    throw ConfigError("lora: paper mode requires lm_head and embed_tokens exclusions");
  }
}

bool LoraConfig::targets(const std::string& name) const {
  return target_rule ? target_rule(name) : default_target(name);
}

bool LoraConfig::excluded(const std::string& name) const {
  for (const std::string& token : exclusions) {
    if (name.find(token) != std::string::npos) return true;
  }
  return false;
}

LoraAdapter LoraAdapter::create(const std::string& host_name, int d_in, int d_out,
                                const LoraConfig& cfg, Rng& rng) {
  cfg.validate();
  LoraAdapter ad;
  ad.host_name = host_name;
  ad.a = Tensor::randn({cfg.rank, d_in}, rng, 1.0 / cfg.rank, /*requires_grad=*/true);
  ad.b = Tensor::zeros({d_out, cfg.rank}, /*requires_grad=*/true);
  ad.scaling = cfg.alpha / cfg.rank;
  ad.dropout_keep = 1.0 - cfg.dropout_p;
  return ad;
}

Tensor LoraAdapter::forward_delta(const Tensor& x, bool training, Rng* rng) const {
  Tensor in = x;
  if (training && dropout_keep < 1.0 && rng != nullptr) {
    in = dropout(x, dropout_keep, *rng);
  }
  return scale(matmul(matmul(in, transpose(a)), transpose(b)), scaling);
}

int attach(MultimodalModel& model, const LoraConfig& cfg, Rng& rng) {
  cfg.validate();
  int created = 0;
  for (LoraHost& host : model.lora_hosts()) {
    if (!cfg.targets(host.name) || cfg.excluded(host.name)) continue;
    *host.slot = std::make_shared<LoraAdapter>(
        LoraAdapter::create(host.name, host.d_in(), host.d_out(), cfg, rng));
    ++created;
  }
  if (created == 0) throw ConfigError("lora attach: target rule matched no parameters");
  for (NamedParam& p : model.params()) {
    const bool is_adapter = p.name.size() > 7 &&
                            (p.name.ends_with(".lora_a") || p.name.ends_with(".lora_b"));
    p.tensor.set_requires_grad(is_adapter);
  }
  model.refresh_adapters();
  return created;
}

void merge(LoraAdapter& adapter, LoraHost& host) {
  if (adapter.merged) throw StateError("merge: adapter already merged into " + host.name);
  const RowMat delta = scaled_delta(adapter, host.out_by_in);
  MutMap w(host.weight.data().data(), host.weight.dim(0), host.weight.dim(1));
  w += delta;
  adapter.merged = true;
}

void unmerge(LoraAdapter& adapter, LoraHost& host) {
  if (!adapter.merged) throw StateError("unmerge: adapter is not merged into " + host.name);
  const RowMat delta = scaled_delta(adapter, host.out_by_in);
  MutMap w(host.weight.data().data(), host.weight.dim(0), host.weight.dim(1));
  w -= delta;
  adapter.merged = false;
}

std::size_t trainable_param_count(const MultimodalModel& model) {
  std::size_t count = 0;
  for (const auto& adapter : model.adapters) count += adapter->param_count();
  return count;
}

}  // namespace ecglab
