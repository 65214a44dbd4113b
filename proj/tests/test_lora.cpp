// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "ecglab/model.hpp"

using namespace ecglab;

namespace {

ModelConfig tiny_model_cfg() {
  ModelConfig cfg;
  cfg.vision.image_size = 16;
  cfg.vision.patch_size = 8;
  cfg.vision.embed_dim = 8;
  cfg.vision.local_layers = 2;
  cfg.vision.global_layers = 1;
  cfg.vision.tap_layers = {1};
  cfg.vision.heads = 2;
  cfg.vision.ffn_mult = 2;
  cfg.vision.gate_init = 0.5;
  cfg.lm.layers = 2;
  cfg.lm.hidden_dim = 16;
  cfg.lm.heads = 2;
  cfg.lm.cross_start = 2;
  cfg.lm.cross_interval = 2;
  cfg.lm.max_seq = 32;
  cfg.lm.ffn_mult = 2;
  cfg.lm.gate_init = 0.5;
  return cfg;
}

LoraConfig tiny_lora(int rank = 2) {
  LoraConfig cfg;
  cfg.rank = rank;
  cfg.alpha = 2.0 * rank;
  cfg.dropout_p = 0.0;
  return cfg;
}

Raster random_raster(int size, Rng& rng) {
  Raster img = Raster::blank(size, size);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  return img;
}

Tensor model_logits(MultimodalModel& m, const Raster& img, const TokenSequence& seq) {
  ForwardCtx ctx;
  return m.forward_logits(seq, m.encode_image(img, ctx), ctx);
}

}  // namespace

TEST_CASE("fresh attach leaves the forward pass bitwise unchanged") {
  ModelConfig cfg = tiny_model_cfg();
  MultimodalModel base = MultimodalModel::build(cfg, 5);
  MultimodalModel adapted = MultimodalModel::build(cfg, 5);
  Rng rng(1);
  attach(adapted, tiny_lora(), rng);

  Rng img_rng(2);
  TokenSequence seq = tokenize("What?");
  for (int trial = 0; trial < 3; ++trial) {
    Raster img = random_raster(16, img_rng);
    Tensor a = model_logits(base, img, seq);
    Tensor b = model_logits(adapted, img, seq);
    REQUIRE(a.numel() == b.numel());
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
  }
}

TEST_CASE("attach freezes the base and trains only the factors") {
  MultimodalModel m = MultimodalModel::build(tiny_model_cfg(), 5);
  Rng rng(1);
  attach(m, tiny_lora(), rng);
  for (NamedParam& p : m.params()) {
    const bool is_adapter =
        p.name.ends_with(".lora_a") || p.name.ends_with(".lora_b");
    CHECK(p.tensor.requires_grad() == is_adapter);
  }
  for (const auto& adapter : m.adapters) {
    for (double v : adapter->b.data()) CHECK(v == 0.0);
  }
}

TEST_CASE("paper exclusions keep lm_head and embed_tokens unadapted") {
  MultimodalModel m = MultimodalModel::build(tiny_model_cfg(), 5);
  Rng rng(1);
  attach(m, tiny_lora(), rng);
  for (const auto& adapter : m.adapters) {
    CHECK(adapter->host_name.find("lm_head") == std::string::npos);
    CHECK(adapter->host_name.find("embed_tokens") == std::string::npos);
  }
  CHECK_FALSE(m.lm.lm_head.adapter);
}

TEST_CASE("adapter count equals the name-walk oracle") {
  MultimodalModel m = MultimodalModel::build(tiny_model_cfg(), 5);
  LoraConfig cfg = tiny_lora();
  // Independent count: walk host names and apply the documented rule.
  int expected = 0;
  for (const LoraHost& h : m.lora_hosts()) {
    const bool excluded = h.name.find("lm_head") != std::string::npos ||
                          h.name.find("embed_tokens") != std::string::npos;
    const bool targeted = h.name.ends_with(".wq.weight") || h.name.ends_with(".wk.weight") ||
                          h.name.ends_with(".wv.weight") || h.name.ends_with(".wo.weight") ||
                          h.name.ends_with(".w1.weight") || h.name.ends_with(".w2.weight") ||
                          h.name == "vision.patch_embed.weight" || h.name == "proj.w_p" ||
                          h.name == "lm.lm_head.weight";
    if (targeted && !excluded) ++expected;
  }
  Rng rng(1);
  const int created = attach(m, cfg, rng);
  CHECK(created == expected);
  CHECK(m.adapters.size() == static_cast<std::size_t>(expected));
}

TEST_CASE("attach with an impossible rule is a configuration error") {
  MultimodalModel m = MultimodalModel::build(tiny_model_cfg(), 5);
  LoraConfig cfg = tiny_lora();
  cfg.target_rule = [](const std::string&) { return false; };
  Rng rng(1);
  CHECK_THROWS_AS(attach(m, cfg, rng), ConfigError);
}

TEST_CASE("paper mode insists on its exclusions") {
  LoraConfig cfg = tiny_lora();
  cfg.exclusions = {"lm_head"};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.paper_mode = false;
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("merge with zero B is exact and merging twice is a state error") {
  Rng rng(3);
  LoraConfig cfg = tiny_lora();
  Tensor host_w = Tensor::randn({4, 4}, rng, 1.0);
  std::shared_ptr<LoraAdapter> slot;
  LoraHost host{"block.wq.weight", host_w, false, &slot};
  LoraAdapter ad = LoraAdapter::create(host.name, 4, 4, cfg, rng);

  const std::vector<double> before = host_w.data();
  merge(ad, host);
  CHECK(host_w.data() == before);
  CHECK_THROWS_AS(merge(ad, host), StateError);
  unmerge(ad, host);
  CHECK_THROWS_AS(unmerge(ad, host), StateError);
}

TEST_CASE("merged and adapter-path forwards agree on random factors") {
  Rng rng(4);
  LoraConfig cfg = tiny_lora(2);
  Tensor host_w = Tensor::randn({4, 4}, rng, 1.0);
  std::shared_ptr<LoraAdapter> slot;
  LoraHost host{"block.wq.weight", host_w, false, &slot};
  LoraAdapter ad = LoraAdapter::create(host.name, 4, 4, cfg, rng);
  for (double& v : ad.b.data()) v = rng.normal(0.0, 0.5);

  Tensor x = Tensor::randn({3, 4}, rng, 1.0);
  Tensor adapter_path = add(matmul(x, host_w), ad.forward_delta(x, false, nullptr));
  merge(ad, host);
  Tensor merged_path = matmul(x, host_w);
  for (std::size_t i = 0; i < adapter_path.numel(); ++i) {
    CHECK(std::abs(adapter_path.data()[i] - merged_path.data()[i]) < 1e-12);
  }
}

TEST_CASE("merge equivalence across 50 random configurations") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const int d_in = rng.uniform_int(2, 8);
    const int d_out = rng.uniform_int(2, 8);
    LoraConfig cfg = tiny_lora(rng.uniform_int(1, 4));
    cfg.alpha = rng.uniform(0.5, 4.0) * cfg.rank;
    Tensor host_w = Tensor::randn({d_in, d_out}, rng, 1.0);
    std::shared_ptr<LoraAdapter> slot;
    LoraHost host{"block.wq.weight", host_w, false, &slot};
    LoraAdapter ad = LoraAdapter::create(host.name, d_in, d_out, cfg, rng);
    for (double& v : ad.b.data()) v = rng.normal(0.0, 1.0);

    Tensor x = Tensor::randn({2, d_in}, rng, 1.0);
    Tensor adapter_path = add(matmul(x, host_w), ad.forward_delta(x, false, nullptr));
    merge(ad, host);
    Tensor merged_path = matmul(x, host_w);
    for (std::size_t i = 0; i < adapter_path.numel(); ++i) {
      CHECK(std::abs(adapter_path.data()[i] - merged_path.data()[i]) < 1e-9);
    }
  }
}

TEST_CASE("merge then unmerge restores the host weight") {
  Rng rng(6);
  LoraConfig cfg = tiny_lora(3);
  Tensor host_w = Tensor::randn({5, 7}, rng, 1.0);
  std::shared_ptr<LoraAdapter> slot;
  LoraHost host{"block.w1.weight", host_w, false, &slot};
  LoraAdapter ad = LoraAdapter::create(host.name, 5, 7, cfg, rng);
  for (double& v : ad.b.data()) v = rng.normal(0.0, 1.0);

  const std::vector<double> before = host_w.data();
  merge(ad, host);
  unmerge(ad, host);
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK(std::abs(host_w.data()[i] - before[i]) < 1e-12);
  }
}

TEST_CASE("projection host merges in its own orientation") {
  Rng rng(7);
  LoraConfig cfg = tiny_lora(2);
  Projection proj = Projection::build(6, 4, rng);
  std::vector<LoraHost> hosts;
  proj.collect_hosts(hosts);
  REQUIRE(hosts.size() == 1);
  CHECK(hosts[0].out_by_in);
  CHECK(hosts[0].d_in() == 6);
  CHECK(hosts[0].d_out() == 4);

  *hosts[0].slot = std::make_shared<LoraAdapter>(
      LoraAdapter::create(hosts[0].name, 6, 4, cfg, rng));
  LoraAdapter& ad = **hosts[0].slot;
  for (double& v : ad.b.data()) v = rng.normal(0.0, 1.0);

  Tensor z = Tensor::randn({3, 6}, rng, 1.0);
  Tensor adapter_path = proj.forward(z, ForwardCtx{});
  merge(ad, hosts[0]);
  Tensor merged_path = proj.forward(z, ForwardCtx{});
  for (std::size_t i = 0; i < adapter_path.numel(); ++i) {
    CHECK(std::abs(adapter_path.data()[i] - merged_path.data()[i]) < 1e-9);
  }
}

TEST_CASE("trainable parameter accounting") {
  SUBCASE("entry-count oracle, 4x4 host at rank 2") {
    Rng rng(8);
    LoraAdapter ad = LoraAdapter::create("w", 4, 4, tiny_lora(2), rng);
    CHECK(ad.param_count() == 16);
  }
  SUBCASE("paper-dims spot check") {
    Rng rng(9);
    LoraConfig cfg;
    cfg.rank = 64;
    cfg.alpha = 128;
    LoraAdapter ad = LoraAdapter::create("w", 4096, 4096, cfg, rng);
    CHECK(ad.param_count() == 524288);
  }
  SUBCASE("model-level count is linear in rank and excludes frozen hosts") {
    std::size_t prev = 0;
    for (int r : {1, 2, 4}) {
      MultimodalModel m = MultimodalModel::build(tiny_model_cfg(), 5);
      Rng rng(1);
      const int n = attach(m, tiny_lora(r), rng);
      std::size_t expected = 0;
      for (const auto& ad : m.adapters) {
        expected += static_cast<std::size_t>(r) *
                    static_cast<std::size_t>(ad->a.dim(1) + ad->b.dim(0));
      }
      CHECK(trainable_param_count(m) == expected);
      if (prev != 0) CHECK(trainable_param_count(m) == prev * 2);
      prev = trainable_param_count(m);
      CHECK(n > 0);
    }
  }
}

TEST_CASE("doubling alpha exactly doubles the merged delta") {
  // Zero hosts so W' - W is the raw delta, free of addition rounding.
  for (double alpha : {8.0, 64.0, 128.0}) {
    LoraConfig cfg;
    cfg.rank = 4;
    cfg.dropout_p = 0.0;
    cfg.alpha = alpha;
    Tensor host_a = Tensor::zeros({6, 6});
    Tensor host_b = Tensor::zeros({6, 6});
    std::shared_ptr<LoraAdapter> slot_a, slot_b;
    LoraHost ha{"w.wq.weight", host_a, false, &slot_a};
    LoraHost hb{"w.wq.weight", host_b, false, &slot_b};
    Rng factors(42);
    LoraAdapter ad1 = LoraAdapter::create("w", 6, 6, cfg, factors);
    cfg.alpha = 2.0 * alpha;
    Rng factors2(42);
    LoraAdapter ad2 = LoraAdapter::create("w", 6, 6, cfg, factors2);
    Rng bvals(7);
    for (double& v : ad1.b.data()) v = bvals.normal(0.0, 1.0);
    ad2.b.data() = ad1.b.data();

    merge(ad1, ha);
    merge(ad2, hb);
    for (std::size_t i = 0; i < host_a.data().size(); ++i) {
      CHECK(host_b.data()[i] == 2.0 * host_a.data()[i]);
    }

    // The forward-path delta doubles exactly as well.
    Rng xr(3);
    Tensor x = Tensor::randn({2, 6}, xr, 1.0);
    Tensor d1 = ad1.forward_delta(x, false, nullptr);
    Tensor d2 = ad2.forward_delta(x, false, nullptr);
    for (std::size_t i = 0; i < d1.numel(); ++i) CHECK(d2.data()[i] == 2.0 * d1.data()[i]);
  }
}

TEST_CASE("adapter dropout applies only on the adapter input path") {
  Rng rng(11);
  LoraConfig cfg = tiny_lora(2);
  cfg.dropout_p = 0.5;
  LoraAdapter ad = LoraAdapter::create("w", 4, 4, cfg, rng);
  for (double& v : ad.b.data()) v = 1.0;
  Tensor x = Tensor::full({2, 4}, 1.0);

  Rng d1(77);
  Tensor train1 = ad.forward_delta(x, true, &d1);
  Rng d2(77);
  Tensor train2 = ad.forward_delta(x, true, &d2);
  CHECK(train1.data() == train2.data());  // seeded, deterministic

  Tensor eval1 = ad.forward_delta(x, false, nullptr);
  Tensor eval2 = ad.forward_delta(x, false, nullptr);
  CHECK(eval1.data() == eval2.data());
}
