// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "ecglab/model.hpp"

using namespace ecglab;

namespace {

VisionConfig tiny_vision(double gate_init = 0.0) {
  VisionConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 8;
  cfg.channels = 1;
  cfg.embed_dim = 8;
  cfg.local_layers = 2;
  cfg.global_layers = 1;
  cfg.tap_layers = {1};
  cfg.heads = 2;
  cfg.ffn_mult = 2;
  cfg.gate_init = gate_init;
  return cfg;
}

LmConfig tiny_lm(double gate_init = 0.0) {
  LmConfig cfg;
  cfg.layers = 2;
  cfg.hidden_dim = 16;
  cfg.heads = 2;
  cfg.cross_start = 2;
  cfg.cross_interval = 2;
  cfg.max_seq = 32;
  cfg.ffn_mult = 2;
  cfg.gate_init = gate_init;
  return cfg;
}

Raster random_raster(int size, Rng& rng) {
  Raster img = Raster::blank(size, size);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  return img;
}

// Zeroes every transformer-block parameter, leaving the patch embedding and
// position table untouched.
void zero_blocks(VisionEncoder& enc) {
  std::vector<NamedParam> params;
  enc.collect(params);
  for (NamedParam& p : params) {
    if (p.name.find(".local.") != std::string::npos ||
        p.name.find(".global.") != std::string::npos) {
      std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0);
    }
  }
}

}  // namespace

// ---- vision ----------------------------------------------------------------

TEST_CASE("paper patch grid is 32x32") {
  VisionConfig cfg;  // paper defaults
  cfg.validate();
  CHECK(cfg.grid() == 32);
  CHECK(cfg.num_patches() == 1024);
  CHECK(cfg.out_dim() == 7680);
}

TEST_CASE("patchify counting oracle at desk scale") {
  VisionConfig cfg = tiny_vision();
  cfg.image_size = 64;
  cfg.patch_size = 8;
  Rng rng(1);
  Raster img = random_raster(64, rng);
  Tensor patches = patchify(img, cfg);
  CHECK(patches.dim(0) == (64 / 8) * (64 / 8));
  CHECK(patches.dim(1) == 8 * 8);
}

TEST_CASE("patchify rejects indivisible images") {
  VisionConfig cfg;
  cfg.image_size = 450;
  cfg.patch_size = 14;
  Raster img = Raster::blank(450, 450);
  CHECK_THROWS_AS(patchify(img, cfg), ShapeError);
  Raster rect = Raster::blank(448, 224);
  CHECK_THROWS_AS(patchify(rect, VisionConfig{}), ShapeError);
}

TEST_CASE("patchify row layout and scaling") {
  VisionConfig cfg = tiny_vision();  // 16px image, 8px patches, 2x2 grid
  Raster img = Raster::blank(16, 16, 0);
  img.set(8, 0, 255);  // patch (0,1), local pixel (0,0)
  Tensor patches = patchify(img, cfg);
  CHECK(patches.at(1, 0) == doctest::Approx(1.0));
  CHECK(patches.at(0, 0) == 0.0);
  CHECK(patches.at(2, 0) == 0.0);
}

TEST_CASE("local encoder taps") {
  Rng rng(2);
  SUBCASE("no taps") {
    VisionConfig cfg = tiny_vision();
    cfg.tap_layers = {};
    VisionEncoder enc = VisionEncoder::build(cfg, rng);
    Raster img = random_raster(16, rng);
    auto [z_l, taps] = enc.local_encode(patchify(img, cfg), ForwardCtx{});
    CHECK(taps.empty());
    CHECK(z_l.shape() == Shape{4, 8});
  }
  SUBCASE("desk taps have encoder width") {
    VisionConfig cfg = tiny_vision();
    cfg.local_layers = 4;
    cfg.tap_layers = {1, 3};
    VisionEncoder enc = VisionEncoder::build(cfg, rng);
    Raster img = random_raster(16, rng);
    auto [z_l, taps] = enc.local_encode(patchify(img, cfg), ForwardCtx{});
    REQUIRE(taps.size() == 2);
    for (const Tensor& t : taps) CHECK(t.shape() == Shape{4, 8});
    CHECK(z_l.shape() == Shape{4, 8});
  }
}

TEST_CASE("zeroed blocks pass the embedding stream through unchanged") {
  Rng rng(3);
  VisionConfig cfg = tiny_vision();
  VisionEncoder enc = VisionEncoder::build(cfg, rng);
  zero_blocks(enc);
  Raster img = random_raster(16, rng);
  Tensor patches = patchify(img, cfg);
  ForwardCtx ctx;
  Tensor expected = add(enc.patch_embed.forward(patches, ctx), enc.pos_embed);
  auto [z_l, taps] = enc.local_encode(patches, ctx);
  REQUIRE(z_l.numel() == expected.numel());
  for (std::size_t i = 0; i < z_l.numel(); ++i) CHECK(z_l.data()[i] == expected.data()[i]);
}

TEST_CASE("zero gates make the global encoder an identity") {
  Rng rng(4);
  VisionConfig cfg = tiny_vision(/*gate_init=*/0.0);
  VisionEncoder enc = VisionEncoder::build(cfg, rng);
  Raster img = random_raster(16, rng);
  ForwardCtx ctx;
  auto [z_l, taps] = enc.local_encode(patchify(img, cfg), ctx);
  Tensor z_g = enc.global_encode(z_l, ctx);
  for (std::size_t i = 0; i < z_l.numel(); ++i) CHECK(z_g.data()[i] == z_l.data()[i]);

  VisionOutput out = enc.encode(img, ctx);
  for (std::size_t i = 0; i < z_l.numel(); ++i) CHECK(out.z_g.data()[i] == z_l.data()[i]);
}

TEST_CASE("dimensional law z_v width = d * (1 + taps)") {
  Rng rng(5);
  SUBCASE("desk arithmetic") {
    VisionConfig cfg = tiny_vision();
    cfg.local_layers = 4;
    cfg.tap_layers = {1, 3};
    VisionEncoder enc = VisionEncoder::build(cfg, rng);
    Raster img = random_raster(16, rng);
    VisionOutput out = enc.encode(img, ForwardCtx{});
    CHECK(out.z_v.dim(1) == 8 * 3);
    CHECK(out.z_v.dim(0) == 4);
    CHECK(cfg.out_dim() == 24);
  }
  SUBCASE("no taps collapses to z_g") {
    VisionConfig cfg = tiny_vision();
    cfg.tap_layers = {};
    VisionEncoder enc = VisionEncoder::build(cfg, rng);
    Raster img = random_raster(16, rng);
    VisionOutput out = enc.encode(img, ForwardCtx{});
    CHECK(out.z_v.dim(1) == 8);
    for (std::size_t i = 0; i < out.z_g.numel(); ++i)
      CHECK(out.z_v.data()[i] == out.z_g.data()[i]);
  }
}

TEST_CASE("patch permutation equivariance holds only without positions") {
  Rng rng(6);
  VisionConfig cfg = tiny_vision(/*gate_init=*/0.4);
  VisionEncoder enc = VisionEncoder::build(cfg, rng);
  Raster img = random_raster(16, rng);

  // Swap patch tiles (0,0) and (1,1): rows 0 and 3 of the patch matrix.
  Raster swapped = img;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      swapped.set(x, y, img.at(8 + x, 8 + y));
      swapped.set(8 + x, 8 + y, img.at(x, y));
    }

  SUBCASE("zeroed positions: outputs permute with the patches") {
    std::fill(enc.pos_embed.data().begin(), enc.pos_embed.data().end(), 0.0);
    VisionOutput a = enc.encode(img, ForwardCtx{});
    VisionOutput b = enc.encode(swapped, ForwardCtx{});
    const int w = a.z_v.dim(1);
    for (int j = 0; j < w; ++j) {
      CHECK(b.z_v.at(0, j) == doctest::Approx(a.z_v.at(3, j)).epsilon(1e-12));
      CHECK(b.z_v.at(3, j) == doctest::Approx(a.z_v.at(0, j)).epsilon(1e-12));
      CHECK(b.z_v.at(1, j) == doctest::Approx(a.z_v.at(1, j)).epsilon(1e-12));
    }
  }
  SUBCASE("learned positions break pure permutation") {
    VisionOutput a = enc.encode(img, ForwardCtx{});
    VisionOutput b = enc.encode(swapped, ForwardCtx{});
    double diff = 0.0;
    const int w = a.z_v.dim(1);
    for (int j = 0; j < w; ++j) diff += std::abs(b.z_v.at(0, j) - a.z_v.at(3, j));
    CHECK(diff > 1e-6);
  }
}

TEST_CASE("vision encoder gradients check out at desk scale") {
  Rng rng(7);
  VisionConfig cfg = tiny_vision(/*gate_init=*/0.3);
  VisionEncoder enc = VisionEncoder::build(cfg, rng);
  Raster img = random_raster(16, rng);
  Tensor patches = patchify(img, cfg);
  Tensor weights = Tensor::randn({4, cfg.out_dim()}, rng, 1.0);

  auto loss = [&](Tensor&) {
    ForwardCtx ctx;
    return sum_all(mul(enc.encode_patches(patches, ctx).z_v, weights));
  };
  Tensor gate = enc.global_blocks[0].attn_gate;
  CHECK(grad_check(loss, gate, 1e-5) < 1e-6);
  Tensor gain = enc.local[1].attn_norm.gain;
  CHECK(grad_check(loss, gain, 1e-5) < 1e-4);
  Tensor pe = enc.patch_embed.bias;
  CHECK(grad_check(loss, pe, 1e-5) < 1e-4);
}

// ---- language ---------------------------------------------------------------

TEST_CASE("tokenize maps bytes with the special offset") {
  TokenSequence seq = tokenize("AB");
  CHECK(seq.ids == std::vector<int>{69, 70});
  CHECK(tokenize("").ids.empty());
}

TEST_CASE("tokenize round-trips random byte strings") {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    std::string s;
    const int len = rng.uniform_int(0, 40);
    for (int i = 0; i < len; ++i) s.push_back(static_cast<char>(rng.uniform_int(0, 255)));
    CHECK(detokenize(tokenize(s).ids) == s);
  }
}

TEST_CASE("detokenize rejects out-of-range ids") {
  CHECK_THROWS_AS(detokenize({260}), ContractError);
  CHECK_THROWS_AS(detokenize({-1}), ContractError);
  CHECK(detokenize({kBosToken, 69, kEosToken}) == "A");
}

TEST_CASE("cross-attention schedule") {
  LmConfig paper;  // 40 layers, start 3, interval 5
  CHECK(cross_attn_layer_indices(paper) == std::vector<int>{3, 8, 13, 18, 23, 28, 33, 38});

  LmConfig ten = paper;
  ten.layers = 10;
  CHECK(cross_attn_layer_indices(ten) == std::vector<int>{3, 8});

  LmConfig two = paper;
  two.layers = 2;
  CHECK(cross_attn_layer_indices(two).empty());
}

TEST_CASE("zero cross gates make a pure text model") {
  Rng rng(9);
  LmConfig cfg = tiny_lm(/*gate_init=*/0.0);
  LanguageModel lm = LanguageModel::build(cfg, rng);
  TokenSequence seq = tokenize("hello ecg");
  seq.ids.insert(seq.ids.begin(), {kBosToken, kImgToken});
  seq.roles.insert(seq.roles.begin(), 2, Role::question);

  Tensor visual = Tensor::randn({5, cfg.hidden_dim}, rng, 1.0);
  Tensor with = lm.forward(seq, visual, ForwardCtx{});
  Tensor without = lm.forward(seq, Tensor{}, ForwardCtx{});
  REQUIRE(with.numel() == without.numel());
  for (std::size_t i = 0; i < with.numel(); ++i) CHECK(with.data()[i] == without.data()[i]);

  Tensor other = Tensor::randn({3, cfg.hidden_dim}, rng, 2.0);
  Tensor with2 = lm.forward(seq, other, ForwardCtx{});
  for (std::size_t i = 0; i < with.numel(); ++i) CHECK(with2.data()[i] == with.data()[i]);
}

TEST_CASE("forward rejects mis-sized visual context") {
  Rng rng(10);
  LmConfig cfg = tiny_lm();
  LanguageModel lm = LanguageModel::build(cfg, rng);
  TokenSequence seq = tokenize("x");
  Tensor bad = Tensor::zeros({4, cfg.hidden_dim + 1});
  CHECK_THROWS_WITH_AS(lm.forward(seq, bad, ForwardCtx{}), doctest::Contains("hidden_dim"),
                       ShapeError);
}

TEST_CASE("causality: changing a token never affects earlier logits") {
  Rng rng(11);
  LmConfig cfg = tiny_lm(/*gate_init=*/0.5);
  LanguageModel lm = LanguageModel::build(cfg, rng);
  Tensor visual = Tensor::randn({4, cfg.hidden_dim}, rng, 1.0);

  TokenSequence seq = tokenize("abcdefgh");
  Tensor base = lm.forward(seq, visual, ForwardCtx{});
  for (std::size_t j = 0; j < seq.size(); ++j) {
    TokenSequence perturbed = seq;
    perturbed.ids[j] = (perturbed.ids[j] + 41) % kByteVocab;
    Tensor out = lm.forward(perturbed, visual, ForwardCtx{});
    for (std::size_t pos = 0; pos < j; ++pos) {
      for (int v = 0; v < cfg.vocab_size; ++v) {
        CHECK(out.data()[pos * cfg.vocab_size + v] == base.data()[pos * cfg.vocab_size + v]);
      }
    }
  }
}

TEST_CASE("logits stay finite for finite inputs") {
  Rng rng(12);
  LmConfig cfg = tiny_lm(/*gate_init=*/1.0);
  LanguageModel lm = LanguageModel::build(cfg, rng);
  Tensor visual = Tensor::randn({4, cfg.hidden_dim}, rng, 3.0);
  TokenSequence seq = tokenize("finite check 123");
  Tensor out = lm.forward(seq, visual, ForwardCtx{});
  for (double v : out.data()) CHECK(std::isfinite(v));
}

TEST_CASE("language model + cross-entropy gradients check out") {
  Rng rng(13);
  LmConfig cfg = tiny_lm(/*gate_init=*/0.5);
  LanguageModel lm = LanguageModel::build(cfg, rng);
  Tensor visual = Tensor::randn({4, cfg.hidden_dim}, rng, 1.0);
  TokenSequence seq = tokenize("qa");
  const std::vector<int> targets = {70, 2};

  auto loss = [&](Tensor&) {
    return cross_entropy_sum(lm.forward(seq, visual, ForwardCtx{}), targets, -1);
  };
  Tensor gate = lm.blocks[1].cross_gate;
  CHECK(grad_check(loss, gate, 1e-5) < 1e-6);
  Tensor gain = lm.blocks[0].ffn_norm.gain;
  CHECK(grad_check(loss, gain, 1e-5) < 1e-4);
}

TEST_CASE("generation stops immediately on a forced EOS head") {
  Rng rng(14);
  LmConfig cfg = tiny_lm();
  LanguageModel lm = LanguageModel::build(cfg, rng);
  // Blocks and positions silenced; the head column for EOS aligned with the
  // (constant) embedding so EOS always wins the argmax.
  std::vector<NamedParam> params;
  lm.collect(params);
  for (NamedParam& p : params) {
    if (p.name.find("lm.layers.") != std::string::npos || p.name == "lm.pos_embed") {
      std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0);
    }
  }
  for (int j = 0; j < cfg.hidden_dim; ++j) {
    lm.embed_tokens.data()[static_cast<std::size_t>(kBosToken) * cfg.hidden_dim + j] = 1.0;
  }
  std::fill(lm.lm_head.weight.data().begin(), lm.lm_head.weight.data().end(), 0.0);
  for (int j = 0; j < cfg.hidden_dim; ++j) {
    lm.lm_head.weight.data()[static_cast<std::size_t>(j) * cfg.vocab_size + kEosToken] = 1.0;
  }

  TokenSequence prompt;
  prompt.push(kBosToken, Role::question);
  CHECK(lm.generate(prompt, Tensor{}, 8) == "");
}

TEST_CASE("generate with max_new 0 returns empty") {
  Rng rng(15);
  LanguageModel lm = LanguageModel::build(tiny_lm(), rng);
  TokenSequence prompt = tokenize("q");
  CHECK(lm.generate(prompt, Tensor{}, 0) == "");
}

TEST_CASE("generate rejects oversized and empty prompts") {
  Rng rng(16);
  LmConfig cfg = tiny_lm();
  LanguageModel lm = LanguageModel::build(cfg, rng);
  TokenSequence prompt;
  CHECK_THROWS_AS(lm.generate(prompt, Tensor{}, 4), ContractError);
  for (int i = 0; i < cfg.max_seq + 1; ++i) prompt.push(69, Role::question);
  CHECK_THROWS_AS(lm.generate(prompt, Tensor{}, 4), ContractError);
}

// ---- integration ------------------------------------------------------------

TEST_CASE("projection identity case") {
  Rng rng(17);
  Projection p = Projection::build(4, 4, rng);
  std::fill(p.w_p.data().begin(), p.w_p.data().end(), 0.0);
  for (int i = 0; i < 4; ++i) p.w_p.data()[static_cast<std::size_t>(i) * 4 + i] = 1.0;
  std::fill(p.b_p.data().begin(), p.b_p.data().end(), 0.0);
  Tensor z = Tensor::randn({3, 4}, rng, 1.0);
  Tensor f = p.forward(z, ForwardCtx{});
  for (std::size_t i = 0; i < z.numel(); ++i) CHECK(f.data()[i] == z.data()[i]);
}

TEST_CASE("projection carries paper widths 7680 to 4096") {
  Rng rng(18);
  Projection p = Projection::build(7680, 4096, rng);
  CHECK(p.w_p.shape() == Shape{4096, 7680});
  CHECK(p.b_p.shape() == Shape{4096});
  Tensor z = Tensor::randn({4, 7680}, rng, 0.1);
  Tensor f = p.forward(z, ForwardCtx{});
  CHECK(f.shape() == Shape{4, 4096});
}

TEST_CASE("projection matches the scalar oracle") {
  Rng rng(19);
  Projection p = Projection::build(5, 3, rng);
  Tensor z = Tensor::randn({2, 5}, rng, 1.0);
  Tensor f = p.forward(z, ForwardCtx{});
  for (int i = 0; i < 2; ++i) {
    for (int o = 0; o < 3; ++o) {
      double acc = p.b_p.data()[static_cast<std::size_t>(o)];
      for (int j = 0; j < 5; ++j) acc += z.at(i, j) * p.w_p.at(o, j);
      CHECK(f.at(i, o) == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("projection is linear when the bias is zero") {
  Rng rng(20);
  Projection p = Projection::build(6, 4, rng);
  std::fill(p.b_p.data().begin(), p.b_p.data().end(), 0.0);
  Tensor x = Tensor::randn({2, 6}, rng, 1.0);
  Tensor y = Tensor::randn({2, 6}, rng, 1.0);
  const double a = 1.7, b = -0.4;
  Tensor lhs = p.forward(add(scale(x, a), scale(y, b)), ForwardCtx{});
  Tensor rhs = add(scale(p.forward(x, ForwardCtx{}), a), scale(p.forward(y, ForwardCtx{}), b));
  for (std::size_t i = 0; i < lhs.numel(); ++i)
    CHECK(lhs.data()[i] == doctest::Approx(rhs.data()[i]).epsilon(1e-12));
}

TEST_CASE("projection gradients check out") {
  Rng rng(21);
  Projection p = Projection::build(4, 3, rng);
  Tensor z = Tensor::randn({2, 4}, rng, 1.0);
  Tensor w = Tensor::randn({2, 3}, rng, 1.0);
  auto loss = [&](Tensor&) { return sum_all(mul(p.forward(z, ForwardCtx{}), w)); };
  CHECK(grad_check(loss, p.w_p, 1e-5) < 1e-6);
  CHECK(grad_check(loss, p.b_p, 1e-5) < 1e-6);
}

// ---- assembled model --------------------------------------------------------

TEST_CASE("parameter names are unique and stable") {
  ModelConfig cfg{tiny_vision(), tiny_lm()};
  MultimodalModel m = MultimodalModel::build(cfg, 99);
  std::vector<NamedParam> params = m.params();
  std::set<std::string> names;
  for (const NamedParam& p : params) names.insert(p.name);
  CHECK(names.size() == params.size());
  CHECK(names.count("vision.patch_embed.weight") == 1);
  CHECK(names.count("proj.w_p") == 1);
  CHECK(names.count("lm.embed_tokens") == 1);
  CHECK(names.count("lm.lm_head.weight") == 1);
  CHECK(names.count("lm.layers.1.cross_attn.gate") == 1);

  MultimodalModel m2 = MultimodalModel::build(cfg, 99);
  std::vector<NamedParam> params2 = m2.params();
  REQUIRE(params.size() == params2.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(params[i].name == params2[i].name);
    CHECK(params[i].tensor.data() == params2[i].tensor.data());
  }
}

TEST_CASE("multimodal forward shapes line up") {
  ModelConfig cfg{tiny_vision(0.5), tiny_lm(0.5)};
  MultimodalModel m = MultimodalModel::build(cfg, 7);
  Rng rng(22);
  Raster img = random_raster(16, rng);
  ForwardCtx ctx;
  Tensor visual = m.encode_image(img, ctx);
  CHECK(visual.shape() == Shape{4, 16});
  TokenSequence seq = tokenize("Q?");
  Tensor logits = m.forward_logits(seq, visual, ctx);
  CHECK(logits.shape() == Shape{2, kByteVocab});
}
