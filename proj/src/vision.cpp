// SPDX-License-Identifier: Apache-2.0
#include "ecglab/vision.hpp"

#include <algorithm>
#include <fstream>

namespace ecglab {

Raster Raster::blank(int width, int height, std::uint8_t fill, int channels) {
  Raster r;
  r.width = width;
  r.height = height;
  r.channels = channels;
  r.pixels.assign(static_cast<std::size_t>(width) * height * channels, fill);
  return r;
}

void write_pgm(const Raster& img, const std::string& path) {
  if (img.channels != 1) throw ContractError("write_pgm: only single-channel rasters");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("write failed: " + path);
}

Raster read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw IoError("not a binary PGM: " + path);
  int w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (!in || w <= 0 || h <= 0 || maxval != 255) throw IoError("bad PGM header: " + path);
  in.get();  // single whitespace after the header
  Raster img = Raster::blank(w, h);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw IoError("truncated PGM: " + path);
  return img;
}

void VisionConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || channels <= 0 || embed_dim <= 0 ||
      local_layers <= 0 || global_layers < 0 || heads <= 0 || ffn_mult <= 0) {
    throw ConfigError("vision: extents must be positive");
  }
  if (image_size % patch_size != 0) {
    throw ConfigError("vision: image_size " + std::to_string(image_size) +
                      " not divisible by patch_size " + std::to_string(patch_size));
  }
  if (embed_dim % heads != 0) {
    throw ConfigError("vision: heads must divide embed_dim");
  }
  int prev = 0;
  for (int t : tap_layers) {
    if (t < 1 || t > local_layers) {
      throw ConfigError("vision: tap layer " + std::to_string(t) + " outside [1," +
                        std::to_string(local_layers) + "]");
    }
    if (t <= prev) throw ConfigError("vision: tap layers must be strictly ascending");
    prev = t;
  }
}

Tensor patchify(const Raster& image, const VisionConfig& cfg) {
  if (image.width != image.height) {
    throw ShapeError("patchify: image " + std::to_string(image.width) + "x" +
                     std::to_string(image.height) + " is not square");
  }
  if (image.width != cfg.image_size || image.channels != cfg.channels) {
    throw ShapeError("patchify: image " + std::to_string(image.width) + "x" +
                     std::to_string(image.height) + " does not match configured size " +
                     std::to_string(cfg.image_size));
  }
  if (image.width % cfg.patch_size != 0) {
    throw ShapeError("patchify: image size " + std::to_string(image.width) +
                     " not divisible by patch size " + std::to_string(cfg.patch_size));
  }
  const int grid = image.width / cfg.patch_size;
  const int p = cfg.patch_size;
  const int c = cfg.channels;
  Tensor out = Tensor::zeros({grid * grid, p * p * c});
  for (int row = 0; row < grid; ++row) {
    for (int col = 0; col < grid; ++col) {
      const std::size_t base = static_cast<std::size_t>(row * grid + col) *
                               static_cast<std::size_t>(p * p * c);
      std::size_t idx = 0;
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int ch = 0; ch < c; ++ch)
            out.data()[base + idx++] =
                image.at(col * p + px, row * p + py, ch) / 255.0;
    }
  }
  return out;
}

VisionEncoder VisionEncoder::build(const VisionConfig& cfg, Rng& rng) {
  cfg.validate();
  VisionEncoder enc;
  enc.cfg = cfg;
  enc.patch_embed = Linear::build(cfg.patch_dim(), cfg.embed_dim, rng, /*with_bias=*/true);
  // Position signal sized to stay visible next to the patch features.
  enc.pos_embed = Tensor::randn({cfg.num_patches(), cfg.embed_dim}, rng, 0.3);
  for (int i = 0; i < cfg.local_layers; ++i) {
    enc.local.push_back(EncoderBlock::build(cfg.embed_dim, cfg.heads,
                                            cfg.embed_dim * cfg.ffn_mult, rng,
                                            /*gated=*/false, 0.0));
  }
  for (int i = 0; i < cfg.global_layers; ++i) {
    enc.global_blocks.push_back(EncoderBlock::build(cfg.embed_dim, cfg.heads,
                                                    cfg.embed_dim * cfg.ffn_mult, rng,
                                                    /*gated=*/true, cfg.gate_init));
  }
  return enc;
}

std::pair<Tensor, std::vector<Tensor>> VisionEncoder::local_encode(
    const Tensor& patches, const ForwardCtx& ctx) const {
  Tensor x = patch_embed.forward(patches, ctx);
  x = add(x, pos_embed);
  std::vector<Tensor> taps;
  taps.reserve(cfg.tap_layers.size());
  std::size_t next_tap = 0;
  for (int layer = 1; layer <= cfg.local_layers; ++layer) {
    x = local[static_cast<std::size_t>(layer - 1)].forward(x, /*causal=*/false, ctx);
    if (next_tap < cfg.tap_layers.size() && cfg.tap_layers[next_tap] == layer) {
      taps.push_back(x);
      ++next_tap;
    }
  }
  return {x, taps};
}

Tensor VisionEncoder::global_encode(const Tensor& z_l, const ForwardCtx& ctx) const {
  Tensor x = z_l;
  for (const EncoderBlock& block : global_blocks) {
    x = block.forward(x, /*causal=*/false, ctx);
  }
  return x;
}

VisionOutput VisionEncoder::encode(const Raster& image, const ForwardCtx& ctx) const {
  return encode_patches(patchify(image, cfg), ctx);
}

VisionOutput VisionEncoder::encode_patches(const Tensor& patches, const ForwardCtx& ctx) const {
  VisionOutput out;
  auto [z_l, taps] = local_encode(patches, ctx);
  out.taps = taps;
  out.z_g = global_encode(z_l, ctx);
  std::vector<Tensor> parts = {out.z_g};
  parts.insert(parts.end(), taps.begin(), taps.end());
  out.z_v = parts.size() == 1 ? out.z_g : concat_cols(parts);
  return out;
}

void VisionEncoder::collect(std::vector<NamedParam>& out) {
  patch_embed.collect("vision.patch_embed", out);
  out.push_back({"vision.pos_embed", pos_embed});
  for (std::size_t i = 0; i < local.size(); ++i) {
    local[i].collect("vision.local." + std::to_string(i), out);
  }
  for (std::size_t i = 0; i < global_blocks.size(); ++i) {
    global_blocks[i].collect("vision.global." + std::to_string(i), out);
  }
}

void VisionEncoder::collect_hosts(std::vector<LoraHost>& out) {
  patch_embed.collect_hosts("vision.patch_embed", out);
  for (std::size_t i = 0; i < local.size(); ++i) {
    local[i].collect_hosts("vision.local." + std::to_string(i), out);
  }
  for (std::size_t i = 0; i < global_blocks.size(); ++i) {
    global_blocks[i].collect_hosts("vision.global." + std::to_string(i), out);
  }
}

}  // namespace ecglab
