// SPDX-License-Identifier: Apache-2.0
#include "ecglab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "ecglab/lora.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ecglab {

std::string tune_mode_name(TuneMode mode) {
  switch (mode) {
    case TuneMode::lora: return "lora";
    case TuneMode::partial: return "partial";
    case TuneMode::frozen: return "frozen";
    case TuneMode::full: return "full";
  }
  throw ConfigError("unknown tune mode");
}

TuneMode tune_mode_from(const std::string& name) {
  if (name == "lora") return TuneMode::lora;
  if (name == "partial") return TuneMode::partial;
  if (name == "frozen") return TuneMode::frozen;
  if (name == "full") return TuneMode::full;
  throw ConfigError("unknown tune mode: " + name);
}

void TrainConfig::validate() const {
  if (base_lr <= 0.0) throw ConfigError("train: base_lr must be positive");
  if (min_lr < 0.0 || min_lr > base_lr) throw ConfigError("train: min_lr outside [0, base_lr]");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (grad_accum < 1) throw ConfigError("train: grad_accum must be >= 1");
}

double cosine_lr(int step, int total_steps, double base_lr, double min_lr) {
  if (total_steps < 1) throw ContractError("cosine_lr: total_steps must be >= 1");
  if (step < 0 || step > total_steps) {
    throw ContractError("cosine_lr: step " + std::to_string(step) + " outside [0," +
                        std::to_string(total_steps) + "]");
  }
  return min_lr + 0.5 * (base_lr - min_lr) *
                      (1.0 + std::cos(M_PI * static_cast<double>(step) / total_steps));
}

std::vector<std::string> select_trainable(MultimodalModel& model, TuneMode mode) {
  std::vector<std::string> names;
  for (NamedParam& p : model.params()) {
    bool selected = false;
    switch (mode) {
      case TuneMode::lora:
        selected = p.name.ends_with(".lora_a") || p.name.ends_with(".lora_b");
        break;
      case TuneMode::partial:
        selected = p.name == "proj.w_p" || p.name == "proj.b_p" ||
                   p.name.find(".cross_attn.") != std::string::npos;
        break;
      case TuneMode::frozen:
        selected = false;
        break;
      case TuneMode::full:
        selected = true;
        break;
    }
    if (selected) names.push_back(p.name);
  }
  return names;
}

int module_group_count(const std::vector<std::string>& names) {
  std::set<std::string> groups;
  for (const std::string& name : names) {
    // Strip the leaf (".weight", ".gain", ".lora_a", ...) down to the
    // owning sub-block path.
    std::string group = name;
    for (const char* leaf : {".weight.lora_a", ".weight.lora_b", ".weight", ".bias",
                             ".gain", ".gate", ".lora_a", ".lora_b"}) {
      if (group.ends_with(leaf)) {
        group.resize(group.size() - std::string(leaf).size());
        break;
      }
    }
    groups.insert(group);
  }
  return static_cast<int>(groups.size());
}

TokenSequence build_prompt(const std::string& question) {
  TokenSequence seq;
  seq.push(kBosToken, Role::question);
  seq.push(kImgToken, Role::question);
  for (unsigned char c : question) {
    seq.push(static_cast<int>(c) + kByteOffset, Role::question);
  }
  return seq;
}

TokenSequence build_training_sequence(const std::string& question, const std::string& answer) {
  TokenSequence seq = build_prompt(question);
  for (unsigned char c : answer) {
    seq.push(static_cast<int>(c) + kByteOffset, Role::answer);
  }
  seq.push(kEosToken, Role::answer);
  return seq;
}

std::vector<int> answer_targets(const TokenSequence& seq) {
  const std::size_t len = seq.size();
  std::vector<int> targets(len, -1);
  for (std::size_t pos = 0; pos + 1 < len; ++pos) {
    if (seq.roles[pos + 1] == Role::answer) targets[pos] = seq.ids[pos + 1];
  }
  return targets;
}

TrainItem prepare_item(const InstructionSample& sample, const std::string& data_dir,
                       const ModelConfig& cfg) {
  TrainItem item;
  item.patches = patchify(read_pgm((fs::path(data_dir) / sample.image).string()), cfg.vision);
  item.seq = build_training_sequence(sample.question, sample.answer);
  if (static_cast<int>(item.seq.size()) > cfg.lm.max_seq) {
    throw ContractError("sample sequence length " + std::to_string(item.seq.size()) +
                        " exceeds max_seq " + std::to_string(cfg.lm.max_seq));
  }
  item.targets = answer_targets(item.seq);
  item.answer_tokens = count_non_ignored(item.targets, -1);
  return item;
}

namespace {

// Forward/backward for one sample; returns the summed answer-token
// cross-entropy. Gradients accumulate into the requires_grad leaves.
double sample_loss(MultimodalModel& model, const TrainItem& item, ForwardCtx& ctx,
                   bool with_backward) {
  GradTape tape;
  Tensor visual = model.proj.forward(
      model.vision.encode_patches(item.patches, ctx).z_v, ctx);
  Tensor logits = model.forward_logits(item.seq, visual, ctx);
  Tensor loss = cross_entropy_sum(logits, item.targets, -1);
  if (with_backward && loss.impl()->node >= 0) backward(loss);
  return loss.item();
}

}  // namespace

double optimizer_step(MultimodalModel& model, const std::vector<const TrainItem*>& batch,
                      const std::vector<Tensor>& trainable, double lr, Rng& dropout_rng,
                      bool training_dropout) {
  if (batch.empty()) throw ContractError("optimizer_step: empty batch");
  int total_answer_tokens = 0;
  for (const TrainItem* item : batch) total_answer_tokens += item->answer_tokens;
  if (total_answer_tokens == 0) {
    throw ContractError("optimizer_step: batch has no answer tokens");
  }

  for (const Tensor& p : trainable) const_cast<Tensor&>(p).zero_grad();

  ForwardCtx ctx;
  ctx.training = training_dropout;
  ctx.rng = &dropout_rng;

  double ce_total = 0.0;
  const bool update = !trainable.empty();
  for (const TrainItem* item : batch) {
    ce_total += sample_loss(model, *item, ctx, update);
  }

  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const Tensor& t : trainable) {
    Tensor& p = const_cast<Tensor&>(t);
    auto& data = p.data();
    const auto& grad = p.grad();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] -= lr * grad[i] * inv_n;
  }
  return ce_total / total_answer_tokens;
}

TrainResult fit(MultimodalModel& model, const std::vector<InstructionSample>& train_set,
                const std::string& data_dir, const TrainConfig& cfg,
                const LoraConfig& lora_cfg, const std::string& config_json) {
  cfg.validate();
  if (train_set.empty()) throw ContractError("fit: empty training set");

  if (cfg.mode == TuneMode::lora && model.adapters.empty()) {
    Rng attach_rng(mix_seed(cfg.seed, 0xA77ACB));
    attach(model, lora_cfg, attach_rng);
  }
  const std::vector<std::string> trainable_names = select_trainable(model, cfg.mode);
  std::vector<Tensor> trainable;
  {
    std::set<std::string> wanted(trainable_names.begin(), trainable_names.end());
    for (NamedParam& p : model.params()) {
      const bool on = wanted.count(p.name) > 0;
      p.tensor.set_requires_grad(on);
      if (on) trainable.push_back(p.tensor);
    }
  }

  std::vector<TrainItem> items;
  items.reserve(train_set.size());
  for (const InstructionSample& s : train_set) {
    items.push_back(prepare_item(s, data_dir, model.cfg));
  }

  const int n = static_cast<int>(items.size());
  const int micro_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int steps_per_epoch = (micro_per_epoch + cfg.grad_accum - 1) / cfg.grad_accum;
  const int total_steps = cfg.epochs * steps_per_epoch;
  const int schedule_span = std::max(total_steps - 1, 1);

  Rng dropout_rng(mix_seed(cfg.seed, 0xD20))
      ;
  TrainResult result;
  result.checkpoint_path = cfg.checkpoint_path;
  result.log_path = cfg.checkpoint_path + ".log.jsonl";
  std::ofstream log(result.log_path);
  if (!log) throw IoError("cannot open training log: " + result.log_path);

  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng perm_rng(mix_seed(cfg.seed, 0x5E00 + static_cast<std::uint64_t>(epoch)));
    perm_rng.shuffle(order);

    int cursor = 0;
    while (cursor < n) {
      std::vector<const TrainItem*> batch;
      const int span = std::min(cfg.batch_size * cfg.grad_accum, n - cursor);
      batch.reserve(static_cast<std::size_t>(span));
      for (int i = 0; i < span; ++i) {
        batch.push_back(&items[static_cast<std::size_t>(order[static_cast<std::size_t>(cursor + i)])]);
      }
      cursor += span;

      const double lr = cosine_lr(std::min(step, schedule_span), schedule_span,
                                  cfg.base_lr, cfg.min_lr);
      const double loss = optimizer_step(model, batch, trainable, lr, dropout_rng,
                                         /*training_dropout=*/true);
      json line;
      line["step"] = step;
      line["lr"] = lr;
      line["loss"] = loss;
      log << line.dump() << '\n';
      result.records.push_back({step, lr, loss});
      ++step;
    }
  }
  log.flush();

  std::vector<NamedParam> to_save;
  {
    std::set<std::string> wanted(trainable_names.begin(), trainable_names.end());
    for (NamedParam& p : model.params()) {
      if (wanted.count(p.name)) to_save.push_back(p);
    }
  }
  save_checkpoint(cfg.checkpoint_path, tune_mode_name(cfg.mode), config_json, to_save);
  return result;
}

void save_checkpoint(const std::string& path, const std::string& mode,
                     const std::string& config_json, const std::vector<NamedParam>& tensors) {
  json header;
  header["format"] = "ecglab-ckpt-1";
  header["mode"] = mode;
  header["config"] = json::parse(config_json);
  json dir = json::array();
  std::uint64_t offset = 0;
  for (const NamedParam& p : tensors) {
    json entry;
    entry["name"] = p.name;
    entry["shape"] = p.tensor.shape();
    entry["offset"] = offset;
    dir.push_back(entry);
    offset += p.tensor.numel() * sizeof(double);
  }
  header["tensors"] = dir;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  const std::string head = header.dump();
  std::uint64_t len = head.size();
  char lenbuf[8];
  for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((len >> (8 * i)) & 0xff);
  out.write(lenbuf, 8);
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const NamedParam& p : tensors) {
    out.write(reinterpret_cast<const char*>(p.tensor.data().data()),
              static_cast<std::streamsize>(p.tensor.numel() * sizeof(double)));
  }
  if (!out) throw IoError("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char lenbuf[8];
  in.read(lenbuf, 8);
  if (!in) throw IoError("truncated checkpoint header: " + path);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) {
    len |= static_cast<std::uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);
  }
  std::string head(len, '\0');
  in.read(head.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated checkpoint header: " + path);
  json header = json::parse(head);
  if (header.value("format", "") != "ecglab-ckpt-1") {
    throw IoError("unrecognized checkpoint format: " + path);
  }

  Checkpoint ckpt;
  ckpt.mode = header.at("mode").get<std::string>();
  ckpt.config_json = header.at("config").dump();
  for (const json& entry : header.at("tensors")) {
    const Shape shape = entry.at("shape").get<Shape>();
    Tensor t = Tensor::zeros(shape);
    in.read(reinterpret_cast<char*>(t.data().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!in) throw IoError("truncated checkpoint tensor data: " + path);
    ckpt.tensors.push_back({entry.at("name").get<std::string>(), t});
  }
  return ckpt;
}

void apply_checkpoint(MultimodalModel& model, const Checkpoint& ckpt) {
  std::map<std::string, Tensor> by_name;
  for (NamedParam& p : model.params()) by_name.emplace(p.name, p.tensor);
  for (const NamedParam& saved : ckpt.tensors) {
    auto it = by_name.find(saved.name);
    if (it == by_name.end()) {
      throw ContractError("checkpoint names unknown parameter " + saved.name);
    }
    if (it->second.shape() != saved.tensor.shape()) {
      throw ShapeError("checkpoint tensor " + saved.name + " has shape " +
                       shape_str(saved.tensor.shape()) + ", model expects " +
                       shape_str(it->second.shape()));
    }
    it->second.data() = saved.tensor.data();
  }
}

}  // namespace ecglab
