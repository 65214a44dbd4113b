// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "ecglab/ecg.hpp"
#include "ecglab/model.hpp"

namespace ecglab {

enum class TuneMode { lora, partial, frozen, full };

std::string tune_mode_name(TuneMode mode);
TuneMode tune_mode_from(const std::string& name);

struct TrainConfig {
  double base_lr = 2e-4;
  double min_lr = 0.0;
  int epochs = 3;
  int batch_size = 4;
  int grad_accum = 1;
  TuneMode mode = TuneMode::lora;
  std::uint64_t seed = 0;
  std::string checkpoint_path = "checkpoint.ecgckpt";

  void validate() const;
};

// min_lr + 0.5 (base_lr - min_lr) (1 + cos(pi step / total_steps)).
double cosine_lr(int step, int total_steps, double base_lr, double min_lr);

// Parameter names trainable under each mode: lora = adapter factors only;
// partial = integration w_p/b_p plus every cross-attention sub-block
// parameter; frozen = nothing; full = everything.
std::vector<std::string> select_trainable(MultimodalModel& model, TuneMode mode);

// Distinct sub-block groups covered by a name set (ablation accounting).
int module_group_count(const std::vector<std::string>& names);

// ---- sample preparation ------------------------------------------------------

// [BOS, IMG] + question bytes; the IMG token marks where the visual stream
// is conceptually attached, cross-attention carries the actual signal.
TokenSequence build_prompt(const std::string& question);
TokenSequence build_training_sequence(const std::string& question, const std::string& answer);
// Next-token targets; positions whose successor is not an answer token are
// ignored (-1).
std::vector<int> answer_targets(const TokenSequence& seq);

struct TrainItem {
  Tensor patches;
  TokenSequence seq;
  std::vector<int> targets;
  int answer_tokens = 0;
};

TrainItem prepare_item(const InstructionSample& sample, const std::string& data_dir,
                       const ModelConfig& cfg);

// ---- training loop -----------------------------------------------------------

struct StepRecord {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;  // mean cross-entropy per answer token
};

struct TrainResult {
  std::vector<StepRecord> records;
  std::string checkpoint_path;
  std::string log_path;
};

// One optimizer step over the given samples: per-sample summed answer-token
// cross-entropy gradients, divided by the sample count, applied by SGD at
// lr. Returns the mean per-token loss. Rejects batches with no answer
// tokens.
double optimizer_step(MultimodalModel& model, const std::vector<const TrainItem*>& batch,
                      const std::vector<Tensor>& trainable, double lr, Rng& dropout_rng,
                      bool training_dropout);

TrainResult fit(MultimodalModel& model, const std::vector<InstructionSample>& train_set,
                const std::string& data_dir, const TrainConfig& cfg,
                const LoraConfig& lora_cfg, const std::string& config_json);

// ---- checkpoints ---------------------------------------------------------------

struct Checkpoint {
  std::string mode;
  std::string config_json;
  std::vector<NamedParam> tensors;
};

// Single file: 8-byte little-endian header length, JSON header (mode,
// config, tensor directory with byte offsets), then raw little-endian
// float64 tensor data.
void save_checkpoint(const std::string& path, const std::string& mode,
                     const std::string& config_json, const std::vector<NamedParam>& tensors);
Checkpoint load_checkpoint(const std::string& path);

// Copies checkpoint tensors over same-named model parameters.
void apply_checkpoint(MultimodalModel& model, const Checkpoint& ckpt);

}  // namespace ecglab
