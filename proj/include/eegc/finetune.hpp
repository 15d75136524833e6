#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "eegc/dataset.hpp"
#include "eegc/model.hpp"
#include "eegc/tokenizer.hpp"

namespace eegc {

// Adapters on every target projection: A ~ N(0, init_std), B = 0. Throws
// std::invalid_argument on an unknown target name.
Lora attach_lora(const Weights& w, const LoraSpec& spec, std::uint64_t seed);

// W + (alpha/r)·A·B for every adapter. Marks the adapter consumed; a second
// merge throws std::logic_error.
Weights merge_lora(const Weights& w, Lora& lora);

struct TrainConfig {
  double lr{1e-5};
  double weight_decay{0.01};
  double l1_coeff{0.0};
  double l2_coeff{0.0};
  int warmup_steps{-1};  // < 0: 5% of the first stage's steps
  int epochs_per_stage{3};
  int stages{5};
  int batch_size{1};
  std::uint64_t seed{0};
  // "gradient decay": global gradient-norm clipping; <= 0 disables
  double clip_norm{1.0};
  double beta1{0.9};
  double beta2{0.999};
  double adam_eps{1e-8};

  void validate() const;
};

// Linear ramp from 0 to lr over warmup_steps, then flat.
double lr_schedule(long step, const TrainConfig& cfg);

// Adds l1·Σ|w| + l2·Σw² to the objective: accumulates its gradient
// (l1·sign(w) + 2·l2·w) into `grads` and returns the penalty.
double regularize(const std::vector<Mat*>& params, const std::vector<Mat*>& grads,
                  double l1, double l2);

// Adam with decoupled weight decay.
class Adam {
 public:
  Adam(const std::vector<Mat*>& params, const TrainConfig& cfg);
  void step(const std::vector<Mat*>& params, const std::vector<Mat*>& grads, double lr);
  long steps() const { return t_; }

 private:
  TrainConfig cfg_;
  std::vector<Mat> m_, v_;
  long t_{0};
};

// Scales grads in place so their global L2 norm is at most max_norm; returns
// the norm before clipping.
double clip_grad_norm(const std::vector<Mat*>& grads, double max_norm);

struct StageTrace {
  int stage{0};
  std::vector<double> losses;  // per optimizer step
  std::vector<double> lrs;
  double seconds{0.0};
  std::string checkpoint;  // empty when not written
};

// Writes "stage,step,loss,lr" rows.
void write_trace_csv(const std::string& path, const std::vector<StageTrace>& traces);

// Owns a model (and optionally adapters) and the optimizer state across
// stages. With adapters only A and B move; otherwise every base tensor does.
class Trainer {
 public:
  Trainer(Weights w, std::optional<Lora> lora, TrainConfig cfg);

  // One stage: epochs_per_stage shuffled passes over `data`. Writes a
  // checkpoint of the (merged) model to `ckpt_path` unless it is empty.
  // Throws std::runtime_error on a non-finite loss.
  StageTrace train_stage(std::span<const Sequence> data, int stage_idx,
                         const std::string& ckpt_path = "");

  const Weights& weights() const { return w_; }
  const std::optional<Lora>& lora() const { return lora_; }
  // Base weights with adapters folded in (a copy; the trainer keeps going).
  Weights merged() const;
  std::int64_t trainable_params() const;
  long global_step() const { return step_; }
  // Extra keys written into every checkpoint's meta (e.g. pruning_ratio).
  void set_checkpoint_meta(nlohmann::json meta) { extra_meta_ = std::move(meta); }
  // Runs after every optimizer step on the base weights (e.g. a proximal or
  // shrinkage update). Must not change tensor shapes.
  using StepHook = std::function<void(Weights&, long step)>;
  void set_post_step(StepHook f) { post_step_ = std::move(f); }

 private:
  std::vector<Mat*> params();
  std::vector<Mat*> grads();

  Weights w_;
  std::optional<Lora> lora_;
  TrainConfig cfg_;
  Gradients g_;
  std::optional<Adam> adam_;
  std::mt19937_64 rng_;
  long step_{0};
  nlohmann::json extra_meta_ = nlohmann::json::object();
  StepHook post_step_;
};

// Prompt/response sequences for the task corpus.
std::vector<Sequence> task_sequences(const Tokenizer& tok, std::span<const PromptRecord> records);
// Plain text lines: loss on every token.
std::vector<Sequence> text_sequences(const Tokenizer& tok, std::span<const std::string> lines,
                                     int max_len);
std::vector<std::string> load_text_lines(const std::string& path);

enum class Strategy { One = 1, Two = 2 };

struct StrategyConfig {
  Strategy which{Strategy::One};
  TrainConfig train;        // LoRA stages
  LoraSpec lora;
  TrainConfig general;      // strategy 2, phase 1 (full-parameter)
  int general_epochs{1};
  std::string out_dir;      // checkpoints and traces; empty: none written
  nlohmann::json checkpoint_meta = nlohmann::json::object();
};

struct StrategyResult {
  Weights final_model;  // merged
  std::vector<StageTrace> stages;
  std::optional<StageTrace> general_phase;
  std::int64_t lora_params{0};
  std::int64_t phase1_params{0};  // 0 for strategy 1
  std::vector<std::string> checkpoints;
};

// Called after every task stage with the merged model; used for per-stage
// evaluation.
using StageHook = std::function<void(int stage, const Weights& merged, const StageTrace&)>;

StrategyResult run_strategy(const Weights& pruned, std::span<const Sequence> general,
                            std::span<const Sequence> task, const StrategyConfig& cfg,
                            const StageHook& hook = {});

// ---------------------------------------------------------------------------
// Base model (what the pruner starts from)
// ---------------------------------------------------------------------------

// Records as plain language-model text: loss on every token after BOS, the
// prompt's signal values included.
std::vector<Sequence> lm_sequences(const Tokenizer& tok, std::span<const PromptRecord> records);

// Writes each value token's normalized level v/127.5 - 1 and a clipped sign
// of it into the first two embedding coordinates; other rows are untouched.
void numeric_embedding_init(Weights& w, const Tokenizer& tok);

struct PretrainConfig {
  int n_records{1800};
  std::uint64_t data_seed{1000};  // keep disjoint from task/held-out seeds
  std::uint64_t init_seed{7};
  int epochs{5};
  double lr{1e-3};
  int batch_size{8};
  CompressionConfig compression;
  // Pruning-aware training: from `shrink_from_epoch` on, every step scales
  // the units that make_plan(·, prune_ratio) would remove by (1 - shrink),
  // so the model learns to work without them. prune_ratio 0 disables.
  double prune_ratio{0.5};
  double shrink{0.01};
  int shrink_from_epoch{1};
};

using EpochHook = std::function<void(int epoch, const Weights& w, const StageTrace&)>;

// Full-parameter language-model training of a fresh model on synthetic
// records.
Weights pretrain_base(const ModelConfig& cfg, const PretrainConfig& pc, const EpochHook& hook = {});

}  // namespace eegc
