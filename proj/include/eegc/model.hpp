#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "eegc/tokenizer.hpp"

namespace eegc {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Qwen2-style decoder: RMSNorm, rotary positions, grouped-query attention with
// q/k/v bias, SwiGLU MLP, optional tied head.
struct ModelConfig {
  int vocab_size{0};
  int d_model{64};
  int n_layers{4};
  int n_heads{8};
  int n_kv_heads{2};
  int head_dim{8};
  int d_mlp{256};
  double norm_eps{1e-6};
  double rope_base{10000.0};
  int max_seq_len{512};
  bool tie_lm_head{false};
  // Softmax temperature of attention scores. 0 means 1/sqrt(head_dim); a
  // pruned model keeps the scale of the model it came from.
  double attn_scale{0.0};
  // Divisor of the RMS in every norm. 0 means d_model; a pruned model keeps
  // its source's width, so dropping an all-zero residual channel is exact.
  int rms_dim{0};

  int q_width() const { return n_heads * head_dim; }
  int kv_width() const { return n_kv_heads * head_dim; }
  double effective_attn_scale() const;
  int effective_rms_dim() const { return rms_dim > 0 ? rms_dim : d_model; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;

  // vocab from the tokenizer, everything else at the desk-scale defaults
  static ModelConfig desk(int vocab_size);
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Closed-form parameter total (embedding, per-layer attention incl. q/k/v
// bias, MLP, two norms, final norm, head unless tied). Exact integer.
std::int64_t count_params(const ModelConfig& c);

// Analytic multiply-add FLOPs (2 per MAC) of one forward pass over `seq_len`
// tokens, full attention matrix, head on every position.
double forward_flops(const ModelConfig& c, int seq_len);

struct LayerWeights {
  Mat input_norm;  // 1 x d
  Mat q_proj;      // d x q
  Mat q_bias;      // 1 x q
  Mat k_proj;      // d x kv
  Mat k_bias;
  Mat v_proj;
  Mat v_bias;
  Mat o_proj;      // q x d
  Mat post_norm;   // 1 x d
  Mat gate_proj;   // d x m
  Mat up_proj;     // d x m
  Mat down_proj;   // m x d
  // Rotary inverse frequency per (i, i + head_dim/2) pair. Not trained;
  // pruning keeps the frequencies of the surviving pairs.
  std::vector<double> rope_inv_freq;
};

struct Weights {
  ModelConfig cfg;
  Mat embed_tokens;  // V x d
  std::vector<LayerWeights> layers;
  Mat final_norm;    // 1 x d
  Mat lm_head;       // d x V, empty when tied

  static Weights zeros(const ModelConfig& cfg);
  static Weights init(const ModelConfig& cfg, std::uint64_t seed,
                      double std_dev = 0.02);

  // Trainable tensors in checkpoint order: embed_tokens, layers.<i>.<name>,
  // final_norm, lm_head.
  std::vector<std::pair<std::string, Mat*>> tensors();
  std::vector<std::pair<std::string, const Mat*>> tensors() const;
  Mat* find(const std::string& name);
  const Mat* find(const std::string& name) const;

  std::int64_t n_params() const;
  void set_zero();
  bool all_finite() const;
};

std::vector<double> default_rope_inv_freq(int head_dim, double base);

// Tensor names of the seven projections a layer owns.
inline constexpr const char* kProjNames[] = {"q_proj", "k_proj", "v_proj",
                                             "o_proj", "gate_proj", "up_proj",
                                             "down_proj"};

// ---------------------------------------------------------------------------
// LoRA
// ---------------------------------------------------------------------------

struct LoraSpec {
  int r{8};
  double alpha{32.0};
  double dropout{0.5};
  double init_std{0.02};
  std::vector<std::string> targets{"q_proj", "k_proj", "v_proj", "o_proj",
                                   "gate_proj", "up_proj", "down_proj"};
};

struct LoraPair {
  Mat A;  // in x r
  Mat B;  // r x out
};

// Adapters keyed by full tensor name ("layers.2.q_proj"). Effective weight is
// W + (alpha/r)·A·B.
struct Lora {
  LoraSpec spec;
  std::map<std::string, LoraPair> adapters;
  bool merged{false};

  double scale() const { return spec.alpha / spec.r; }
  const LoraPair* find(const std::string& name) const;
  std::int64_t n_params() const;
};

// ---------------------------------------------------------------------------
// Forward / loss / backward
// ---------------------------------------------------------------------------

// When `dropout_rng` is null LoRA dropout is disabled (inference).
struct RunOptions {
  const Lora* lora{nullptr};
  std::mt19937_64* dropout_rng{nullptr};
};

Mat forward(const Weights& w, std::span<const int> ids, const RunOptions& opt = {});
// Final-norm hidden states (T x d), i.e. the head's input.
Mat hidden_states(const Weights& w, std::span<const int> ids,
                  const RunOptions& opt = {});
// Logits of the last position only.
Eigen::RowVectorXd last_logits(const Weights& w, std::span<const int> ids,
                               const RunOptions& opt = {});

// Building blocks, exposed for property tests.
Mat rms_norm(const Mat& x, const Mat& g, double eps);
// Rotates pairs (i, i + head_dim/2) of every head of every row; row t is
// position t.
void rope_rotate(Mat& x, int head_dim, const std::vector<double>& inv_freq);
// Row-wise softmax over j <= i; entries above the diagonal become 0.
void causal_softmax(Mat& scores);

// Mean cross-entropy over rows t with mask[t] != 0, where row t of `logits`
// scores targets[t]. Throws on an empty mask.
double cross_entropy(const Mat& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> mask);

struct Gradients {
  Weights w;                              // same shapes as the model
  std::map<std::string, LoraPair> lora;   // same keys as the adapter set
  bool has_base{true};

  static Gradients like(const Weights& w, const Lora* lora, bool base);
  void set_zero();
};

// Next-token loss of one sequence: position t predicts ids[t+1], scored where
// loss_mask[t+1] is set. Returns the masked-mean loss and, when `grad` is
// given, accumulates `grad_scale` times its gradient. Base-weight gradients
// are skipped when grad->has_base is false.
double loss_and_grad(const Weights& w, const Sequence& seq, Gradients* grad,
                     double grad_scale = 1.0, const RunOptions& opt = {});

// Mean of per-sequence losses; gradient of that mean.
double batch_loss_and_grad(const Weights& w, std::span<const Sequence> batch,
                           Gradients* grad, const RunOptions& opt = {});

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct GenerationParams {
  int top_k{50};
  double temperature{1.0};
  int max_new_tokens{64};
  std::uint64_t seed{0};
  void validate() const;
};

struct GenerationResult {
  std::vector<int> ids;  // new tokens, EOS excluded
  std::string text;
  bool hit_eos{false};
  double seconds{0.0};
};

GenerationResult generate(const Weights& w, const Tokenizer& tok,
                          std::span<const int> prompt_ids,
                          const GenerationParams& params,
                          const RunOptions& opt = {});

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

// Binary container: "EEGCKPT1", u32 header length, JSON header (config, meta,
// tensor table), then every tensor as little-endian float32 in table order.
// A copy of the config is written to "<path>.json".
void save_checkpoint(const std::string& path, const Weights& w,
                     const nlohmann::json& meta = nlohmann::json::object());

struct Checkpoint {
  Weights weights;
  nlohmann::json meta;
};

Checkpoint load_checkpoint(const std::string& path);

// Rounds every tensor through float32 (what a save/load cycle does).
void round_to_float(Weights& w);

}  // namespace eegc
