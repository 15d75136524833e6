#include "eegc/finetune.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "eegc/pruner.hpp"

namespace eegc {

Lora attach_lora(const Weights& w, const LoraSpec& spec, std::uint64_t seed) {
  if (spec.r < 1) throw std::invalid_argument("LoRA rank must be >= 1");
  if (!(spec.dropout >= 0.0 && spec.dropout < 1.0)) throw std::invalid_argument("LoRA dropout must be in [0, 1)");
  for (const auto& t : spec.targets) {
    if (std::find_if(std::begin(kProjNames), std::end(kProjNames),
                     [&](const char* p) { return t == p; }) == std::end(kProjNames)) {
      throw std::invalid_argument("unknown LoRA target " + t);
    }
  }
  Lora lora;
  lora.spec = spec;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, spec.init_std);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    for (const auto& t : spec.targets) {
      const std::string name = "layers." + std::to_string(l) + "." + t;
      const Mat* W = w.find(name);
      LoraPair p;
      p.A = Mat(W->rows(), spec.r);
      for (Eigen::Index i = 0; i < p.A.size(); ++i) p.A.data()[i] = n(rng);
      p.B = Mat::Zero(spec.r, W->cols());
      lora.adapters.emplace(name, std::move(p));
    }
  }
  return lora;
}

Weights merge_lora(const Weights& w, Lora& lora) {
  if (lora.merged) throw std::logic_error("LoRA adapter already merged");
  Weights out = w;
  for (const auto& [name, p] : lora.adapters) {
    Mat* W = out.find(name);
    if (!W) throw std::invalid_argument("adapter target " + name + " not in model");
    if (p.A.rows() != W->rows() || p.B.cols() != W->cols() || p.A.cols() != p.B.rows()) {
      throw std::invalid_argument("adapter shape mismatch at " + name);
    }
    W->noalias() += lora.scale() * (p.A * p.B);
  }
  lora.merged = true;
  return out;
}

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw std::invalid_argument("lr must be >= 0");
  if (stages < 1) throw std::invalid_argument("stages must be >= 1");
  if (epochs_per_stage < 1) throw std::invalid_argument("epochs_per_stage must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (weight_decay < 0.0 || l1_coeff < 0.0 || l2_coeff < 0.0) {
    throw std::invalid_argument("regularization coefficients must be >= 0");
  }
}

double lr_schedule(long step, const TrainConfig& cfg) {
  if (step < 0) throw std::invalid_argument("step must be >= 0");
  if (cfg.warmup_steps <= 0 || step >= cfg.warmup_steps) return cfg.lr;
  return cfg.lr * static_cast<double>(step) / cfg.warmup_steps;
}

double regularize(const std::vector<Mat*>& params, const std::vector<Mat*>& grads, double l1,
                  double l2) {
  double pen = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Mat& w = *params[i];
    if (l1 > 0.0) {
      pen += l1 * w.cwiseAbs().sum();
      grads[i]->array() += l1 * w.array().sign();
    }
    if (l2 > 0.0) {
      pen += l2 * w.squaredNorm();
      grads[i]->array() += 2.0 * l2 * w.array();
    }
  }
  return pen;
}

double clip_grad_norm(const std::vector<Mat*>& grads, double max_norm) {
  double ss = 0.0;
  for (const Mat* g : grads) ss += g->squaredNorm();
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Mat* g : grads) *g *= s;
  }
  return norm;
}

Adam::Adam(const std::vector<Mat*>& params, const TrainConfig& cfg) : cfg_(cfg) {
  for (const Mat* p : params) {
    m_.push_back(Mat::Zero(p->rows(), p->cols()));
    v_.push_back(Mat::Zero(p->rows(), p->cols()));
  }
}

void Adam::step(const std::vector<Mat*>& params, const std::vector<Mat*>& grads, double lr) {
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto m = m_[i].array();
    auto v = v_[i].array();
    const auto g = grads[i]->array();
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.square();
    auto p = params[i]->array();
    if (cfg_.weight_decay > 0.0) p -= lr * cfg_.weight_decay * p;
    p -= lr * (m / c1) / ((v / c2).sqrt() + cfg_.adam_eps);
  }
}

void write_trace_csv(const std::string& path, const std::vector<StageTrace>& traces) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "stage,step,loss,lr\n";
  out.precision(10);
  for (const auto& t : traces)
    for (std::size_t i = 0; i < t.losses.size(); ++i)
      out << t.stage << ',' << i << ',' << t.losses[i] << ',' << t.lrs[i] << '\n';
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(Weights w, std::optional<Lora> lora, TrainConfig cfg)
    : w_(std::move(w)), lora_(std::move(lora)), cfg_(cfg), rng_(cfg.seed) {
  cfg_.validate();
  if (lora_ && lora_->merged) throw std::logic_error("cannot train a merged adapter");
  g_ = Gradients::like(w_, lora_ ? &*lora_ : nullptr, !lora_.has_value());
}

std::vector<Mat*> Trainer::params() {
  std::vector<Mat*> out;
  if (lora_) {
    for (auto& [_, p] : lora_->adapters) {
      out.push_back(&p.A);
      out.push_back(&p.B);
    }
  } else {
    for (auto& [_, t] : w_.tensors()) out.push_back(t);
  }
  return out;
}

std::vector<Mat*> Trainer::grads() {
  std::vector<Mat*> out;
  if (lora_) {
    for (auto& [_, p] : g_.lora) {
      out.push_back(&p.A);
      out.push_back(&p.B);
    }
  } else {
    for (auto& [_, t] : g_.w.tensors()) out.push_back(t);
  }
  return out;
}

std::int64_t Trainer::trainable_params() const {
  return lora_ ? lora_->n_params() : w_.n_params();
}

Weights Trainer::merged() const {
  if (!lora_) return w_;
  Lora copy = *lora_;
  return merge_lora(w_, copy);
}

StageTrace Trainer::train_stage(std::span<const Sequence> data, int stage_idx,
                                const std::string& ckpt_path) {
  if (data.empty()) throw std::invalid_argument("training corpus is empty");
  const auto t0 = std::chrono::steady_clock::now();
  const auto n = data.size();
  const auto bs = static_cast<std::size_t>(cfg_.batch_size);
  const long steps_per_epoch = static_cast<long>((n + bs - 1) / bs);
  if (cfg_.warmup_steps < 0) {
    cfg_.warmup_steps = static_cast<int>(std::ceil(0.05 * steps_per_epoch * cfg_.epochs_per_stage));
  }
  auto P = params();
  auto G = grads();
  if (!adam_) adam_.emplace(P, cfg_);

  StageTrace tr;
  tr.stage = stage_idx;
  std::vector<std::size_t> order(n);
  std::vector<Sequence> batch;
  RunOptions opt;
  opt.lora = lora_ ? &*lora_ : nullptr;
  opt.dropout_rng = lora_ ? &rng_ : nullptr;

  for (int e = 0; e < cfg_.epochs_per_stage; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng_);
    for (std::size_t b = 0; b < n; b += bs) {
      batch.clear();
      for (std::size_t i = b; i < std::min(n, b + bs); ++i) batch.push_back(data[order[i]]);
      g_.set_zero();
      double loss = batch_loss_and_grad(w_, batch, &g_, opt);
      loss += regularize(P, G, cfg_.l1_coeff, cfg_.l2_coeff);
      if (!std::isfinite(loss)) {
        throw std::runtime_error("training diverged: loss " + std::to_string(loss) + " at stage " +
                                 std::to_string(stage_idx) + " step " + std::to_string(step_));
      }
      clip_grad_norm(G, cfg_.clip_norm);
      const double lr = lr_schedule(step_, cfg_);
      adam_->step(P, G, lr);
      if (post_step_) post_step_(w_, step_);
      tr.losses.push_back(loss);
      tr.lrs.push_back(lr);
      ++step_;
    }
  }
  if (!ckpt_path.empty()) {
    nlohmann::json meta = extra_meta_;
    meta["stage"] = stage_idx;
    meta["lora"] = lora_.has_value();
    meta["steps"] = step_;
    save_checkpoint(ckpt_path, merged(), meta);
    tr.checkpoint = ckpt_path;
  }
  tr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return tr;
}

// ---------------------------------------------------------------------------
// Corpora
// ---------------------------------------------------------------------------

std::vector<Sequence> task_sequences(const Tokenizer& tok, std::span<const PromptRecord> records) {
  std::vector<Sequence> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(make_sequence(tok, r.prompt, r.response()));
  return out;
}

std::vector<Sequence> text_sequences(const Tokenizer& tok, std::span<const std::string> lines,
                                     int max_len) {
  if (max_len < 3) throw std::invalid_argument("max_len must be >= 3");
  std::vector<Sequence> out;
  for (const auto& line : lines) {
    if (line.empty()) continue;
    Sequence s;
    s.ids.push_back(Tokenizer::kBos);
    for (int id : tok.encode(line)) s.ids.push_back(id);
    s.ids.push_back(Tokenizer::kEos);
    if (s.ids.size() > static_cast<std::size_t>(max_len)) s.ids.resize(static_cast<std::size_t>(max_len));
    s.loss_mask.assign(s.ids.size(), 1);
    s.loss_mask[0] = 0;
    s.prompt_len = 1;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::string> load_text_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) lines.push_back(line);
  return lines;
}

// ---------------------------------------------------------------------------
// Strategies
// ---------------------------------------------------------------------------

StrategyResult run_strategy(const Weights& pruned, std::span<const Sequence> general,
                            std::span<const Sequence> task, const StrategyConfig& cfg,
                            const StageHook& hook) {
  cfg.train.validate();
  if (task.empty()) throw std::invalid_argument("task corpus is empty");
  if (cfg.which == Strategy::Two && general.empty()) {
    throw std::invalid_argument("strategy 2 needs a non-empty general corpus");
  }
  namespace fs = std::filesystem;
  if (!cfg.out_dir.empty()) fs::create_directories(cfg.out_dir);
  auto path = [&](const std::string& f) { return cfg.out_dir.empty() ? std::string() : (fs::path(cfg.out_dir) / f).string(); };

  StrategyResult res;
  Weights base = pruned;
  if (cfg.which == Strategy::Two) {
    TrainConfig g = cfg.general;
    g.epochs_per_stage = cfg.general_epochs;
    g.stages = 1;
    Trainer full(base, std::nullopt, g);
    full.set_checkpoint_meta(cfg.checkpoint_meta);
    res.phase1_params = full.trainable_params();
    res.general_phase = full.train_stage(general, 0, path("general.bin"));
    base = full.weights();
  }

  Trainer t(base, attach_lora(base, cfg.lora, cfg.train.seed ^ 0x10a7), cfg.train);
  t.set_checkpoint_meta(cfg.checkpoint_meta);
  res.lora_params = t.trainable_params();
  for (int s = 1; s <= cfg.train.stages; ++s) {
    const auto ck = path("checkpoint" + std::to_string(s) + ".bin");
    auto tr = t.train_stage(task, s, ck);
    if (!ck.empty()) res.checkpoints.push_back(ck);
    if (hook) hook(s, t.merged(), tr);
    res.stages.push_back(std::move(tr));
  }
  res.final_model = t.merged();
  if (!cfg.out_dir.empty()) {
    std::vector<StageTrace> all;
    if (res.general_phase) all.push_back(*res.general_phase);
    all.insert(all.end(), res.stages.begin(), res.stages.end());
    write_trace_csv(path("loss_trace.csv"), all);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Base model
// ---------------------------------------------------------------------------

std::vector<Sequence> lm_sequences(const Tokenizer& tok, std::span<const PromptRecord> records) {
  auto out = task_sequences(tok, records);
  for (auto& s : out) {
    std::fill(s.loss_mask.begin(), s.loss_mask.end(), std::uint8_t{1});
    s.loss_mask[0] = 0;
  }
  return out;
}

void numeric_embedding_init(Weights& w, const Tokenizer& tok) {
  if (w.cfg.d_model < 2) throw std::invalid_argument("numeric init needs d_model >= 2");
  for (int v = 0; v < 256; ++v) {
    const int id = tok.find(" " + std::to_string(v));
    if (id < 0) throw std::logic_error("tokenizer lacks value token " + std::to_string(v));
    const double x = v / 127.5 - 1.0;
    w.embed_tokens(id, 0) = x;
    w.embed_tokens(id, 1) = std::clamp(4.0 * x, -1.0, 1.0);
  }
}

Weights pretrain_base(const ModelConfig& cfg, const PretrainConfig& pc, const EpochHook& hook) {
  if (pc.n_records < 1 || pc.epochs < 1) throw std::invalid_argument("pretrain: empty schedule");
  const auto& tok = Tokenizer::instance();
  SynthConfig sc;
  sc.n_subjects = pc.n_records;
  sc.seed = pc.data_seed;
  const auto data = lm_sequences(tok, build_corpus(synth_generate(sc), pc.compression));
  Weights w = Weights::init(cfg, pc.init_seed);
  numeric_embedding_init(w, tok);
  TrainConfig tc;
  tc.lr = pc.lr;
  tc.batch_size = pc.batch_size;
  tc.weight_decay = 0.0;
  tc.epochs_per_stage = 1;
  tc.warmup_steps = 50;
  tc.seed = pc.init_seed;
  Trainer t(std::move(w), std::nullopt, tc);

  bool shrinking = false;
  if (pc.prune_ratio > 0.0) {
    if (!(pc.shrink > 0.0 && pc.shrink < 1.0)) throw std::invalid_argument("pretrain: shrink must be in (0, 1)");
    const auto groups = prune::group_parameters(cfg, prune::build_dependency_graph(cfg));
    t.set_post_step([&shrinking, groups, pc](Weights& cur, long) {
      if (!shrinking) return;
      // w <- w - s·(w - masked(w)): only the units the plan would drop move
      const Weights masked = prune::mask_plan(cur, prune::make_plan(groups, cur, pc.prune_ratio));
      auto dst = cur.tensors();
      const auto src = masked.tensors();
      for (std::size_t i = 0; i < dst.size(); ++i)
        *dst[i].second -= pc.shrink * (*dst[i].second - *src[i].second);
    });
  }
  for (int e = 0; e < pc.epochs; ++e) {
    shrinking = pc.prune_ratio > 0.0 && e >= pc.shrink_from_epoch;
    const auto tr = t.train_stage(data, e);
    if (hook) hook(e, t.weights(), tr);
  }
  return t.weights();
}

}  // namespace eegc
