#include "eegc/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace eegc {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

double ModelConfig::effective_attn_scale() const {
  return attn_scale > 0.0 ? attn_scale : 1.0 / std::sqrt(static_cast<double>(head_dim));
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("ModelConfig: ") + what);
  };
  need(vocab_size > 0, "vocab_size must be positive");
  need(d_model > 0, "d_model must be positive");
  need(n_layers >= 0, "n_layers must be non-negative");
  need(n_heads > 0 && n_kv_heads > 0, "head counts must be positive");
  need(n_heads % n_kv_heads == 0, "n_heads must be divisible by n_kv_heads");
  need(head_dim > 0 && head_dim % 2 == 0, "head_dim must be positive and even");
  need(d_mlp > 0, "d_mlp must be positive");
  need(norm_eps > 0.0, "norm_eps must be positive");
  need(rope_base > 0.0, "rope_base must be positive");
  need(max_seq_len > 0, "max_seq_len must be positive");
  need(attn_scale >= 0.0, "attn_scale must be non-negative");
  need(rms_dim >= 0, "rms_dim must be non-negative");
}

ModelConfig ModelConfig::desk(int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
       {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
       {"n_kv_heads", c.n_kv_heads}, {"head_dim", c.head_dim},
       {"d_mlp", c.d_mlp},           {"norm_eps", c.norm_eps},
       {"rope_base", c.rope_base},   {"max_seq_len", c.max_seq_len},
       {"tie_lm_head", c.tie_lm_head}, {"attn_scale", c.attn_scale},
       {"rms_dim", c.rms_dim}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.n_kv_heads = j.at("n_kv_heads").get<int>();
  c.head_dim = j.at("head_dim").get<int>();
  c.d_mlp = j.at("d_mlp").get<int>();
  c.norm_eps = j.value("norm_eps", 1e-6);
  c.rope_base = j.value("rope_base", 10000.0);
  c.max_seq_len = j.value("max_seq_len", 512);
  c.tie_lm_head = j.value("tie_lm_head", false);
  c.attn_scale = j.value("attn_scale", 0.0);
  c.rms_dim = j.value("rms_dim", 0);
}

std::int64_t count_params(const ModelConfig& c) {
  const std::int64_t V = c.vocab_size, d = c.d_model, q = c.q_width(),
                     kv = c.kv_width(), m = c.d_mlp;
  const std::int64_t attn = d * q + q + 2 * (d * kv + kv) + q * d;
  const std::int64_t mlp = 3 * d * m;
  const std::int64_t per_layer = attn + mlp + 2 * d;
  std::int64_t total = V * d + c.n_layers * per_layer + d;
  if (!c.tie_lm_head) total += d * V;
  return total;
}

double forward_flops(const ModelConfig& c, int seq_len) {
  const double T = seq_len, d = c.d_model, q = c.q_width(), kv = c.kv_width(),
               m = c.d_mlp, V = c.vocab_size;
  const double proj = d * q + 2 * d * kv + q * d + 3 * d * m;
  const double attn = 2.0 * T * T * q;  // scores + weighted sum
  return c.n_layers * (2.0 * T * proj + 2.0 * attn) + 2.0 * T * d * V;
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

std::vector<double> default_rope_inv_freq(int head_dim, double base) {
  std::vector<double> f(static_cast<std::size_t>(head_dim / 2));
  for (std::size_t i = 0; i < f.size(); ++i) {
    f[i] = std::pow(base, -2.0 * static_cast<double>(i) / head_dim);
  }
  return f;
}

Weights Weights::zeros(const ModelConfig& cfg) {
  cfg.validate();
  Weights w;
  w.cfg = cfg;
  const int d = cfg.d_model, q = cfg.q_width(), kv = cfg.kv_width(), m = cfg.d_mlp;
  w.embed_tokens = Mat::Zero(cfg.vocab_size, d);
  w.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& L : w.layers) {
    L.input_norm = Mat::Zero(1, d);
    L.q_proj = Mat::Zero(d, q);
    L.q_bias = Mat::Zero(1, q);
    L.k_proj = Mat::Zero(d, kv);
    L.k_bias = Mat::Zero(1, kv);
    L.v_proj = Mat::Zero(d, kv);
    L.v_bias = Mat::Zero(1, kv);
    L.o_proj = Mat::Zero(q, d);
    L.post_norm = Mat::Zero(1, d);
    L.gate_proj = Mat::Zero(d, m);
    L.up_proj = Mat::Zero(d, m);
    L.down_proj = Mat::Zero(m, d);
    L.rope_inv_freq = default_rope_inv_freq(cfg.head_dim, cfg.rope_base);
  }
  w.final_norm = Mat::Zero(1, d);
  if (!cfg.tie_lm_head) w.lm_head = Mat::Zero(d, cfg.vocab_size);
  return w;
}

Weights Weights::init(const ModelConfig& cfg, std::uint64_t seed, double std_dev) {
  Weights w = zeros(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, std_dev);
  const double out_scale = 1.0 / std::sqrt(2.0 * std::max(1, cfg.n_layers));
  for (auto& [name, t] : w.tensors()) {
    const bool is_norm = name.ends_with("norm");
    const bool is_bias = name.ends_with("bias");
    const bool is_out = name.ends_with("o_proj") || name.ends_with("down_proj");
    for (Eigen::Index i = 0; i < t->size(); ++i) {
      double v = 0.0;
      if (is_norm) {
        v = 1.0;
      } else if (!is_bias) {
        v = nd(rng) * (is_out ? out_scale : 1.0);
      }
      t->data()[i] = v;
    }
  }
  return w;
}

namespace {

template <typename W, typename Out>
void collect(W& w, Out& out) {
  out.emplace_back("embed_tokens", &w.embed_tokens);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    auto& L = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    out.emplace_back(p + "input_norm", &L.input_norm);
    out.emplace_back(p + "q_proj", &L.q_proj);
    out.emplace_back(p + "q_bias", &L.q_bias);
    out.emplace_back(p + "k_proj", &L.k_proj);
    out.emplace_back(p + "k_bias", &L.k_bias);
    out.emplace_back(p + "v_proj", &L.v_proj);
    out.emplace_back(p + "v_bias", &L.v_bias);
    out.emplace_back(p + "o_proj", &L.o_proj);
    out.emplace_back(p + "post_norm", &L.post_norm);
    out.emplace_back(p + "gate_proj", &L.gate_proj);
    out.emplace_back(p + "up_proj", &L.up_proj);
    out.emplace_back(p + "down_proj", &L.down_proj);
  }
  out.emplace_back("final_norm", &w.final_norm);
  if (!w.cfg.tie_lm_head) out.emplace_back("lm_head", &w.lm_head);
}

}  // namespace

std::vector<std::pair<std::string, Mat*>> Weights::tensors() {
  std::vector<std::pair<std::string, Mat*>> out;
  collect(*this, out);
  return out;
}

std::vector<std::pair<std::string, const Mat*>> Weights::tensors() const {
  std::vector<std::pair<std::string, const Mat*>> out;
  collect(*this, out);
  return out;
}

Mat* Weights::find(const std::string& name) {
  for (auto& [n, t] : tensors())
    if (n == name) return t;
  return nullptr;
}

const Mat* Weights::find(const std::string& name) const {
  for (const auto& [n, t] : tensors())
    if (n == name) return t;
  return nullptr;
}

std::int64_t Weights::n_params() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : tensors()) n += t->size();
  return n;
}

void Weights::set_zero() {
  for (auto& [name, t] : tensors()) t->setZero();
}

bool Weights::all_finite() const {
  for (const auto& [name, t] : tensors())
    if (!t->allFinite()) return false;
  return true;
}

const LoraPair* Lora::find(const std::string& name) const {
  const auto it = adapters.find(name);
  return it == adapters.end() ? nullptr : &it->second;
}

std::int64_t Lora::n_params() const {
  std::int64_t n = 0;
  for (const auto& [name, p] : adapters) n += p.A.size() + p.B.size();
  return n;
}

Gradients Gradients::like(const Weights& w, const Lora* lora, bool base) {
  Gradients g;
  g.has_base = base;
  if (base) {
    g.w = Weights::zeros(w.cfg);
    // zeros() derives shapes from the config; copy exact shapes in case a
    // caller hands in something unusual.
    auto dst = g.w.tensors();
    const auto src = w.tensors();
    for (std::size_t i = 0; i < dst.size(); ++i)
      *dst[i].second = Mat::Zero(src[i].second->rows(), src[i].second->cols());
  }
  if (lora) {
    for (const auto& [name, p] : lora->adapters) {
      g.lora[name] = {Mat::Zero(p.A.rows(), p.A.cols()), Mat::Zero(p.B.rows(), p.B.cols())};
    }
  }
  return g;
}

void Gradients::set_zero() {
  if (has_base) w.set_zero();
  for (auto& [name, p] : lora) {
    p.A.setZero();
    p.B.setZero();
  }
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

namespace {

enum Proj { kQ, kK, kV, kO, kGate, kUp, kDown, kNumProj };

struct LinearCache {
  Mat mask;  // dropout multipliers (empty: no dropout)
  Mat u;     // dropped input
  Mat z;     // u·A
};

struct LayerCache {
  Mat x_in;
  Eigen::VectorXd r1;
  Mat a;
  Mat q, k, v;  // q, k after rotation
  std::vector<Mat> P;
  Mat att;
  Mat x_mid;
  Eigen::VectorXd r2;
  Mat b;
  Mat gate, up, h;
  LinearCache lin[kNumProj];
  Mat cos, sin;
};

struct Cache {
  std::vector<LayerCache> layers;
  Mat x_final;
  Eigen::VectorXd rf;
  Mat n;
};

struct LayerLora {
  const LoraPair* p[kNumProj] = {};
};

std::vector<LayerLora> resolve_lora(const Weights& w, const Lora* lora) {
  std::vector<LayerLora> out(w.layers.size());
  if (!lora) return out;
  if (lora->merged) throw std::logic_error("LoRA adapter already merged");
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    for (int k = 0; k < kNumProj; ++k) out[i].p[k] = lora->find(p + kProjNames[k]);
  }
  return out;
}

Mat dropout_mask(Eigen::Index rows, Eigen::Index cols, double p,
                 std::mt19937_64& rng) {
  Mat m(rows, cols);
  const double keep = 1.0 / (1.0 - p);
  // 16 bits of resolution per draw, four draws per 64-bit word
  const auto threshold = static_cast<std::uint32_t>(std::llround(p * 65536.0));
  std::uint64_t word = 0;
  int left = 0;
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    if (left == 0) {
      word = rng();
      left = 4;
    }
    const auto r = static_cast<std::uint32_t>(word & 0xFFFFu);
    word >>= 16;
    --left;
    m.data()[i] = r < threshold ? 0.0 : keep;
  }
  return m;
}

Mat linear_fwd(const Mat& x, const Mat& W, const Mat* bias, const LoraPair* lp,
               double s, double p_drop, std::mt19937_64* rng, LinearCache* c) {
  Mat y = x * W;
  if (bias) y.rowwise() += bias->row(0);
  if (lp) {
    Mat mask;
    Mat u;
    if (rng && p_drop > 0.0) {
      mask = dropout_mask(x.rows(), x.cols(), p_drop, *rng);
      u = x.cwiseProduct(mask);
    } else {
      u = x;
    }
    Mat z = u * lp->A;
    y.noalias() += s * (z * lp->B);
    if (c) {
      c->mask = std::move(mask);
      c->u = std::move(u);
      c->z = std::move(z);
    }
  }
  return y;
}

// dx = dy·Wᵀ (+ LoRA path); accumulates parameter gradients where requested.
Mat linear_bwd(const Mat& x, const Mat& dy, const Mat& W, const LoraPair* lp,
               double s, const LinearCache& c, Mat* dW, Mat* dbias,
               LoraPair* dlp) {
  Mat dx = dy * W.transpose();
  if (dW) dW->noalias() += x.transpose() * dy;
  if (dbias) *dbias += dy.colwise().sum();
  if (lp) {
    Mat dz = s * (dy * lp->B.transpose());
    if (dlp) {
      dlp->B.noalias() += s * (c.z.transpose() * dy);
      dlp->A.noalias() += c.u.transpose() * dz;
    }
    Mat du = dz * lp->A.transpose();
    if (c.mask.size() > 0) du = du.cwiseProduct(c.mask);
    dx += du;
  }
  return dx;
}

// rms_dim <= 0: the row width.
Mat rms_fwd(const Mat& x, const Mat& g, double eps, Eigen::VectorXd* r_out, int rms_dim = 0) {
  const double inv_d = 1.0 / static_cast<double>(rms_dim > 0 ? rms_dim : x.cols());
  Eigen::VectorXd r(x.rows());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    r(t) = 1.0 / std::sqrt(x.row(t).squaredNorm() * inv_d + eps);
  }
  Mat y = (x.array().colwise() * r.array()).rowwise() * g.row(0).array();
  if (r_out) *r_out = std::move(r);
  return y;
}

Mat rms_bwd(const Mat& x, const Eigen::VectorXd& r, const Mat& g, const Mat& dy,
            Mat* dg, int rms_dim = 0) {
  const double inv_d = 1.0 / static_cast<double>(rms_dim > 0 ? rms_dim : x.cols());
  if (dg) {
    *dg += (dy.array() * (x.array().colwise() * r.array())).colwise().sum().matrix();
  }
  Mat gdy = dy.array().rowwise() * g.row(0).array();
  Mat dx(x.rows(), x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const double rt = r(t);
    const double dot = gdy.row(t).dot(x.row(t));
    dx.row(t) = rt * gdy.row(t) - (rt * rt * rt * inv_d * dot) * x.row(t);
  }
  return dx;
}

void rope_tables(const std::vector<double>& inv_freq, Eigen::Index T, Mat& cos,
                 Mat& sin, Eigen::Index first = 0) {
  const auto half = static_cast<Eigen::Index>(inv_freq.size());
  cos.resize(T, half);
  sin.resize(T, half);
  for (Eigen::Index t = 0; t < T; ++t) {
    for (Eigen::Index i = 0; i < half; ++i) {
      const double ang = static_cast<double>(first + t) * inv_freq[static_cast<std::size_t>(i)];
      cos(t, i) = std::cos(ang);
      sin(t, i) = std::sin(ang);
    }
  }
}

// Rotates pairs (i, i + hd/2) of every head in place; sign = -1 applies the
// inverse rotation (used by the backward pass).
void rope_apply(Mat& x, int head_dim, const Mat& cos, const Mat& sin, double sign) {
  const int half = head_dim / 2;
  const auto n_heads = x.cols() / head_dim;
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    for (Eigen::Index h = 0; h < n_heads; ++h) {
      double* v = x.row(t).data() + h * head_dim;
      for (int i = 0; i < half; ++i) {
        const double c = cos(t, i), s = sign * sin(t, i);
        const double a = v[i], b = v[i + half];
        v[i] = a * c - b * s;
        v[i + half] = a * s + b * c;
      }
    }
  }
}

const Mat& head_matrix(const Weights& w, Mat& scratch) {
  if (!w.cfg.tie_lm_head) return w.lm_head;
  scratch = w.embed_tokens.transpose();
  return scratch;
}

// Runs the decoder stack; returns final-norm hidden states.
Mat run(const Weights& w, std::span<const int> ids, const RunOptions& opt,
        Cache* cache) {
  const auto& cfg = w.cfg;
  const auto T = static_cast<Eigen::Index>(ids.size());
  if (T == 0) throw std::invalid_argument("forward: empty input");
  if (T > cfg.max_seq_len) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(T) +
                                " exceeds max_seq_len " +
                                std::to_string(cfg.max_seq_len));
  }
  const auto lora = resolve_lora(w, opt.lora);
  const double s = opt.lora ? opt.lora->scale() : 0.0;
  const double p_drop = opt.lora ? opt.lora->spec.dropout : 0.0;

  Mat x(T, cfg.d_model);
  for (Eigen::Index t = 0; t < T; ++t) {
    const int id = ids[static_cast<std::size_t>(t)];
    if (id < 0 || id >= cfg.vocab_size) {
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
    }
    x.row(t) = w.embed_tokens.row(id);
  }
  if (cache) cache->layers.resize(w.layers.size());

  const int hd = cfg.head_dim;
  const int group = cfg.n_heads / cfg.n_kv_heads;
  const double scale = cfg.effective_attn_scale();

  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& L = w.layers[l];
    LayerCache local;
    LayerCache& c = cache ? cache->layers[l] : local;
    const auto& lp = lora[l].p;
    LinearCache* lc = cache ? c.lin : nullptr;
    auto lin = [&](int k) { return lc ? &lc[k] : nullptr; };

    c.x_in = x;
    c.a = rms_fwd(x, L.input_norm, cfg.norm_eps, &c.r1, cfg.effective_rms_dim());
    c.q = linear_fwd(c.a, L.q_proj, &L.q_bias, lp[kQ], s, p_drop, opt.dropout_rng, lin(kQ));
    c.k = linear_fwd(c.a, L.k_proj, &L.k_bias, lp[kK], s, p_drop, opt.dropout_rng, lin(kK));
    c.v = linear_fwd(c.a, L.v_proj, &L.v_bias, lp[kV], s, p_drop, opt.dropout_rng, lin(kV));
    rope_tables(L.rope_inv_freq, T, c.cos, c.sin);
    rope_apply(c.q, hd, c.cos, c.sin, 1.0);
    rope_apply(c.k, hd, c.cos, c.sin, 1.0);

    c.att.resize(T, cfg.q_width());
    c.P.resize(static_cast<std::size_t>(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) {
      const int g = h / group;
      Mat S = scale * (c.q.middleCols(h * hd, hd) * c.k.middleCols(g * hd, hd).transpose());
      causal_softmax(S);
      c.att.middleCols(h * hd, hd).noalias() = S * c.v.middleCols(g * hd, hd);
      c.P[static_cast<std::size_t>(h)] = std::move(S);
    }
    x += linear_fwd(c.att, L.o_proj, nullptr, lp[kO], s, p_drop, opt.dropout_rng, lin(kO));

    c.x_mid = x;
    c.b = rms_fwd(x, L.post_norm, cfg.norm_eps, &c.r2, cfg.effective_rms_dim());
    c.gate = linear_fwd(c.b, L.gate_proj, nullptr, lp[kGate], s, p_drop, opt.dropout_rng, lin(kGate));
    c.up = linear_fwd(c.b, L.up_proj, nullptr, lp[kUp], s, p_drop, opt.dropout_rng, lin(kUp));
    c.h = (c.gate.array() / (1.0 + (-c.gate.array()).exp()) * c.up.array()).matrix();
    x += linear_fwd(c.h, L.down_proj, nullptr, lp[kDown], s, p_drop, opt.dropout_rng, lin(kDown));
  }

  Eigen::VectorXd rf;
  Mat n = rms_fwd(x, w.final_norm, cfg.norm_eps, &rf, cfg.effective_rms_dim());
  if (cache) {
    cache->x_final = std::move(x);
    cache->rf = std::move(rf);
    cache->n = n;
  }
  return n;
}


// Key/value rows of every position seen so far, per layer (keys rotated).
struct KvCache {
  std::vector<Mat> k, v;
  Eigen::Index len{0};
};

// Runs `ids` at positions kv.len.. against the cache and appends their keys
// and values; returns the final-norm hidden state of the last new position.
// Inference only: no dropout, no gradient cache.
Eigen::RowVectorXd run_incremental(const Weights& w, std::span<const int> ids,
                                   const Lora* lora_set, KvCache& kv) {
  const auto& cfg = w.cfg;
  const auto Tn = static_cast<Eigen::Index>(ids.size());
  const Eigen::Index P = kv.len;
  if (P + Tn > cfg.max_seq_len) throw std::invalid_argument("generation exceeds max_seq_len");
  const auto lora = resolve_lora(w, lora_set);
  const double s = lora_set ? lora_set->scale() : 0.0;
  if (kv.k.empty()) {
    kv.k.assign(w.layers.size(), Mat(0, cfg.kv_width()));
    kv.v.assign(w.layers.size(), Mat(0, cfg.kv_width()));
  }
  Mat x(Tn, cfg.d_model);
  for (Eigen::Index t = 0; t < Tn; ++t) {
    const int id = ids[static_cast<std::size_t>(t)];
    if (id < 0 || id >= cfg.vocab_size) {
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
    }
    x.row(t) = w.embed_tokens.row(id);
  }
  const int hd = cfg.head_dim;
  const int group = cfg.n_heads / cfg.n_kv_heads;
  const double scale = cfg.effective_attn_scale();
  Mat cos, sin;
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& L = w.layers[l];
    const auto& lp = lora[l].p;
    const Mat a = rms_fwd(x, L.input_norm, cfg.norm_eps, nullptr, cfg.effective_rms_dim());
    Mat q = linear_fwd(a, L.q_proj, &L.q_bias, lp[kQ], s, 0.0, nullptr, nullptr);
    Mat k = linear_fwd(a, L.k_proj, &L.k_bias, lp[kK], s, 0.0, nullptr, nullptr);
    Mat v = linear_fwd(a, L.v_proj, &L.v_bias, lp[kV], s, 0.0, nullptr, nullptr);
    rope_tables(L.rope_inv_freq, Tn, cos, sin, P);
    rope_apply(q, hd, cos, sin, 1.0);
    rope_apply(k, hd, cos, sin, 1.0);
    Mat& K = kv.k[l];
    Mat& V = kv.v[l];
    K.conservativeResize(P + Tn, Eigen::NoChange);
    V.conservativeResize(P + Tn, Eigen::NoChange);
    K.bottomRows(Tn) = k;
    V.bottomRows(Tn) = v;

    Mat att(Tn, cfg.q_width());
    for (int h = 0; h < cfg.n_heads; ++h) {
      const int g = h / group;
      Mat S = scale * (q.middleCols(h * hd, hd) * K.middleCols(g * hd, hd).transpose());
      for (Eigen::Index i = 0; i < Tn; ++i) {
        auto seg = S.row(i).head(P + i + 1).array();
        const double mx = seg.maxCoeff();
        seg = (seg - mx).exp();
        seg /= seg.sum();
        if (P + i + 1 < S.cols()) S.row(i).tail(S.cols() - P - i - 1).setZero();
      }
      att.middleCols(h * hd, hd).noalias() = S * V.middleCols(g * hd, hd);
    }
    x += linear_fwd(att, L.o_proj, nullptr, lp[kO], s, 0.0, nullptr, nullptr);
    const Mat b = rms_fwd(x, L.post_norm, cfg.norm_eps, nullptr, cfg.effective_rms_dim());
    const Mat gate = linear_fwd(b, L.gate_proj, nullptr, lp[kGate], s, 0.0, nullptr, nullptr);
    const Mat up = linear_fwd(b, L.up_proj, nullptr, lp[kUp], s, 0.0, nullptr, nullptr);
    const Mat h = (gate.array() / (1.0 + (-gate.array()).exp()) * up.array()).matrix();
    x += linear_fwd(h, L.down_proj, nullptr, lp[kDown], s, 0.0, nullptr, nullptr);
  }
  kv.len = P + Tn;
  const Mat last = x.bottomRows(1);
  return rms_fwd(last, w.final_norm, cfg.norm_eps, nullptr, cfg.effective_rms_dim()).row(0);
}

}  // namespace

Mat rms_norm(const Mat& x, const Mat& g, double eps) {
  return rms_fwd(x, g, eps, nullptr);
}

void rope_rotate(Mat& x, int head_dim, const std::vector<double>& inv_freq) {
  if (static_cast<int>(inv_freq.size()) * 2 != head_dim || x.cols() % head_dim != 0) {
    throw std::invalid_argument("rope_rotate: shape mismatch");
  }
  Mat c, s;
  rope_tables(inv_freq, x.rows(), c, s);
  rope_apply(x, head_dim, c, s, 1.0);
}

void causal_softmax(Mat& S) {
  const Eigen::Index T = S.rows();
  for (Eigen::Index i = 0; i < T; ++i) {
    auto seg = S.row(i).head(std::min(i + 1, S.cols())).array();
    const double mx = seg.maxCoeff();
    seg = (seg - mx).exp();
    seg /= seg.sum();
    if (i + 1 < S.cols()) S.row(i).tail(S.cols() - i - 1).setZero();
  }
}

Mat hidden_states(const Weights& w, std::span<const int> ids, const RunOptions& opt) {
  return run(w, ids, opt, nullptr);
}

Mat forward(const Weights& w, std::span<const int> ids, const RunOptions& opt) {
  const Mat n = run(w, ids, opt, nullptr);
  Mat scratch;
  return n * head_matrix(w, scratch);
}

Eigen::RowVectorXd last_logits(const Weights& w, std::span<const int> ids,
                               const RunOptions& opt) {
  const Mat n = run(w, ids, opt, nullptr);
  if (w.cfg.tie_lm_head) return n.row(n.rows() - 1) * w.embed_tokens.transpose();
  return n.row(n.rows() - 1) * w.lm_head;
}

double cross_entropy(const Mat& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> mask) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size() ||
      targets.size() != mask.size()) {
    throw std::invalid_argument("cross_entropy: shape mismatch");
  }
  double total = 0.0;
  int n = 0;
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    if (!mask[static_cast<std::size_t>(t)]) continue;
    const auto row = logits.row(t);
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    total += lse - row(targets[static_cast<std::size_t>(t)]);
    ++n;
  }
  if (n == 0) throw std::invalid_argument("cross_entropy: empty mask");
  return total / n;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

double loss_and_grad(const Weights& w, const Sequence& seq, Gradients* grad,
                     double grad_scale, const RunOptions& opt) {
  const auto& cfg = w.cfg;
  if (seq.ids.size() != seq.loss_mask.size()) {
    throw std::invalid_argument("sequence ids/mask length mismatch");
  }
  std::vector<Eigen::Index> rows;
  for (std::size_t t = 0; t + 1 < seq.ids.size(); ++t)
    if (seq.loss_mask[t + 1]) rows.push_back(static_cast<Eigen::Index>(t));
  if (rows.empty()) throw std::invalid_argument("loss: empty mask");

  Cache cache;
  const Mat n = run(w, seq.ids, opt, grad ? &cache : nullptr);
  Mat scratch;
  const Mat& head = head_matrix(w, scratch);

  const auto R = static_cast<Eigen::Index>(rows.size());
  Mat n_sel(R, cfg.d_model);
  for (Eigen::Index i = 0; i < R; ++i) n_sel.row(i) = n.row(rows[static_cast<std::size_t>(i)]);
  Mat logits = n_sel * head;

  double loss = 0.0;
  Mat dlogits(R, cfg.vocab_size);
  for (Eigen::Index i = 0; i < R; ++i) {
    const int target = seq.ids[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)] + 1)];
    auto row = logits.row(i);
    const double mx = row.maxCoeff();
    auto e = (row.array() - mx).exp();
    const double sum = e.sum();
    loss += mx + std::log(sum) - row(target);
    dlogits.row(i) = e / sum;
    dlogits(i, target) -= 1.0;
  }
  loss /= static_cast<double>(R);
  if (!std::isfinite(loss)) throw std::runtime_error("non-finite loss");
  if (!grad) return loss;

  const bool base = grad->has_base;
  Weights& G = grad->w;
  dlogits *= grad_scale / static_cast<double>(R);

  // head
  Mat dn_sel = dlogits * head.transpose();
  if (base) {
    if (cfg.tie_lm_head) {
      G.embed_tokens.noalias() += dlogits.transpose() * n_sel;
    } else {
      G.lm_head.noalias() += n_sel.transpose() * dlogits;
    }
  }
  const auto T = static_cast<Eigen::Index>(seq.ids.size());
  Mat dn = Mat::Zero(T, cfg.d_model);
  for (Eigen::Index i = 0; i < R; ++i) dn.row(rows[static_cast<std::size_t>(i)]) = dn_sel.row(i);

  Mat dx = rms_bwd(cache.x_final, cache.rf, w.final_norm, dn, base ? &G.final_norm : nullptr, cfg.effective_rms_dim());

  const auto lora = resolve_lora(w, opt.lora);
  const double s = opt.lora ? opt.lora->scale() : 0.0;
  const int hd = cfg.head_dim;
  const int group = cfg.n_heads / cfg.n_kv_heads;
  const double scale = cfg.effective_attn_scale();

  for (std::size_t li = w.layers.size(); li-- > 0;) {
    const auto& L = w.layers[li];
    auto& c = cache.layers[li];
    const auto& lp = lora[li].p;
    LayerWeights* GL = base ? &G.layers[li] : nullptr;
    const std::string pre = "layers." + std::to_string(li) + ".";
    auto dl = [&](int k) -> LoraPair* {
      if (!lp[k]) return nullptr;
      auto it = grad->lora.find(pre + kProjNames[k]);
      return it == grad->lora.end() ? nullptr : &it->second;
    };

    // MLP
    Mat dh = linear_bwd(c.h, dx, L.down_proj, lp[kDown], s, c.lin[kDown],
                        GL ? &GL->down_proj : nullptr, nullptr, dl(kDown));
    const auto z = c.gate.array();
    const Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> sig =
        1.0 / (1.0 + (-z).exp());
    const Mat dup = (dh.array() * z * sig).matrix();
    const Mat dgate = (dh.array() * c.up.array() * sig * (1.0 + z * (1.0 - sig))).matrix();
    Mat db = linear_bwd(c.b, dgate, L.gate_proj, lp[kGate], s, c.lin[kGate],
                        GL ? &GL->gate_proj : nullptr, nullptr, dl(kGate));
    db += linear_bwd(c.b, dup, L.up_proj, lp[kUp], s, c.lin[kUp],
                     GL ? &GL->up_proj : nullptr, nullptr, dl(kUp));
    dx += rms_bwd(c.x_mid, c.r2, L.post_norm, db, GL ? &GL->post_norm : nullptr, cfg.effective_rms_dim());

    // attention
    Mat datt = linear_bwd(c.att, dx, L.o_proj, lp[kO], s, c.lin[kO],
                          GL ? &GL->o_proj : nullptr, nullptr, dl(kO));
    Mat dq = Mat::Zero(T, cfg.q_width());
    Mat dk = Mat::Zero(T, cfg.kv_width());
    Mat dv = Mat::Zero(T, cfg.kv_width());
    for (int h = 0; h < cfg.n_heads; ++h) {
      const int g = h / group;
      const Mat& P = c.P[static_cast<std::size_t>(h)];
      const auto dO = datt.middleCols(h * hd, hd);
      dv.middleCols(g * hd, hd).noalias() += P.transpose() * dO;
      Mat dP = dO * c.v.middleCols(g * hd, hd).transpose();
      // softmax backward, row-wise; masked entries have P = 0
      for (Eigen::Index i = 0; i < T; ++i) {
        auto p = P.row(i).head(i + 1).array();
        auto d = dP.row(i).head(i + 1).array();
        const double dot = (p * d).sum();
        d = p * (d - dot);
        if (i + 1 < T) dP.row(i).tail(T - i - 1).setZero();
      }
      dq.middleCols(h * hd, hd).noalias() += scale * (dP * c.k.middleCols(g * hd, hd));
      dk.middleCols(g * hd, hd).noalias() += scale * (dP.transpose() * c.q.middleCols(h * hd, hd));
    }
    rope_apply(dq, hd, c.cos, c.sin, -1.0);
    rope_apply(dk, hd, c.cos, c.sin, -1.0);

    Mat da = linear_bwd(c.a, dq, L.q_proj, lp[kQ], s, c.lin[kQ],
                        GL ? &GL->q_proj : nullptr, GL ? &GL->q_bias : nullptr, dl(kQ));
    da += linear_bwd(c.a, dk, L.k_proj, lp[kK], s, c.lin[kK],
                     GL ? &GL->k_proj : nullptr, GL ? &GL->k_bias : nullptr, dl(kK));
    da += linear_bwd(c.a, dv, L.v_proj, lp[kV], s, c.lin[kV],
                     GL ? &GL->v_proj : nullptr, GL ? &GL->v_bias : nullptr, dl(kV));
    dx += rms_bwd(c.x_in, c.r1, L.input_norm, da, GL ? &GL->input_norm : nullptr, cfg.effective_rms_dim());
  }

  if (base) {
    for (Eigen::Index t = 0; t < T; ++t) {
      G.embed_tokens.row(seq.ids[static_cast<std::size_t>(t)]) += dx.row(t);
    }
  }
  return loss;
}

double batch_loss_and_grad(const Weights& w, std::span<const Sequence> batch,
                           Gradients* grad, const RunOptions& opt) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& s : batch) total += loss_and_grad(w, s, grad, inv, opt);
  return total * inv;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

void GenerationParams::validate() const {
  if (top_k < 1) throw std::invalid_argument("top_k must be >= 1");
  if (max_new_tokens < 1) throw std::invalid_argument("max_new_tokens must be >= 1");
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
}

GenerationResult generate(const Weights& w, const Tokenizer& tok,
                          std::span<const int> prompt_ids,
                          const GenerationParams& params, const RunOptions& opt) {
  params.validate();
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(params.seed);
  std::vector<int> ctx(prompt_ids.begin(), prompt_ids.end());
  GenerationResult out;
  const RunOptions infer{opt.lora, nullptr};

  std::vector<int> order(static_cast<std::size_t>(w.cfg.vocab_size));
  if (ctx.empty()) throw std::invalid_argument("generate: empty prompt");
  KvCache kv;
  Mat scratch;
  const Mat& head = head_matrix(w, scratch);
  Eigen::RowVectorXd hidden;
  for (int step = 0; step < params.max_new_tokens; ++step) {
    if (static_cast<int>(ctx.size()) >= w.cfg.max_seq_len) break;
    hidden = step == 0 ? run_incremental(w, ctx, infer.lora, kv)
                       : run_incremental(w, std::span<const int>(&ctx.back(), 1), infer.lora, kv);
    const Eigen::RowVectorXd logits = hidden * head;
    int next = 0;
    if (params.top_k == 1) {
      // first maximal index on ties
      for (int i = 1; i < logits.size(); ++i)
        if (logits(i) > logits(next)) next = i;
    } else {
      std::iota(order.begin(), order.end(), 0);
      const auto k = std::min<std::size_t>(static_cast<std::size_t>(params.top_k), order.size());
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                        [&](int a, int b) {
                          return logits(a) > logits(b) || (logits(a) == logits(b) && a < b);
                        });
      const double mx = logits(order[0]);
      std::vector<double> p(k);
      double sum = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        p[i] = std::exp((logits(order[i]) - mx) / params.temperature);
        sum += p[i];
      }
      double u = std::uniform_real_distribution<double>(0.0, sum)(rng);
      next = order[k - 1];
      for (std::size_t i = 0; i < k; ++i) {
        if (u < p[i]) {
          next = order[i];
          break;
        }
        u -= p[i];
      }
    }
    if (next == Tokenizer::kEos) {
      out.hit_eos = true;
      break;
    }
    out.ids.push_back(next);
    ctx.push_back(next);
  }
  out.text = tok.decode(out.ids);
  out.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace eegc
