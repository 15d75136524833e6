#include "eegc/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace eegc::prune {

std::string to_string(Scheme s) { return s == Scheme::Vocab ? "vocab" : "residual"; }

std::string to_string(GroupKind k) {
  switch (k) {
    case GroupKind::Vocab: return "vocab";
    case GroupKind::Residual: return "residual";
    case GroupKind::AttnHeads: return "attention";
    case GroupKind::MlpHidden: return "mlp";
  }
  return "?";
}

void DependencyMatrix::set(int a, int b, bool v) {
  F[static_cast<std::size_t>(a * n + b)] = v ? 1 : 0;
}

std::pair<int, int> DependencyMatrix::first_asymmetry() const {
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b)
      if ((*this)(a, b) != (*this)(b, a)) return {a, b};
  return {-1, -1};
}

bool DependencyMatrix::symmetric() const { return first_asymmetry().first < 0; }

Graph build_dependency_graph(const ModelConfig& cfg) {
  cfg.validate();
  Graph g;
  auto& lg = g.graph;
  lg.L = cfg.n_layers + 2;  // embedding + decoders + head (final norm folded in)
  lg.layer_names.push_back("embed_tokens");
  for (int i = 0; i < cfg.n_layers; ++i) lg.layer_names.push_back("layers." + std::to_string(i));
  lg.layer_names.push_back("lm_head");

  lg.scheme.assign(static_cast<std::size_t>(lg.n_nodes()), Scheme::Residual);
  lg.scheme[LayerGraph::in_node(0)] = Scheme::Vocab;
  lg.scheme[static_cast<std::size_t>(LayerGraph::out_node(lg.L - 1))] = Scheme::Vocab;

  auto& F = g.F;
  F.n = lg.n_nodes();
  F.F.assign(static_cast<std::size_t>(F.n * F.n), 0);
  auto link = [&](int a, int b) {
    F.set(a, b, true);
    F.set(b, a, true);
  };
  for (int a = 0; a < F.n; ++a) F.set(a, a, true);
  for (int i = 0; i < lg.L; ++i) {
    const int in = LayerGraph::in_node(i), out = LayerGraph::out_node(i);
    // a block whose input and output index the same space passes channels
    // straight through (residual skip)
    if (lg.scheme[static_cast<std::size_t>(in)] == lg.scheme[static_cast<std::size_t>(out)]) link(in, out);
    if (i + 1 < lg.L) link(out, LayerGraph::in_node(i + 1));
  }
  // token ids index both the embedding rows and the head outputs
  link(LayerGraph::in_node(0), LayerGraph::out_node(lg.L - 1));
  return g;
}

void check_invariants(const Graph& g) {
  const auto& F = g.F;
  if (F.n != g.graph.n_nodes() || F.F.size() != static_cast<std::size_t>(F.n * F.n)) {
    throw std::logic_error("dependency matrix size does not match 2L");
  }
  if (auto [a, b] = F.first_asymmetry(); a >= 0) {
    throw std::logic_error("dependency matrix not symmetric at (" + std::to_string(a) +
                           ", " + std::to_string(b) + ")");
  }
  for (int i = 0; i < g.graph.L; ++i) {
    const int in = LayerGraph::in_node(i), out = LayerGraph::out_node(i);
    const bool same = g.graph.scheme[static_cast<std::size_t>(in)] ==
                      g.graph.scheme[static_cast<std::size_t>(out)];
    if (F(in, out) != same) {
      throw std::logic_error("diagonal-block rule violated at layer " + g.graph.layer_names[static_cast<std::size_t>(i)]);
    }
  }
}

// ---------------------------------------------------------------------------
// Grouping
// ---------------------------------------------------------------------------

namespace {

std::string lname(int l, const char* t) { return "layers." + std::to_string(l) + "." + t; }

// Feature axes each coarse node stands for.
std::vector<Member> node_members(const ModelConfig& cfg, const LayerGraph& lg, int node) {
  const int layer = node / 2;
  const bool is_in = node % 2 == 0;
  if (layer == 0) {
    return {{"embed_tokens", is_in ? 0 : 1}};
  }
  if (layer == lg.L - 1) {
    if (is_in) {
      if (cfg.tie_lm_head) return {{"final_norm", 1}};
      return {{"final_norm", 1}, {"lm_head", 0}};
    }
    if (cfg.tie_lm_head) return {};
    return {{"lm_head", 1}};
  }
  const int l = layer - 1;
  if (is_in) {
    return {{lname(l, "input_norm"), 1}, {lname(l, "q_proj"), 0}, {lname(l, "k_proj"), 0},
            {lname(l, "v_proj"), 0},     {lname(l, "post_norm"), 1}, {lname(l, "gate_proj"), 0},
            {lname(l, "up_proj"), 0}};
  }
  return {{lname(l, "o_proj"), 1}, {lname(l, "down_proj"), 1}};
}

}  // namespace

std::vector<Member> feature_axes(const ModelConfig& cfg) {
  std::vector<Member> out{{"embed_tokens", 0}, {"embed_tokens", 1}};
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (const char* v : {"input_norm", "q_bias", "k_bias", "v_bias", "post_norm"})
      out.push_back({lname(l, v), 1});
    for (const char* m : kProjNames) {
      out.push_back({lname(l, m), 0});
      out.push_back({lname(l, m), 1});
    }
  }
  out.push_back({"final_norm", 1});
  if (!cfg.tie_lm_head) {
    out.push_back({"lm_head", 0});
    out.push_back({"lm_head", 1});
  }
  return out;
}

std::vector<ParamGroup> group_parameters(const ModelConfig& cfg, const Graph& g) {
  check_invariants(g);
  const auto& lg = g.graph;
  if (lg.L != cfg.n_layers + 2) throw std::invalid_argument("graph does not match config");
  const int n = g.F.n;
  for (int a = 0; a < n; ++a) {
    bool linked = false;
    for (int b = 0; b < n && !linked; ++b) linked = b != a && g.F(a, b);
    if (!linked) throw std::invalid_argument("dangling node " + std::to_string(a) + " in dependency graph");
  }

  // BFS over unvisited nodes: each component is one coarse group
  std::vector<int> comp(static_cast<std::size_t>(n), -1);
  std::vector<std::vector<int>> comps;
  for (int s = 0; s < n; ++s) {
    if (comp[static_cast<std::size_t>(s)] >= 0) continue;
    const int id = static_cast<int>(comps.size());
    comps.emplace_back();
    std::deque<int> q{s};
    comp[static_cast<std::size_t>(s)] = id;
    while (!q.empty()) {
      const int a = q.front();
      q.pop_front();
      comps.back().push_back(a);
      for (int b = 0; b < n; ++b) {
        if (g.F(a, b) && comp[static_cast<std::size_t>(b)] < 0) {
          if (lg.scheme[static_cast<std::size_t>(a)] != lg.scheme[static_cast<std::size_t>(b)]) {
            throw std::logic_error("dependency links nodes of different schemes");
          }
          comp[static_cast<std::size_t>(b)] = id;
          q.push_back(b);
        }
      }
    }
  }

  std::vector<ParamGroup> groups;
  for (Scheme want : {Scheme::Vocab, Scheme::Residual}) {
    for (auto& c : comps) {
      if (lg.scheme[static_cast<std::size_t>(c.front())] != want) continue;
      std::sort(c.begin(), c.end());
      ParamGroup pg;
      pg.kind = want == Scheme::Vocab ? GroupKind::Vocab : GroupKind::Residual;
      pg.prunable = want == Scheme::Residual;
      pg.channel_count = want == Scheme::Vocab ? cfg.vocab_size : cfg.d_model;
      for (int node : c) {
        auto m = node_members(cfg, lg, node);
        pg.members.insert(pg.members.end(), m.begin(), m.end());
      }
      groups.push_back(std::move(pg));
    }
  }

  // inside a decoder the head and hidden channels never leave the block
  for (int l = 0; l < cfg.n_layers; ++l) {
    ParamGroup at;
    at.kind = GroupKind::AttnHeads;
    at.layer = l;
    at.channel_count = cfg.q_width();
    at.members = {{lname(l, "q_proj"), 1}, {lname(l, "q_bias"), 1}, {lname(l, "k_proj"), 1},
                  {lname(l, "k_bias"), 1}, {lname(l, "v_proj"), 1}, {lname(l, "v_bias"), 1},
                  {lname(l, "o_proj"), 0}};
    groups.push_back(std::move(at));

    ParamGroup mlp;
    mlp.kind = GroupKind::MlpHidden;
    mlp.layer = l;
    mlp.channel_count = cfg.d_mlp;
    mlp.members = {{lname(l, "gate_proj"), 1}, {lname(l, "up_proj"), 1}, {lname(l, "down_proj"), 0}};
    groups.push_back(std::move(mlp));
  }
  for (std::size_t i = 0; i < groups.size(); ++i) groups[i].id = static_cast<int>(i);
  return groups;
}

namespace {

const Mat& tensor(const Weights& w, const std::string& name) {
  const Mat* t = w.find(name);
  if (!t) throw std::invalid_argument("group member " + name + " not in weights");
  return *t;
}

Eigen::VectorXd slice_norms(const Mat& t, int axis) {
  if (axis == 0) return t.rowwise().squaredNorm();
  return t.colwise().squaredNorm().transpose();
}

}  // namespace

Eigen::VectorXd channel_importance(const ParamGroup& g, const Weights& w) {
  Eigen::VectorXd imp = Eigen::VectorXd::Zero(g.channel_count);
  const auto& c = w.cfg;
  const int kv = c.kv_width(), hd = c.head_dim, per = c.n_heads / c.n_kv_heads;
  for (const auto& m : g.members) {
    const Eigen::VectorXd s = slice_norms(tensor(w, m.tensor), m.axis);
    if (s.size() == g.channel_count) {
      imp += s;
    } else if (g.kind == GroupKind::AttnHeads && s.size() == kv) {
      for (int h = 0; h < c.n_heads; ++h)
        imp.segment(h * hd, hd) += s.segment((h / per) * hd, hd) / per;
    } else {
      throw std::invalid_argument("shape mismatch: " + m.tensor + " axis " +
                                  std::to_string(m.axis) + " has " + std::to_string(s.size()) +
                                  " channels, group expects " + std::to_string(g.channel_count));
    }
  }
  return imp;
}

double group_importance(const ParamGroup& g, const Weights& w) {
  return channel_importance(g, w).sum();
}

void score_groups(std::vector<ParamGroup>& groups, const Weights& w) {
  for (auto& g : groups) g.importance = group_importance(g, w);
}

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

namespace {

void check_ratio(double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw std::invalid_argument("pruning ratio must be in [0, 1)");
}

int removed_count(int n, double ratio) {
  // tolerate products like 0.3·10 = 3.0000000000000004
  const int k = static_cast<int>(std::ceil(ratio * n - 1e-9));
  if (k >= n) {
    throw std::invalid_argument("ratio " + std::to_string(ratio) + " leaves no channels in a group of " +
                                std::to_string(n));
  }
  return std::max(k, 0);
}

// Ascending importance, lower index first on ties.
std::vector<int> rank(const std::vector<double>& v) {
  std::vector<int> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return v[static_cast<std::size_t>(a)] < v[static_cast<std::size_t>(b)]; });
  return idx;
}

}  // namespace

GroupDecision cut_channels(const Eigen::VectorXd& importance, double ratio) {
  check_ratio(ratio);
  const int n = static_cast<int>(importance.size());
  const int k = removed_count(n, ratio);
  const auto order = rank({importance.data(), importance.data() + n});
  GroupDecision d;
  std::vector<char> gone(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < k; ++i) {
    const int c = order[static_cast<std::size_t>(i)];
    gone[static_cast<std::size_t>(c)] = 1;
    d.theta = std::max(d.theta, importance(c));
  }
  for (int c = 0; c < n; ++c) (gone[static_cast<std::size_t>(c)] ? d.removed : d.keep).push_back(c);
  return d;
}

HeadChain head_chain(const ModelConfig& cfg) {
  HeadChain ch;
  HeadShape s{cfg.n_heads, cfg.head_dim};
  ch.shapes.push_back(s);
  for (;;) {
    const bool can_h = s.n_heads > cfg.n_kv_heads;
    const bool can_p = s.head_dim > 2;
    if (!can_h && !can_p) break;
    const int h_chunk = cfg.n_kv_heads * s.head_dim;
    const int p_chunk = 2 * s.n_heads;
    const bool take_h = can_h && (!can_p || h_chunk <= p_chunk);
    if (take_h) {
      s.n_heads -= cfg.n_kv_heads;
    } else {
      s.head_dim -= 2;
    }
    ch.steps.push_back(take_h ? 'h' : 'p');
    ch.shapes.push_back(s);
  }
  return ch;
}

int head_chain_prefix(const ModelConfig& cfg, double ratio) {
  check_ratio(ratio);
  const auto ch = head_chain(cfg);
  const double target = (1.0 - ratio) * cfg.q_width();
  int best = 0;
  double best_err = 1e300;
  for (std::size_t p = 0; p < ch.shapes.size(); ++p) {
    const double err = std::abs(ch.shapes[p].n_heads * ch.shapes[p].head_dim - target);
    if (err < best_err - 1e-9) {
      best_err = err;
      best = static_cast<int>(p);
    }
  }
  return best;
}

ModelConfig pruned_config(const ModelConfig& cfg, double ratio) {
  cfg.validate();
  check_ratio(ratio);
  ModelConfig t = cfg;
  t.d_model = cfg.d_model - removed_count(cfg.d_model, ratio);
  t.d_mlp = cfg.d_mlp - removed_count(cfg.d_mlp, ratio);
  const auto ch = head_chain(cfg);
  const auto s = ch.shapes[static_cast<std::size_t>(head_chain_prefix(cfg, ratio))];
  t.n_heads = s.n_heads;
  t.head_dim = s.head_dim;
  // rotary frequencies and score scale stay those of the source model
  if (t.head_dim != cfg.head_dim) t.attn_scale = cfg.effective_attn_scale();
  // and so does the RMS divisor: an all-zero channel then prunes away exactly
  if (t.d_model != cfg.d_model) t.rms_dim = cfg.effective_rms_dim();
  return t;
}

bool PruningPlan::is_identity() const {
  for (const auto& d : decisions)
    if (!d.removed.empty()) return false;
  return true;
}

namespace {

// Runs the head chain on one layer's channel importances.
GroupDecision plan_heads(const ModelConfig& cfg, const Eigen::VectorXd& imp, int prefix,
                         std::vector<int>& heads_out, std::vector<int>& pairs_out) {
  const auto ch = head_chain(cfg);
  const int hd = cfg.head_dim, half = hd / 2, per = cfg.n_heads / cfg.n_kv_heads;
  std::vector<int> heads(static_cast<std::size_t>(cfg.n_heads)), pairs(static_cast<std::size_t>(half));
  std::iota(heads.begin(), heads.end(), 0);
  std::iota(pairs.begin(), pairs.end(), 0);
  auto chan = [&](int h, int i) { return imp(h * hd + i); };
  GroupDecision d;
  for (int s = 0; s < prefix; ++s) {
    if (ch.steps[static_cast<std::size_t>(s)] == 'h') {
      for (int g = 0; g < cfg.n_kv_heads; ++g) {
        std::vector<int> cand;
        std::vector<double> score;
        for (int h : heads) {
          if (h / per != g) continue;
          double v = 0.0;
          for (int i : pairs) v += chan(h, i) + chan(h, i + half);
          cand.push_back(h);
          score.push_back(v);
        }
        const int pick = rank(score).front();
        d.theta = std::max(d.theta, score[static_cast<std::size_t>(pick)]);
        std::erase(heads, cand[static_cast<std::size_t>(pick)]);
      }
    } else {
      std::vector<double> score;
      for (int i : pairs) {
        double v = 0.0;
        for (int h : heads) v += chan(h, i) + chan(h, i + half);
        score.push_back(v);
      }
      const int pick = rank(score).front();
      d.theta = std::max(d.theta, score[static_cast<std::size_t>(pick)]);
      pairs.erase(pairs.begin() + pick);
    }
  }
  std::vector<char> kept(static_cast<std::size_t>(cfg.q_width()), 0);
  for (int h : heads)
    for (int i : pairs) {
      kept[static_cast<std::size_t>(h * hd + i)] = 1;
      kept[static_cast<std::size_t>(h * hd + i + half)] = 1;
    }
  for (int c = 0; c < cfg.q_width(); ++c) (kept[static_cast<std::size_t>(c)] ? d.keep : d.removed).push_back(c);
  heads_out = heads;
  pairs_out = pairs;
  return d;
}

}  // namespace

PruningPlan make_plan(const std::vector<ParamGroup>& groups, const Weights& w, double ratio,
                      double alpha) {
  check_ratio(ratio);
  const auto& cfg = w.cfg;
  PruningPlan p;
  p.ratio = ratio;
  p.alpha = alpha;
  p.source = cfg;
  p.target = pruned_config(cfg, ratio);
  p.heads = {p.target.n_heads, p.target.head_dim};
  p.kept_heads.resize(static_cast<std::size_t>(cfg.n_layers));
  p.kept_pairs.resize(static_cast<std::size_t>(cfg.n_layers));
  const int prefix = head_chain_prefix(cfg, ratio);

  for (const auto& g : groups) {
    if (!g.prunable) continue;
    const Eigen::VectorXd imp = channel_importance(g, w);
    GroupDecision d;
    if (g.kind == GroupKind::AttnHeads) {
      d = plan_heads(cfg, imp, prefix, p.kept_heads[static_cast<std::size_t>(g.layer)],
                     p.kept_pairs[static_cast<std::size_t>(g.layer)]);
    } else {
      d = cut_channels(imp, ratio);
    }
    d.group = g.id;
    p.decisions.push_back(std::move(d));
  }
  return p;
}

namespace {

std::vector<int> iota_vec(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

Mat take(const Mat& m, const std::vector<int>& rows, const std::vector<int>& cols) {
  Mat out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < cols.size(); ++c)
      out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = m(rows[r], cols[c]);
  return out;
}

struct Keeps {
  std::vector<int> res;
  std::vector<std::vector<int>> q, kv, mlp;
};

Keeps resolve(const PruningPlan& plan) {
  const auto& c = plan.source;
  Keeps k;
  k.res = iota_vec(c.d_model);
  const auto L = static_cast<std::size_t>(c.n_layers);
  k.q.assign(L, iota_vec(c.q_width()));
  k.kv.assign(L, iota_vec(c.kv_width()));
  k.mlp.assign(L, iota_vec(c.d_mlp));
  // decisions carry group ids from group_parameters' fixed order
  const auto groups = group_parameters(c, build_dependency_graph(c));
  for (const auto& d : plan.decisions) {
    if (d.group < 0 || d.group >= static_cast<int>(groups.size())) throw std::invalid_argument("plan names unknown group");
    const auto& g = groups[static_cast<std::size_t>(d.group)];
    if (static_cast<int>(d.keep.size() + d.removed.size()) != g.channel_count ||
        !std::is_sorted(d.keep.begin(), d.keep.end()) ||
        std::adjacent_find(d.keep.begin(), d.keep.end()) != d.keep.end() ||
        (!d.keep.empty() && (d.keep.front() < 0 || d.keep.back() >= g.channel_count))) {
      throw std::invalid_argument("plan decision for group " + std::to_string(d.group) + " is inconsistent");
    }
    const auto l = static_cast<std::size_t>(g.layer);
    switch (g.kind) {
      case GroupKind::Residual: k.res = d.keep; break;
      case GroupKind::MlpHidden: k.mlp[l] = d.keep; break;
      case GroupKind::AttnHeads: {
        k.q[l] = d.keep;
        const int hd = c.head_dim, half = hd / 2;
        const auto& pairs = plan.kept_pairs[l];
        std::vector<int> kv;
        for (int gk = 0; gk < c.n_kv_heads; ++gk) {
          for (int i : pairs) kv.push_back(gk * hd + i);
          for (int i : pairs) kv.push_back(gk * hd + half + i);
        }
        k.kv[l] = kv;
        break;
      }
      case GroupKind::Vocab: throw std::invalid_argument("vocabulary group is not prunable");
    }
  }
  const auto& t = plan.target;
  if (static_cast<int>(k.res.size()) != t.d_model) throw std::invalid_argument("plan residual width disagrees with target");
  for (std::size_t l = 0; l < L; ++l) {
    if (static_cast<int>(k.q[l].size()) != t.q_width() || static_cast<int>(k.kv[l].size()) != t.kv_width() ||
        static_cast<int>(k.mlp[l].size()) != t.d_mlp) {
      throw std::invalid_argument("plan layer " + std::to_string(l) + " widths disagree with target");
    }
  }
  return k;
}

void check_source(const Weights& w, const PruningPlan& plan) {
  if (!(w.cfg == plan.source)) throw std::invalid_argument("plan was made for a different model");
  if (plan.kept_pairs.size() != w.layers.size()) throw std::invalid_argument("plan layer count mismatch");
}

}  // namespace

Weights apply_plan(const Weights& w, const PruningPlan& plan) {
  check_source(w, plan);
  const Keeps k = resolve(plan);
  Weights out = Weights::zeros(plan.target);
  const auto one = std::vector<int>{0};
  const auto vocab = iota_vec(w.cfg.vocab_size);
  out.embed_tokens = take(w.embed_tokens, vocab, k.res);
  out.final_norm = take(w.final_norm, one, k.res);
  if (!w.cfg.tie_lm_head) out.lm_head = take(w.lm_head, k.res, vocab);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& S = w.layers[l];
    auto& D = out.layers[l];
    D.input_norm = take(S.input_norm, one, k.res);
    D.post_norm = take(S.post_norm, one, k.res);
    D.q_proj = take(S.q_proj, k.res, k.q[l]);
    D.q_bias = take(S.q_bias, one, k.q[l]);
    D.k_proj = take(S.k_proj, k.res, k.kv[l]);
    D.k_bias = take(S.k_bias, one, k.kv[l]);
    D.v_proj = take(S.v_proj, k.res, k.kv[l]);
    D.v_bias = take(S.v_bias, one, k.kv[l]);
    D.o_proj = take(S.o_proj, k.q[l], k.res);
    D.gate_proj = take(S.gate_proj, k.res, k.mlp[l]);
    D.up_proj = take(S.up_proj, k.res, k.mlp[l]);
    D.down_proj = take(S.down_proj, k.mlp[l], k.res);
    D.rope_inv_freq.clear();
    for (int i : plan.kept_pairs[l]) D.rope_inv_freq.push_back(S.rope_inv_freq[static_cast<std::size_t>(i)]);
  }
  return out;
}

Weights mask_plan(const Weights& w, const PruningPlan& plan) {
  check_source(w, plan);
  const Keeps k = resolve(plan);
  Weights out = w;
  auto dropped = [](int n, const std::vector<int>& keep) {
    std::vector<char> on(static_cast<std::size_t>(n), 0);
    for (int i : keep) on[static_cast<std::size_t>(i)] = 1;
    std::vector<int> d;
    for (int i = 0; i < n; ++i)
      if (!on[static_cast<std::size_t>(i)]) d.push_back(i);
    return d;
  };
  auto zero_cols = [](Mat& m, const std::vector<int>& c) { for (int i : c) m.col(i).setZero(); };
  auto zero_rows = [](Mat& m, const std::vector<int>& r) { for (int i : r) m.row(i).setZero(); };
  const auto& c = w.cfg;
  const auto res = dropped(c.d_model, k.res);
  zero_cols(out.embed_tokens, res);
  zero_cols(out.final_norm, res);
  if (!c.tie_lm_head) zero_rows(out.lm_head, res);
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    auto& L = out.layers[l];
    const auto q = dropped(c.q_width(), k.q[l]);
    const auto kv = dropped(c.kv_width(), k.kv[l]);
    const auto m = dropped(c.d_mlp, k.mlp[l]);
    zero_cols(L.input_norm, res);
    zero_cols(L.post_norm, res);
    for (Mat* t : {&L.q_proj, &L.k_proj, &L.v_proj, &L.gate_proj, &L.up_proj}) zero_rows(*t, res);
    zero_cols(L.o_proj, res);
    zero_cols(L.down_proj, res);
    zero_cols(L.q_proj, q);
    zero_cols(L.q_bias, q);
    zero_rows(L.o_proj, q);
    for (Mat* t : {&L.k_proj, &L.k_bias, &L.v_proj, &L.v_bias}) zero_cols(*t, kv);
    zero_cols(L.gate_proj, m);
    zero_cols(L.up_proj, m);
    zero_rows(L.down_proj, m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape planning
// ---------------------------------------------------------------------------

Breakdown breakdown(const Dims& d) {
  Breakdown b;
  b.embedding = d.vocab * d.embed;
  b.attention = d.layers * (d.embed * d.q + d.q + 2 * (d.embed * d.kv + d.kv) + d.q * d.embed);
  b.mlp = d.layers * 3 * d.embed * d.mlp;
  b.norms = d.layers * 2 * d.embed + d.embed;
  b.lm_head = d.tied ? 0 : d.embed * d.vocab;
  return b;
}

Dims dims_of(const ModelConfig& c) {
  return {c.vocab_size, c.d_model, c.q_width(), c.kv_width(), c.d_mlp, c.n_layers, c.tie_lm_head};
}

namespace {

ShapeReport report_from(const Dims& d, double ratio) {
  ShapeReport r;
  r.ratio = ratio;
  r.embed_dim = d.embed;
  r.q_proj = d.q;
  r.kv_proj = d.kv;
  r.mlp_gate_up = d.mlp;
  r.mlp_down = d.embed;  // down_proj output width is the residual width
  r.layers = d.layers;
  r.parts = breakdown(d);
  r.total_params = r.parts.total();
  return r;
}

nlohmann::json parts_json(const Breakdown& b) {
  return {{"embedding", b.embedding}, {"attention", b.attention}, {"mlp", b.mlp},
          {"norms", b.norms}, {"lm_head", b.lm_head}};
}

}  // namespace

ShapeReport shape_report(const ModelConfig& cfg, double ratio) {
  return report_from(dims_of(pruned_config(cfg, ratio)), ratio);
}

ShapeReport shape_plan(const ModelConfig& base, const Dims& row, double ratio) {
  Dims d = row;
  d.vocab = base.vocab_size;
  d.tied = base.tie_lm_head;
  if (d.embed <= 0 || d.q <= 0 || d.kv <= 0 || d.mlp <= 0 || d.layers <= 0) {
    throw std::invalid_argument("shape_plan: dims must be positive");
  }
  return report_from(d, ratio);
}

namespace {

// Attributes a total mismatch to components: which counting conventions
// would close it, and which components' natural units divide it.
nlohmann::json explain_delta(const ModelConfig& base, const Dims& row, std::int64_t delta) {
  const std::int64_t V = base.vocab_size, d = row.embed, L = row.layers, hd = base.head_dim;
  struct Alt {
    const char* name;
    const char* component;
    std::int64_t adds;
  };
  const std::vector<Alt> alts = {
      {"untied lm_head", "lm_head", V * d},
      {"no q/k/v bias", "attention", -L * (row.q + 2 * row.kv)},
      {"no norm scales", "norms", -(2 * L + 1) * d},
      {"rotary inverse-frequency buffers counted", "attention", L * (hd / 2)},
  };
  nlohmann::json conv = nlohmann::json::array();
  bool closed = false;
  for (const auto& a : alts) {
    conv.push_back({{"convention", a.name}, {"component", a.component}, {"adds", a.adds},
                    {"residual_delta", delta - a.adds}});
    closed = closed || a.adds == delta;
  }
  // natural unit of each component: one residual channel of the embedding
  // (V), one layer's attention / mlp block, one norm vector
  const Breakdown one = breakdown(Dims{row.vocab ? row.vocab : V, d, row.q, row.kv, row.mlp, 1, base.tie_lm_head});
  const std::vector<std::pair<const char*, std::int64_t>> units = {
      {"embedding (per residual channel)", V},
      {"embedding (per vocab row)", d},
      {"attention (per layer)", one.attention},
      {"mlp (per layer)", one.mlp},
      {"norms (per vector)", d}};
  nlohmann::json div = nlohmann::json::object();
  bool divisible = false;
  for (const auto& [name, u] : units) {
    const bool ok = u > 0 && delta % u == 0;
    div[name] = {{"unit", u}, {"divides_delta", ok}};
    if (ok) div[name]["units"] = delta / u;
    divisible = divisible || ok;
  }
  std::string summary;
  if (closed) summary = "closed by one alternative counting convention (see conventions)";
  else if (divisible) summary = "delta is a whole number of units of at least one component (see divisibility)";
  else summary = "no single component or counting convention accounts for the delta; the published total is not reproducible from the listed dims under any of these conventions";
  return {{"conventions", conv}, {"divisibility", div}, {"summary", summary}};
}

}  // namespace

nlohmann::json compare_row(const ModelConfig& base, const PublishedRow& row) {
  const auto rep = shape_plan(base, row.dims, row.ratio);
  const auto full = breakdown(dims_of(base));
  nlohmann::json comp = nlohmann::json::object();
  const auto p = parts_json(rep.parts), f = parts_json(full);
  for (const auto& [k, v] : p.items()) {
    comp[k] = {{"params", v}, {"base_params", f[k]}, {"delta_vs_base", v.get<std::int64_t>() - f[k].get<std::int64_t>()}};
  }
  nlohmann::json j = rep;
  j["components"] = comp;
  j["published_total"] = row.total_params;
  const std::int64_t delta = row.total_params - rep.total_params;
  j["delta_published_minus_closed_form"] = delta;
  j["matches_published"] = delta == 0;
  if (delta != 0) j["explanation"] = explain_delta(base, row.dims, delta);
  return j;
}

namespace {
nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return nlohmann::json::parse(in);
}
}  // namespace

std::vector<PublishedRow> load_table(const std::string& path) {
  std::vector<PublishedRow> rows;
  for (const auto& e : read_json(path)) {
    PublishedRow r;
    r.ratio = e.at("ratio").get<double>();
    r.dims.embed = e.at("embed").get<std::int64_t>();
    r.dims.q = e.at("q").get<std::int64_t>();
    r.dims.kv = e.at("kv").get<std::int64_t>();
    r.dims.mlp = e.at("mlp").get<std::int64_t>();
    r.dims.layers = e.at("layers").get<std::int64_t>();
    r.total_params = e.at("total_params").get<std::int64_t>();
    rows.push_back(r);
  }
  return rows;
}

ModelConfig load_config(const std::string& path) {
  auto c = read_json(path).get<ModelConfig>();
  c.validate();
  return c;
}

void to_json(nlohmann::json& j, const ShapeReport& r) {
  j = {{"ratio", r.ratio},         {"embed_dim", r.embed_dim},   {"q_proj", r.q_proj},
       {"kv_proj", r.kv_proj},     {"mlp_gate_up", r.mlp_gate_up}, {"mlp_down", r.mlp_down},
       {"layers", r.layers},       {"total_params", r.total_params},
       {"components", parts_json(r.parts)}};
}

void to_json(nlohmann::json& j, const PruningPlan& p) {
  nlohmann::json ds = nlohmann::json::array();
  for (const auto& d : p.decisions) {
    ds.push_back({{"group", d.group}, {"kept", d.keep.size()}, {"removed", d.removed.size()}, {"theta", d.theta}});
  }
  j = {{"ratio", p.ratio},
       {"alpha", p.alpha},
       {"source", p.source},
       {"target", p.target},
       {"heads", {{"n_heads", p.heads.n_heads}, {"head_dim", p.heads.head_dim}}},
       {"kept_heads", p.kept_heads},
       {"kept_pairs", p.kept_pairs},
       {"decisions", ds}};
}

PrunedModel prune_model(const Weights& w, double ratio, double alpha) {
  auto groups = group_parameters(w.cfg, build_dependency_graph(w.cfg));
  score_groups(groups, w);
  auto plan = make_plan(groups, w, ratio, alpha);
  auto pruned = apply_plan(w, plan);
  return {std::move(pruned), std::move(plan)};
}

}  // namespace eegc::prune
