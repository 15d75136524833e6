#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "eegc/model.hpp"

namespace eegc::prune {

// Scheme id of a feature node: which index space its channels live in.
enum class Scheme { Vocab, Residual };

std::string to_string(Scheme s);

// Layer-level graph. Layers are embedding, each decoder block, lm_head (the
// final norm rides with the head). Node 2i is layer i's input feature, node
// 2i+1 its output feature.
struct LayerGraph {
  int L{0};
  std::vector<std::string> layer_names;
  std::vector<Scheme> scheme;  // size 2L

  static int in_node(int layer) { return 2 * layer; }
  static int out_node(int layer) { return 2 * layer + 1; }
  int n_nodes() const { return 2 * L; }
};

struct DependencyMatrix {
  int n{0};
  std::vector<std::uint8_t> F;  // n x n, row-major

  bool operator()(int a, int b) const { return F[static_cast<std::size_t>(a * n + b)] != 0; }
  void set(int a, int b, bool v);
  bool symmetric() const;
  // First (a, b) with F[a][b] != F[b][a]; {-1, -1} when symmetric.
  std::pair<int, int> first_asymmetry() const;
};

struct Graph {
  LayerGraph graph;
  DependencyMatrix F;
};

Graph build_dependency_graph(const ModelConfig& cfg);

// Throws std::logic_error when F is not symmetric or the diagonal-block rule
// is violated.
void check_invariants(const Graph& g);

// ---------------------------------------------------------------------------
// Grouping
// ---------------------------------------------------------------------------

enum class GroupKind { Vocab, Residual, AttnHeads, MlpHidden };

std::string to_string(GroupKind k);

// A tensor axis; vectors (norm scales, biases) are stored 1 x n and only
// their axis 1 is a feature axis.
struct Member {
  std::string tensor;
  int axis{0};
  auto operator<=>(const Member&) const = default;
};

struct ParamGroup {
  int id{0};
  GroupKind kind{GroupKind::Residual};
  int layer{-1};  // decoder index for per-layer groups
  std::vector<Member> members;
  int channel_count{0};
  double importance{0.0};
  bool prunable{true};
};

// Connected components of the feature-axis graph, seeded from the layer
// graph. Ordered: vocab, residual, then (attention, mlp) per layer.
std::vector<ParamGroup> group_parameters(const ModelConfig& cfg, const Graph& g);

// All feature axes of a model of this shape.
std::vector<Member> feature_axes(const ModelConfig& cfg);

// Per-channel sum of squared weights over the group's member slices. For
// attention groups the channel space is the q width; each kv channel's mass
// is split evenly over the q heads that share it, so the channel values
// still sum to the group's total.
Eigen::VectorXd channel_importance(const ParamGroup& g, const Weights& w);
double group_importance(const ParamGroup& g, const Weights& w);
// Fills ParamGroup::importance.
void score_groups(std::vector<ParamGroup>& groups, const Weights& w);

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

struct HeadShape {
  int n_heads{0};
  int head_dim{0};
  bool operator==(const HeadShape&) const = default;
};

// Head layout after removing `ratio` of the q width. Removal proceeds along
// a fixed chain: each step drops either one q head per kv group or one
// rotary pair from every head, whichever frees fewer channels (heads on a
// tie); the prefix whose kept width is closest to (1-ratio)·q wins, shorter
// prefix on a tie. Because the chain does not depend on the ratio, removal
// sets nest as the ratio grows.
struct HeadChain {
  std::vector<char> steps;  // 'h' or 'p'
  std::vector<HeadShape> shapes;  // shapes[i] after i steps
};
HeadChain head_chain(const ModelConfig& cfg);
int head_chain_prefix(const ModelConfig& cfg, double ratio);

struct GroupDecision {
  int group{0};
  std::vector<int> keep;     // strictly increasing channel indices
  std::vector<int> removed;  // increasing
  double theta{0.0};         // largest importance among removed units
};

struct PruningPlan {
  double ratio{0.0};
  double alpha{0.0};  // contraction strength: carried, not used
  ModelConfig source;
  ModelConfig target;
  HeadShape heads;
  std::vector<GroupDecision> decisions;  // prunable groups only
  // kept heads and kept rotary pair indices per decoder layer
  std::vector<std::vector<int>> kept_heads;
  std::vector<std::vector<int>> kept_pairs;

  bool is_identity() const;
};

PruningPlan make_plan(const std::vector<ParamGroup>& groups, const Weights& w,
                      double ratio, double alpha = 0.0);

// Ratio-only plan on bare channel importances: removes the lowest
// ⌈ratio·n⌉ (lower index first on ties).
GroupDecision cut_channels(const Eigen::VectorXd& importance, double ratio);

// Physically shrinks every tensor. The result's config keeps the source
// attention scale.
Weights apply_plan(const Weights& w, const PruningPlan& plan);

struct PrunedModel {
  Weights weights;
  PruningPlan plan;
};

// Graph -> groups -> L2 importance -> plan -> physical slicing.
PrunedModel prune_model(const Weights& w, double ratio, double alpha = 0.0);

// Zeroes removed channels in place of removing them (test oracle helper;
// also used by reports).
Weights mask_plan(const Weights& w, const PruningPlan& plan);

// ---------------------------------------------------------------------------
// Shape planning without weights
// ---------------------------------------------------------------------------

struct Dims {
  std::int64_t vocab{0};
  std::int64_t embed{0};
  std::int64_t q{0};
  std::int64_t kv{0};
  std::int64_t mlp{0};
  std::int64_t layers{0};
  bool tied{false};
};

struct Breakdown {
  std::int64_t embedding{0};
  std::int64_t attention{0};
  std::int64_t mlp{0};
  std::int64_t norms{0};
  std::int64_t lm_head{0};
  std::int64_t total() const { return embedding + attention + mlp + norms + lm_head; }
};

Breakdown breakdown(const Dims& d);
Dims dims_of(const ModelConfig& c);

struct ShapeReport {
  double ratio{0.0};
  std::int64_t embed_dim{0};
  std::int64_t q_proj{0};
  std::int64_t kv_proj{0};
  std::int64_t mlp_gate_up{0};
  std::int64_t mlp_down{0};
  std::int64_t layers{0};
  std::int64_t total_params{0};
  Breakdown parts;
};

// Shape after pruning `cfg` at `ratio` (same rules as make_plan).
ModelConfig pruned_config(const ModelConfig& cfg, double ratio);
ShapeReport shape_report(const ModelConfig& cfg, double ratio);
// Evaluates the closed form on explicit primed dims (e.g. a published row).
ShapeReport shape_plan(const ModelConfig& base, const Dims& row, double ratio);

struct PublishedRow {
  double ratio{0.0};  // 0 for the unpruned row
  Dims dims;
  std::int64_t total_params{0};
};

// Report plus per-component deltas against the base model and the total's
// delta against the published figure.
nlohmann::json compare_row(const ModelConfig& base, const PublishedRow& row);

// Table file: array of {ratio, embed, q, kv, mlp, layers, total_params}.
std::vector<PublishedRow> load_table(const std::string& path);
ModelConfig load_config(const std::string& path);

void to_json(nlohmann::json& j, const ShapeReport& r);
void to_json(nlohmann::json& j, const PruningPlan& p);

}  // namespace eegc::prune
