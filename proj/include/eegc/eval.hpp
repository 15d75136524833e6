#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "eegc/dataset.hpp"
#include "eegc/emotion.hpp"
#include "eegc/model.hpp"

namespace eegc {

// First case-insensitive occurrence of any emotion name; earliest start
// wins, the longer name on a shared start.
std::optional<Emotion> parse_emotion(std::string_view text);

struct F1Result {
  double macro{0.0};
  std::map<std::string, double> per_class;
};

// Per-class F1 (0 when a denominator is empty), unweighted mean. A pred not
// in `classes` (e.g. "" for unparseable) is wrong for every class.
F1Result macro_f1(std::span<const std::string> preds, std::span<const std::string> golds,
                  std::span<const std::string> classes);

// BLEU over whitespace tokens: clipped n-gram precision (add-one smoothing
// for n >= 2), geometric mean, brevity penalty against the closest
// reference length (shorter on a tie). Empty candidate scores 0.
double bleu(std::string_view candidate, std::span<const std::string> references, int max_n = 4);

// Mean wall-clock seconds of generating from each prompt.
double time_generation(const Weights& w, const Tokenizer& tok,
                       std::span<const std::vector<int>> prompts, const GenerationParams& params);

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

struct ClusterReport {
  int k{0};
  std::vector<int> assignments;
  double inertia{0.0};
  Mat centroids;                     // k x dim
  Mat projection;                    // n x 2 (PCA)
  std::vector<double> inertia_trace;  // after every Lloyd iteration
  int iterations{0};
};

// k-means++ seeding (one uniform draw per pick, inverse-CDF over D²
// weights), then Lloyd iterations until the relative inertia change drops
// below tol or max_iter. Empty clusters keep their previous centroid.
ClusterReport kmeans(const Mat& X, int k, std::uint64_t seed, int max_iter = 300,
                     double tol = 1e-6);

// Rows projected onto the top two principal components; each component's
// sign is fixed so its largest-magnitude loading is positive.
Mat pca_2d(const Mat& X);

// Mean over tokens of the final-norm hidden states.
Eigen::RowVectorXd embed_text(const Weights& w, const Tokenizer& tok, std::string_view text);

ClusterReport embed_and_cluster(const Weights& w, const Tokenizer& tok,
                                std::span<const std::string> texts, int k = 9,
                                std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

enum class Task { nine, three };

Task task_from_string(std::string_view s);
std::string to_string(Task t);
std::vector<std::string> task_classes(Task t);
// Label string of an emotion under the task ("" for none).
std::string task_label(std::optional<Emotion> e, Task t);

struct Prediction {
  std::optional<Emotion> emotion;
  std::string text;
  double seconds{0.0};
};

// Generates a response for every record's prompt.
std::vector<Prediction> predict(const Weights& w, const Tokenizer& tok,
                                std::span<const PromptRecord> records,
                                const GenerationParams& params);

struct EvalReport {
  Task task{Task::nine};
  double macro_f1{0.0};
  std::map<std::string, double> per_class_f1;
  int n_samples{0};
  int unparsed{0};
  double avg_rt_seconds{0.0};
  int top_k{0};
  double bleu{0.0};  // mean treatment BLEU against the record's template
};

EvalReport score(std::span<const PromptRecord> gold, std::span<const Prediction> preds, Task task,
                 int top_k);

// Uniform-random labels over the task's classes.
F1Result random_baseline(std::span<const PromptRecord> gold, Task task, std::uint64_t seed);

void to_json(nlohmann::json& j, const EvalReport& r);
void to_json(nlohmann::json& j, const ClusterReport& r);

}  // namespace eegc
