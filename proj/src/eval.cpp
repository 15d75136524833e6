#include "eegc/eval.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace eegc {

std::optional<Emotion> parse_emotion(std::string_view text) {
  std::string low(text);
  for (auto& c : low) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  std::optional<Emotion> best;
  std::size_t best_pos = std::string::npos, best_len = 0;
  for (Emotion e : kAllEmotions) {
    const auto name = to_string(e);
    const auto pos = low.find(name);
    if (pos == std::string::npos) continue;
    if (pos < best_pos || (pos == best_pos && name.size() > best_len)) {
      best = e;
      best_pos = pos;
      best_len = name.size();
    }
  }
  return best;
}

F1Result macro_f1(std::span<const std::string> preds, std::span<const std::string> golds,
                  std::span<const std::string> classes) {
  if (preds.size() != golds.size()) throw std::invalid_argument("macro_f1: length mismatch");
  if (preds.empty()) throw std::invalid_argument("macro_f1: no samples");
  if (classes.empty()) throw std::invalid_argument("macro_f1: no classes");
  F1Result r;
  for (const auto& c : classes) {
    long tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const bool p = preds[i] == c, g = golds[i] == c;
      tp += p && g;
      fp += p && !g;
      fn += !p && g;
    }
    const double prec = tp + fp ? static_cast<double>(tp) / (tp + fp) : 0.0;
    const double rec = tp + fn ? static_cast<double>(tp) / (tp + fn) : 0.0;
    const double f1 = prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    r.per_class[c] = f1;
    r.macro += f1;
  }
  r.macro /= static_cast<double>(classes.size());
  return r;
}

namespace {

std::vector<std::string> words(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in{std::string(s)};
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::map<std::vector<std::string>, int> ngrams(const std::vector<std::string>& t, int n) {
  std::map<std::vector<std::string>, int> out;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= t.size(); ++i)
    ++out[std::vector<std::string>(t.begin() + static_cast<long>(i), t.begin() + static_cast<long>(i) + n)];
  return out;
}

}  // namespace

double bleu(std::string_view candidate, std::span<const std::string> references, int max_n) {
  if (references.empty()) throw std::invalid_argument("bleu: no references");
  if (max_n < 1) throw std::invalid_argument("bleu: max_n must be >= 1");
  const auto cand = words(candidate);
  if (cand.empty()) return 0.0;
  std::vector<std::vector<std::string>> refs;
  for (const auto& r : references) refs.push_back(words(r));

  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    const auto cn = ngrams(cand, n);
    std::map<std::vector<std::string>, int> max_ref;
    for (const auto& r : refs)
      for (const auto& [g, c] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], c);
    long match = 0, total = 0;
    for (const auto& [g, c] : cn) {
      total += c;
      const auto it = max_ref.find(g);
      if (it != max_ref.end()) match += std::min(c, it->second);
    }
    double p;
    if (n == 1) {
      if (match == 0) return 0.0;
      p = static_cast<double>(match) / static_cast<double>(total);
    } else {
      p = static_cast<double>(match + 1) / static_cast<double>(total + 1);
    }
    log_sum += std::log(p) / max_n;
  }
  const auto c = static_cast<long>(cand.size());
  long r = -1;
  for (const auto& ref : refs) {
    const auto len = static_cast<long>(ref.size());
    if (r < 0 || std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) r = len;
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
  return bp * std::exp(log_sum);
}

double time_generation(const Weights& w, const Tokenizer& tok,
                       std::span<const std::vector<int>> prompts, const GenerationParams& params) {
  if (prompts.empty()) throw std::invalid_argument("time_generation: no prompts");
  double total = 0.0;
  for (const auto& p : prompts) {
    const auto t0 = std::chrono::steady_clock::now();
    generate(w, tok, p, params);
    total += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return total / static_cast<double>(prompts.size());
}

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

namespace {

// Index whose cumulative weight first exceeds u·total.
Eigen::Index inverse_cdf(const Eigen::VectorXd& weight, double u) {
  const double target = u * weight.sum();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < weight.size(); ++i) {
    acc += weight(i);
    if (acc > target) return i;
  }
  for (Eigen::Index i = weight.size() - 1; i >= 0; --i)
    if (weight(i) > 0.0) return i;
  return weight.size() - 1;
}

double assign(const Mat& X, const Mat& C, std::vector<int>& a) {
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    double best = 1e300;
    int arg = 0;
    for (Eigen::Index j = 0; j < C.rows(); ++j) {
      const double d = (X.row(i) - C.row(j)).squaredNorm();
      if (d < best) {
        best = d;
        arg = static_cast<int>(j);
      }
    }
    a[static_cast<std::size_t>(i)] = arg;
    inertia += best;
  }
  return inertia;
}

}  // namespace

ClusterReport kmeans(const Mat& X, int k, std::uint64_t seed, int max_iter, double tol) {
  const Eigen::Index n = X.rows();
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  if (n < k) throw std::invalid_argument("k-means needs at least k points (" + std::to_string(n) + " < " + std::to_string(k) + ")");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  Mat C(k, X.cols());
  Eigen::VectorXd d2 = Eigen::VectorXd::Ones(n);
  for (int j = 0; j < k; ++j) {
    const Eigen::Index pick = inverse_cdf(d2, uni(rng));
    C.row(j) = X.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = (X.row(i) - C.row(j)).squaredNorm();
      d2(i) = j == 0 ? d : std::min(d2(i), d);
    }
    // all remaining mass on duplicates of chosen centers: fall back to uniform
    if (d2.sum() == 0.0) d2.setOnes();
  }

  ClusterReport r;
  r.k = k;
  r.assignments.assign(static_cast<std::size_t>(n), 0);
  double prev = assign(X, C, r.assignments);
  for (int it = 0; it < max_iter; ++it) {
    Mat sum = Mat::Zero(k, X.cols());
    std::vector<int> count(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int a = r.assignments[static_cast<std::size_t>(i)];
      sum.row(a) += X.row(i);
      ++count[static_cast<std::size_t>(a)];
    }
    for (int j = 0; j < k; ++j)
      if (count[static_cast<std::size_t>(j)] > 0) C.row(j) = sum.row(j) / count[static_cast<std::size_t>(j)];
    const double cur = assign(X, C, r.assignments);
    if (cur > prev * (1.0 + 1e-12) + 1e-300) {
      throw std::logic_error("k-means inertia increased");
    }
    r.inertia_trace.push_back(cur);
    r.iterations = it + 1;
    const double rel = prev > 0.0 ? (prev - cur) / prev : 0.0;
    prev = cur;
    if (rel < tol) break;
  }
  r.inertia = prev;
  r.centroids = C;
  r.projection = pca_2d(X);
  return r;
}

Mat pca_2d(const Mat& X) {
  const Eigen::Index n = X.rows();
  Mat out = Mat::Zero(n, 2);
  if (n == 0) return out;
  const Eigen::RowVectorXd mean = X.colwise().mean();
  const Eigen::MatrixXd Z = X.rowwise() - mean;
  const Eigen::MatrixXd cov = Z.transpose() * Z;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Eigen::Index d = X.cols();
  for (int c = 0; c < 2 && c < d; ++c) {
    Eigen::VectorXd v = es.eigenvectors().col(d - 1 - c);  // eigenvalues ascend
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    out.col(c) = Z * v;
  }
  return out;
}

Eigen::RowVectorXd embed_text(const Weights& w, const Tokenizer& tok, std::string_view text) {
  std::vector<int> ids{Tokenizer::kBos};
  for (int id : tok.encode(text)) ids.push_back(id);
  if (ids.size() > static_cast<std::size_t>(w.cfg.max_seq_len)) ids.resize(static_cast<std::size_t>(w.cfg.max_seq_len));
  return hidden_states(w, ids).colwise().mean();
}

ClusterReport embed_and_cluster(const Weights& w, const Tokenizer& tok,
                                std::span<const std::string> texts, int k, std::uint64_t seed) {
  if (static_cast<int>(texts.size()) < k) {
    throw std::invalid_argument("embed_and_cluster: fewer texts than clusters");
  }
  Mat X(static_cast<Eigen::Index>(texts.size()), w.cfg.d_model);
  for (std::size_t i = 0; i < texts.size(); ++i) X.row(static_cast<Eigen::Index>(i)) = embed_text(w, tok, texts[i]);
  return kmeans(X, k, seed);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

Task task_from_string(std::string_view s) {
  if (s == "nine") return Task::nine;
  if (s == "three") return Task::three;
  throw std::invalid_argument("task must be nine or three");
}

std::string to_string(Task t) { return t == Task::nine ? "nine" : "three"; }

std::vector<std::string> task_classes(Task t) {
  std::vector<std::string> out;
  if (t == Task::nine) {
    for (Emotion e : kAllEmotions) out.emplace_back(to_string(e));
  } else {
    for (Valence v : kAllValences) out.emplace_back(to_string(v));
  }
  return out;
}

std::string task_label(std::optional<Emotion> e, Task t) {
  if (!e) return "";
  return std::string(t == Task::nine ? to_string(*e) : to_string(coarse_label(*e)));
}

std::vector<Prediction> predict(const Weights& w, const Tokenizer& tok,
                                std::span<const PromptRecord> records,
                                const GenerationParams& params) {
  std::vector<Prediction> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    GenerationParams p = params;
    p.seed = params.seed + i;
    const auto g = generate(w, tok, make_prompt_ids(tok, records[i].prompt), p);
    out.push_back({parse_emotion(g.text), g.text, g.seconds});
  }
  return out;
}

namespace {

std::string treatment_of(const std::string& text) {
  const auto pos = text.find("Treatment:");
  return pos == std::string::npos ? text : text.substr(pos + 10);
}

}  // namespace

EvalReport score(std::span<const PromptRecord> gold, std::span<const Prediction> preds, Task task,
                 int top_k) {
  if (gold.size() != preds.size()) throw std::invalid_argument("score: length mismatch");
  std::vector<std::string> p, g;
  EvalReport r;
  r.task = task;
  r.top_k = top_k;
  r.n_samples = static_cast<int>(gold.size());
  double rt = 0.0, bl = 0.0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    p.push_back(task_label(preds[i].emotion, task));
    g.push_back(task_label(gold[i].emotion, task));
    r.unparsed += !preds[i].emotion.has_value();
    rt += preds[i].seconds;
    const std::vector<std::string> ref{gold[i].treatment};
    bl += bleu(treatment_of(preds[i].text), ref);
  }
  const auto classes = task_classes(task);
  const auto f = macro_f1(p, g, classes);
  r.macro_f1 = f.macro;
  r.per_class_f1 = f.per_class;
  if (!gold.empty()) {
    r.avg_rt_seconds = rt / static_cast<double>(gold.size());
    r.bleu = bl / static_cast<double>(gold.size());
  }
  return r;
}

F1Result random_baseline(std::span<const PromptRecord> gold, Task task, std::uint64_t seed) {
  const auto classes = task_classes(task);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> d(0, classes.size() - 1);
  std::vector<std::string> p, g;
  for (const auto& r : gold) {
    p.push_back(classes[d(rng)]);
    g.push_back(task_label(r.emotion, task));
  }
  return macro_f1(p, g, classes);
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"task", to_string(r.task)},         {"macro_f1", r.macro_f1},
       {"per_class_f1", r.per_class_f1},    {"n_samples", r.n_samples},
       {"unparsed", r.unparsed},            {"avg_rt_seconds", r.avg_rt_seconds},
       {"top_k", r.top_k},                  {"bleu", r.bleu}};
}

void to_json(nlohmann::json& j, const ClusterReport& r) {
  std::vector<std::array<double, 2>> proj;
  for (Eigen::Index i = 0; i < r.projection.rows(); ++i) proj.push_back({r.projection(i, 0), r.projection(i, 1)});
  j = {{"k", r.k},
       {"assignments", r.assignments},
       {"inertia", r.inertia},
       {"iterations", r.iterations},
       {"inertia_trace", r.inertia_trace},
       {"projection", proj}};
}

}  // namespace eegc
