#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eegc/compression.hpp"
#include "eegc/dataset.hpp"
#include "eegc/model.hpp"

namespace eegc {

inline constexpr const char* kNotAssessed = "not assessed";

// Hex SHA-256 of a file's bytes / of a string.
std::string sha256_file(const std::string& path);
std::string sha256_hex(std::string_view data);

// ---------------------------------------------------------------------------
// Errors carrying an HTTP-style status
// ---------------------------------------------------------------------------

struct FieldError {
  std::string field;
  std::string message;
};

class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string code, const std::string& message,
               std::vector<FieldError> fields = {})
      : std::runtime_error(message), status_(status), code_(std::move(code)),
        fields_(std::move(fields)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }
  const std::vector<FieldError>& fields() const { return fields_; }
  nlohmann::json body() const;

 private:
  int status_;
  std::string code_;
  std::vector<FieldError> fields_;
};

// ---------------------------------------------------------------------------
// Documents
// ---------------------------------------------------------------------------

struct PatientSubmission {
  Demographics demographics;
  RawRecording recording;
  GenerationParams generation;
  std::optional<std::string> session_id;
};

// Collects every problem before throwing one 422 ServiceError.
// Schema: {"demographics": {"gender", "age", "facial_features"?},
//          "recording": RawRecording JSON | {"path": str},
//          "generation": {"top_k"?, "temperature"?, "max_new_tokens"?, "seed"?}?,
//          "session_id": str?}
PatientSubmission parse_submission(const nlohmann::json& j,
                                   const std::optional<GenerationParams>& defaults = {});

struct Provenance {
  std::string model_id;
  double pruning_ratio{0.0};
  std::string checkpoint_hash;
  std::string timestamp;
  int top_k{0};
  std::uint64_t seed{0};
};

struct EmrDocument {
  std::string basic_information;
  std::string medical_history;
  std::string physical_examination;
  std::string diagnosis;
  std::string treatment_plan;
  std::string laboratory_results;
  std::string follow_up_records;
  std::string medical_expenses;
  std::optional<Emotion> emotion;
  std::string session_id;
  Provenance provenance;
};

void to_json(nlohmann::json& j, const EmrDocument& d);
void to_json(nlohmann::json& j, const Provenance& p);

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

struct KnowledgeEntry {
  std::string id;
  std::vector<std::string> emotion_tags;
  std::string passage;
  Eigen::VectorXd embedding;
};

struct Retrieved {
  std::vector<KnowledgeEntry> entries;
  std::vector<double> similarity;
  bool truncated{false};  // top_n exceeded the knowledge base
};

// Cosine similarity descending, ties by id ascending. Zero vectors have
// similarity 0. Throws on an empty kb, top_n < 1, or a length mismatch.
Retrieved retrieve_context(const Eigen::VectorXd& query, const std::vector<KnowledgeEntry>& kb,
                           int top_n);

// One JSON object per line: {"id", "emotion_tags", "passage", "embedding"?}.
// Entries without an embedding get the model's mean-pooled passage embedding.
std::vector<KnowledgeEntry> load_kb(const std::string& path, const Weights* w = nullptr);

// ---------------------------------------------------------------------------
// Sessions
// ---------------------------------------------------------------------------

struct Turn {
  std::string role;  // system | user | assistant
  std::string text;
  bool operator==(const Turn&) const = default;
};

struct Session {
  std::string id;
  std::vector<Turn> turns;  // turns[0] is the system preamble
};

// Drops the oldest non-system turns until the token count of the rendered
// transcript (see render_transcript) is at most `budget`.
void evict_to_budget(Session& s, const Tokenizer& tok, int budget);

// [BOS], the system text, then every later turn's text followed by [SEP];
// the first exchange is exactly a training sequence's layout.
std::vector<int> render_transcript(const Session& s, const Tokenizer& tok);

// Sessions in one JSON file, rewritten atomically after each change. All
// access is serialized by one mutex (the single writer).
class SessionStore {
 public:
  explicit SessionStore(std::filesystem::path file = {});
  void put(const Session& s);
  std::optional<Session> get(const std::string& id) const;
  std::size_t size() const;

 private:
  void flush() const;
  std::filesystem::path file_;
  mutable std::mutex mu_;
  std::map<std::string, Session> sessions_;
};

// ---------------------------------------------------------------------------
// Service
// ---------------------------------------------------------------------------

struct ServiceConfig {
  CompressionConfig compression;
  GenerationParams generation;  // defaults for fields a request omits
  bool retrieval{false};
  std::string kb_path;
  int retrieval_top_n{2};
  std::filesystem::path session_file;  // empty: in memory only
  int answer_tokens{48};               // reserved for a follow-up answer
};

class EmrService {
 public:
  explicit EmrService(ServiceConfig cfg);

  void load(const std::string& checkpoint_path);
  // For tests and in-process use; hash is of the serialized weights.
  void load(Weights w, nlohmann::json meta, std::string model_id);
  bool loaded() const { return model_.has_value(); }

  EmrDocument submit(const PatientSubmission& p);
  std::string followup(const std::string& session_id, const std::string& question);

  nlohmann::json health() const;
  nlohmann::json models() const;
  const SessionStore& sessions() const { return store_; }
  const ServiceConfig& config() const { return cfg_; }

 private:
  struct Model {
    Weights weights;
    nlohmann::json meta;
    std::string id;
    std::string hash;
    double pruning_ratio{0.0};
    std::vector<KnowledgeEntry> kb;
  };
  const Model& model() const;

  ServiceConfig cfg_;
  std::optional<Model> model_;
  SessionStore store_;
};

// The /v1 HTTP surface over one service.
class HttpServer {
 public:
  explicit HttpServer(EmrService& svc);
  ~HttpServer();
  // Returns the bound port (port 0 picks a free one); throws if binding fails.
  int bind(const std::string& host, int port);
  // Blocks until stop().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace eegc
