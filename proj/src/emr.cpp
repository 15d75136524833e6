#include "eegc/emr.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "eegc/eval.hpp"

namespace eegc {

namespace fs = std::filesystem;

namespace {

std::string to_hex(const unsigned char* p, unsigned n) {
  std::ostringstream o;
  o << std::hex << std::setfill('0');
  for (unsigned i = 0; i < n; ++i) o << std::setw(2) << static_cast<int>(p[i]);
  return o.str();
}

struct Sha256 {
  EVP_MD_CTX* ctx{EVP_MD_CTX_new()};
  Sha256() {
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
      throw std::runtime_error("sha256: init failed");
    }
  }
  ~Sha256() { EVP_MD_CTX_free(ctx); }
  void update(const void* d, std::size_t n) { EVP_DigestUpdate(ctx, d, n); }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned n = 0;
    EVP_DigestFinal_ex(ctx, md, &n);
    return to_hex(md, n);
  }
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::string sha256_hex(std::string_view data) {
  Sha256 h;
  h.update(data.data(), data.size());
  return h.hex();
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  Sha256 h;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

nlohmann::json ServiceError::body() const {
  nlohmann::json j = {{"code", code_}, {"message", what()}};
  if (!fields_.empty()) {
    j["fields"] = nlohmann::json::array();
    for (const auto& f : fields_) j["fields"].push_back({{"field", f.field}, {"message", f.message}});
  }
  return j;
}

// ---------------------------------------------------------------------------
// Submission parsing
// ---------------------------------------------------------------------------

PatientSubmission parse_submission(const nlohmann::json& j,
                                   const std::optional<GenerationParams>& defaults) {
  std::vector<FieldError> errs;
  PatientSubmission p;
  if (defaults) p.generation = *defaults;
  if (!j.is_object()) {
    throw ServiceError(422, "invalid_submission", "submission must be a JSON object",
                       {{"", "expected an object"}});
  }

  // demographics
  if (!j.contains("demographics") || !j["demographics"].is_object()) {
    errs.push_back({"demographics", "required object"});
  } else {
    const auto& d = j["demographics"];
    if (!d.contains("gender") || !d["gender"].is_string()) {
      errs.push_back({"demographics.gender", "required string: female, male or unspecified"});
    } else if (auto g = gender_from_string(d["gender"].get<std::string>())) {
      p.demographics.gender = *g;
    } else {
      errs.push_back({"demographics.gender", "unknown value '" + d["gender"].get<std::string>() + "'"});
    }
    if (!d.contains("age") || !d["age"].is_number_integer()) {
      errs.push_back({"demographics.age", "required integer"});
    } else {
      p.demographics.age = d["age"].get<int>();
      if (p.demographics.age < 0 || p.demographics.age > 150) {
        errs.push_back({"demographics.age", "must be in [0, 150]"});
      }
    }
    if (d.contains("facial_features") && !d["facial_features"].is_null()) {
      if (d["facial_features"].is_string()) {
        p.demographics.facial_features = d["facial_features"].get<std::string>();
      } else {
        errs.push_back({"demographics.facial_features", "must be a string"});
      }
    }
  }

  // recording
  if (!j.contains("recording") || j["recording"].is_null()) {
    errs.push_back({"recording", "required: inline recording object or {\"path\": ...}"});
  } else if (!j["recording"].is_object()) {
    errs.push_back({"recording", "must be an object"});
  } else {
    const auto& r = j["recording"];
    try {
      if (r.contains("path")) {
        fs::path path = r["path"].get<std::string>();
        if (path.is_relative()) {
          if (const char* dir = std::getenv("EEGC_DATA_DIR")) path = fs::path(dir) / path;
        }
        p.recording = load_recording(path.string());
      } else {
        nlohmann::json rj = r;
        // demographics live in their own block; the recording may omit them
        if (!rj.contains("gender")) rj["gender"] = std::string(to_string(p.demographics.gender));
        // (an invalid age is already reported under demographics)
        if (!rj.contains("age")) rj["age"] = std::max(0, p.demographics.age);
        if (!rj.contains("facial_features") && p.demographics.facial_features) {
          rj["facial_features"] = *p.demographics.facial_features;
        }
        p.recording = rj.get<RawRecording>();
        validate(p.recording);
      }
    } catch (const nlohmann::json::exception& e) {
      errs.push_back({"recording", std::string("malformed: ") + e.what()});
    } catch (const std::exception& e) {
      errs.push_back({"recording", e.what()});
    }
  }

  // generation
  if (j.contains("generation") && !j["generation"].is_null()) {
    const auto& g = j["generation"];
    if (!g.is_object()) {
      errs.push_back({"generation", "must be an object"});
    } else {
      if (g.contains("top_k")) {
        if (!g["top_k"].is_number_integer() || g["top_k"].get<long>() < 1) {
          errs.push_back({"generation.top_k", "must be an integer >= 1"});
        } else {
          p.generation.top_k = g["top_k"].get<int>();
        }
      }
      if (g.contains("temperature")) {
        if (!g["temperature"].is_number() || !(g["temperature"].get<double>() > 0.0)) {
          errs.push_back({"generation.temperature", "must be a number > 0"});
        } else {
          p.generation.temperature = g["temperature"].get<double>();
        }
      }
      if (g.contains("max_new_tokens")) {
        if (!g["max_new_tokens"].is_number_integer() || g["max_new_tokens"].get<long>() < 1) {
          errs.push_back({"generation.max_new_tokens", "must be an integer >= 1"});
        } else {
          p.generation.max_new_tokens = g["max_new_tokens"].get<int>();
        }
      }
      if (g.contains("seed")) {
        if (!g["seed"].is_number_integer() || (!g["seed"].is_number_unsigned() && g["seed"].get<long long>() < 0)) {
          errs.push_back({"generation.seed", "must be a non-negative integer"});
        } else {
          p.generation.seed = g["seed"].get<std::uint64_t>();
        }
      }
    }
  }

  if (j.contains("session_id") && !j["session_id"].is_null()) {
    if (!j["session_id"].is_string() || j["session_id"].get<std::string>().empty()) {
      errs.push_back({"session_id", "must be a non-empty string"});
    } else {
      p.session_id = j["session_id"].get<std::string>();
    }
  }

  if (!errs.empty()) {
    std::string msg = "invalid submission: " + errs.front().field;
    if (errs.size() > 1) msg += " (+" + std::to_string(errs.size() - 1) + " more)";
    throw ServiceError(422, "invalid_submission", msg, std::move(errs));
  }
  return p;
}

void to_json(nlohmann::json& j, const Provenance& p) {
  j = {{"model_id", p.model_id},
       {"pruning_ratio", p.pruning_ratio},
       {"checkpoint_hash", p.checkpoint_hash},
       {"timestamp", p.timestamp},
       {"top_k", p.top_k},
       {"seed", p.seed}};
}

void to_json(nlohmann::json& j, const EmrDocument& d) {
  j = {{"basic_information", d.basic_information},
       {"medical_history", d.medical_history},
       {"physical_examination", d.physical_examination},
       {"diagnosis", d.diagnosis},
       {"treatment_plan", d.treatment_plan},
       {"laboratory_results", d.laboratory_results},
       {"follow_up_records", d.follow_up_records},
       {"medical_expenses", d.medical_expenses},
       {"emotion", d.emotion ? nlohmann::json(std::string(to_string(*d.emotion))) : nlohmann::json()},
       {"session_id", d.session_id},
       {"provenance", d.provenance}};
}

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

Retrieved retrieve_context(const Eigen::VectorXd& query, const std::vector<KnowledgeEntry>& kb,
                           int top_n) {
  if (kb.empty()) throw std::invalid_argument("knowledge base is empty");
  if (top_n < 1) throw std::invalid_argument("top_n must be >= 1");
  std::vector<double> sim(kb.size());
  const double qn = query.norm();
  for (std::size_t i = 0; i < kb.size(); ++i) {
    if (kb[i].embedding.size() != query.size()) {
      throw std::invalid_argument("embedding length mismatch for entry " + kb[i].id);
    }
    const double en = kb[i].embedding.norm();
    sim[i] = qn > 0.0 && en > 0.0 ? query.dot(kb[i].embedding) / (qn * en) : 0.0;
  }
  std::vector<std::size_t> order(kb.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (sim[a] != sim[b]) return sim[a] > sim[b];
    return kb[a].id < kb[b].id;
  });
  Retrieved r;
  r.truncated = static_cast<std::size_t>(top_n) > kb.size();
  const auto n = std::min(kb.size(), static_cast<std::size_t>(top_n));
  for (std::size_t i = 0; i < n; ++i) {
    r.entries.push_back(kb[order[i]]);
    r.similarity.push_back(sim[order[i]]);
  }
  return r;
}

std::vector<KnowledgeEntry> load_kb(const std::string& path, const Weights* w) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<KnowledgeEntry> kb;
  int lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto j = nlohmann::json::parse(line);
    KnowledgeEntry e;
    e.id = j.at("id").get<std::string>();
    e.emotion_tags = j.value("emotion_tags", std::vector<std::string>{});
    e.passage = j.at("passage").get<std::string>();
    if (j.contains("embedding")) {
      const auto v = j["embedding"].get<std::vector<double>>();
      e.embedding = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    } else if (w) {
      e.embedding = embed_text(*w, Tokenizer::instance(), e.passage).transpose();
    } else {
      throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                  ": entry has no embedding and no model to compute one");
    }
    if (w && e.embedding.size() != w->cfg.d_model) {
      throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                  ": embedding length does not match the model's hidden size");
    }
    kb.push_back(std::move(e));
  }
  return kb;
}

// ---------------------------------------------------------------------------
// Sessions
// ---------------------------------------------------------------------------

std::vector<int> render_transcript(const Session& s, const Tokenizer& tok) {
  std::vector<int> ids{Tokenizer::kBos};
  for (const auto& t : s.turns) {
    for (int id : tok.encode(t.text)) ids.push_back(id);
    // the system text runs straight into the first user turn, as in training
    if (t.role != "system") ids.push_back(Tokenizer::kSep);
  }
  return ids;
}

void evict_to_budget(Session& s, const Tokenizer& tok, int budget) {
  // keep the system turn and the newest turn whatever happens
  while (s.turns.size() > 2 && static_cast<int>(render_transcript(s, tok).size()) > budget) {
    s.turns.erase(s.turns.begin() + 1);
  }
}

namespace {

nlohmann::json session_json(const Session& s) {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : s.turns) turns.push_back({{"role", t.role}, {"text", t.text}});
  return {{"id", s.id}, {"turns", turns}};
}

}  // namespace

SessionStore::SessionStore(fs::path file) : file_(std::move(file)) {
  if (file_.empty() || !fs::exists(file_)) return;
  std::ifstream in(file_);
  const auto j = nlohmann::json::parse(in);
  for (const auto& sj : j.at("sessions")) {
    Session s;
    s.id = sj.at("id").get<std::string>();
    for (const auto& t : sj.at("turns")) s.turns.push_back({t.at("role"), t.at("text")});
    sessions_[s.id] = std::move(s);
  }
}

void SessionStore::flush() const {
  if (file_.empty()) return;
  nlohmann::json j = {{"version", 1}, {"sessions", nlohmann::json::array()}};
  for (const auto& [_, s] : sessions_) j["sessions"].push_back(session_json(s));
  if (file_.has_parent_path()) fs::create_directories(file_.parent_path());
  const fs::path tmp = file_.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << j.dump();
  }
  fs::rename(tmp, file_);
}

void SessionStore::put(const Session& s) {
  std::lock_guard lock(mu_);
  sessions_[s.id] = s;
  flush();
}

std::optional<Session> SessionStore::get(const std::string& id) const {
  std::lock_guard lock(mu_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) return std::nullopt;
  return it->second;
}

std::size_t SessionStore::size() const {
  std::lock_guard lock(mu_);
  return sessions_.size();
}

// ---------------------------------------------------------------------------
// Service
// ---------------------------------------------------------------------------

EmrService::EmrService(ServiceConfig cfg) : cfg_(std::move(cfg)), store_(cfg_.session_file) {
  cfg_.compression.validate();
  cfg_.generation.validate();
}

void EmrService::load(const std::string& checkpoint_path) {
  auto ck = load_checkpoint(checkpoint_path);
  Model m{std::move(ck.weights), std::move(ck.meta), "", sha256_file(checkpoint_path), 0.0, {}};
  m.id = m.meta.value("model_id", fs::path(checkpoint_path).stem().string());
  m.pruning_ratio = m.meta.value("pruning_ratio", 0.0);
  if (cfg_.retrieval) m.kb = load_kb(cfg_.kb_path, &m.weights);
  model_ = std::move(m);
}

void EmrService::load(Weights w, nlohmann::json meta, std::string model_id) {
  // hash what a checkpoint of these weights would contain
  const fs::path tmp = fs::temp_directory_path() /
                       ("eegc-hash-" + std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()) + ".bin");
  save_checkpoint(tmp.string(), w, meta);
  const std::string hash = sha256_file(tmp.string());
  fs::remove(tmp);
  fs::remove(tmp.string() + ".json");
  Model m{std::move(w), std::move(meta), std::move(model_id), hash, 0.0, {}};
  m.pruning_ratio = m.meta.value("pruning_ratio", 0.0);
  if (cfg_.retrieval) m.kb = load_kb(cfg_.kb_path, &m.weights);
  model_ = std::move(m);
}

const EmrService::Model& EmrService::model() const {
  if (!model_) throw ServiceError(503, "model_not_loaded", "no model is loaded");
  return *model_;
}

EmrDocument EmrService::submit(const PatientSubmission& p) {
  const Model& m = model();
  const auto& tok = Tokenizer::instance();
  try {
    validate(p.recording);
    p.generation.validate();
  } catch (const std::invalid_argument& e) {
    throw ServiceError(422, "invalid_submission", e.what(), {{"recording", e.what()}});
  }

  std::vector<std::string> lines;
  std::string prompt;
  try {
    lines = compress_recording(p.recording, cfg_.compression);
    prompt = build_prompt(p.demographics, lines);
  } catch (const std::invalid_argument& e) {
    throw ServiceError(422, "invalid_submission", e.what(), {{"recording", e.what()}});
  }
  if (cfg_.retrieval && !m.kb.empty()) {
    const Eigen::VectorXd q = embed_text(m.weights, tok, prompt).transpose();
    for (const auto& e : retrieve_context(q, m.kb, cfg_.retrieval_top_n).entries) {
      prompt += "\nContext: " + e.passage;
    }
  }

  const auto prompt_ids = make_prompt_ids(tok, prompt);
  const auto gen = generate(m.weights, tok, prompt_ids, p.generation);
  const auto emotion = parse_emotion(gen.text);

  EmrDocument d;
  std::ostringstream basic;
  basic << "Gender: " << to_string(p.demographics.gender) << "; Age: " << p.demographics.age << " years";
  if (p.demographics.facial_features && !p.demographics.facial_features->empty()) {
    basic << "; Facial features: " << *p.demographics.facial_features;
  }
  basic << "; EEG: " << p.recording.n_channels() << " channels, " << p.recording.sampling_rate_hz
        << " Hz, " << p.recording.n_samples() << " samples";
  d.basic_information = basic.str();
  d.medical_history = kNotAssessed;
  d.physical_examination = kNotAssessed;
  d.laboratory_results = kNotAssessed;
  d.follow_up_records = kNotAssessed;
  d.medical_expenses = kNotAssessed;
  d.emotion = emotion;
  std::string diag = "Emotion: ";
  if (emotion) {
    diag += std::string(to_string(*emotion)) + " (" + std::string(to_string(coarse_label(*emotion))) + ")";
  } else {
    diag += "undetermined";
  }
  diag += "\nModel output: " + trim(gen.text);
  d.diagnosis = diag;
  const auto tp = gen.text.find("Treatment:");
  d.treatment_plan = tp == std::string::npos ? "" : trim(gen.text.substr(tp + 10));
  if (d.treatment_plan.empty()) d.treatment_plan = kNotAssessed;

  d.session_id = p.session_id ? *p.session_id
                              : "s-" + sha256_hex(prompt + "\n" + m.hash + "\n" +
                                                  std::to_string(p.generation.top_k) + "/" +
                                                  std::to_string(p.generation.seed))
                                           .substr(0, 16);
  d.provenance = {m.id, m.pruning_ratio, m.hash, utc_now(), p.generation.top_k, p.generation.seed};

  Session s;
  s.id = d.session_id;
  s.turns.push_back({"system", std::string(kSystemPreamble)});
  s.turns.push_back({"user", prompt.substr(kSystemPreamble.size())});
  s.turns.push_back({"assistant", gen.text});
  store_.put(s);
  return d;
}

std::string EmrService::followup(const std::string& session_id, const std::string& question) {
  const Model& m = model();
  if (trim(question).empty()) {
    throw ServiceError(422, "invalid_request", "question must be non-empty", {{"question", "must be non-empty"}});
  }
  auto s = store_.get(session_id);
  if (!s) throw ServiceError(404, "session_not_found", "unknown session '" + session_id + "'");
  const auto& tok = Tokenizer::instance();
  s->turns.push_back({"user", question});
  evict_to_budget(*s, tok, m.weights.cfg.max_seq_len - cfg_.answer_tokens);
  GenerationParams gp = cfg_.generation;
  gp.max_new_tokens = cfg_.answer_tokens;
  const auto gen = generate(m.weights, tok, render_transcript(*s, tok), gp);
  s->turns.push_back({"assistant", gen.text});
  store_.put(*s);
  return gen.text;
}

nlohmann::json EmrService::health() const {
  return {{"status", loaded() ? "ok" : "unavailable"}, {"model_loaded", loaded()}};
}

nlohmann::json EmrService::models() const {
  nlohmann::json list = nlohmann::json::array();
  if (model_) {
    list.push_back({{"id", model_->id},
                    {"pruning_ratio", model_->pruning_ratio},
                    {"checkpoint_hash", model_->hash},
                    {"n_params", model_->weights.n_params()},
                    {"config", model_->weights.cfg},
                    {"meta", model_->meta}});
  }
  return {{"models", list}};
}

}  // namespace eegc
