#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <thread>

#include "eegc/emr.hpp"
#include "eegc/finetune.hpp"

#include <httplib.h>  // after Eigen (resolv.h's _res macro)

using namespace eegc;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Female, 23, "negative" facial cue, with a sadness-class synthetic recording.
RawRecording fig12_recording() {
  SynthConfig sc;
  sc.seed = 77;
  RawRecording r = synth_subject(sc, 3);
  r.gender = Gender::female;
  r.age = 23;
  r.facial_features = "negative";
  return r;
}

json fig12_body(int top_k = 1) {
  json rec = fig12_recording();
  rec.erase("gender");
  rec.erase("age");
  rec.erase("facial_features");
  rec.erase("label");
  return {{"demographics", {{"gender", "female"}, {"age", 23}, {"facial_features", "negative"}}},
          {"recording", rec},
          {"generation", {{"top_k", top_k}, {"seed", 5}, {"max_new_tokens", 40}}}};
}

// Desk-config model overfit on the single submission above; built once and
// cached on disk because every test runs in its own process.
std::string overfit_checkpoint() {
  const fs::path path = fs::temp_directory_path() / "eegc-test-emr-overfit-v1.bin";
  if (fs::exists(path)) return path.string();
  const auto& tok = Tokenizer::instance();
  RawRecording r = fig12_recording();
  const auto rec = record_from_recording(r, CompressionConfig{});
  std::vector<Sequence> data{make_sequence(tok, rec.prompt, rec.response())};
  TrainConfig tc;
  tc.lr = 3e-3;
  tc.weight_decay = 0.0;
  tc.warmup_steps = 10;
  tc.epochs_per_stage = 150;
  Trainer t(Weights::init(ModelConfig::desk(tok.vocab_size()), 11), std::nullopt, tc);
  t.train_stage(data, 1);
  const fs::path tmp = path.string() + ".part" + std::to_string(::getpid());
  save_checkpoint(tmp.string(), t.weights(), {{"model_id", "desk-overfit"}, {"pruning_ratio", 0.0}});
  fs::rename(tmp, path);
  fs::rename(tmp.string() + ".json", path.string() + ".json");
  return path.string();
}

json strip_timestamp(json j) {
  j["provenance"].erase("timestamp");
  return j;
}

std::vector<std::string> field_names(const ServiceError& e) {
  std::vector<std::string> out;
  for (const auto& f : e.fields()) out.push_back(f.field);
  return out;
}

}  // namespace

// --- hashing ----------------------------------------------------------------

TEST(Hash, Sha256KnownVectors) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

// --- submission parsing -----------------------------------------------------

TEST(Submission, ParsesValidBody) {
  const auto p = parse_submission(fig12_body());
  EXPECT_EQ(p.demographics.gender, Gender::female);
  EXPECT_EQ(p.demographics.age, 23);
  EXPECT_EQ(p.recording.n_channels(), 4u);
  EXPECT_EQ(p.generation.top_k, 1);
  EXPECT_EQ(p.generation.seed, 5u);
  EXPECT_FALSE(p.session_id);
}

TEST(Submission, MissingRecordingIsFieldLevel422) {
  auto b = fig12_body();
  b.erase("recording");
  try {
    parse_submission(b);
    FAIL() << "expected a validation error";
  } catch (const ServiceError& e) {
    EXPECT_EQ(e.status(), 422);
    EXPECT_EQ(field_names(e), std::vector<std::string>{"recording"});
    EXPECT_EQ(e.body()["fields"][0]["field"], "recording");
  }
}

TEST(Submission, ZeroChannelRecordingRejected) {
  auto b = fig12_body();
  b["recording"]["channels"] = json::array();
  try {
    parse_submission(b);
    FAIL();
  } catch (const ServiceError& e) {
    EXPECT_EQ(e.status(), 422);
    EXPECT_EQ(field_names(e), std::vector<std::string>{"recording"});
    EXPECT_NE(std::string(e.fields()[0].message).find("no channels"), std::string::npos);
  }
}

TEST(Submission, CollectsEveryFieldError) {
  auto b = fig12_body();
  b["demographics"]["gender"] = "robot";
  b["demographics"]["age"] = -4;
  b["generation"]["top_k"] = 0;
  try {
    parse_submission(b);
    FAIL();
  } catch (const ServiceError& e) {
    EXPECT_EQ(field_names(e), (std::vector<std::string>{"demographics.gender", "demographics.age",
                                                         "generation.top_k"}));
  }
}

// --- retrieval --------------------------------------------------------------

namespace {
std::vector<KnowledgeEntry> hand_kb() {
  auto v = [](double a, double b) { return Eigen::Vector2d(a, b).eval(); };
  return {{"e1", {}, "one", v(1, 0)}, {"e2", {}, "two", v(0.6, 0.8)}, {"e3", {}, "three", v(0, 1)}};
}
}  // namespace

TEST(Retrieval, HandBuiltCosineOrder) {
  const auto r = retrieve_context(Eigen::Vector2d(1, 0), hand_kb(), 3);
  ASSERT_EQ(r.entries.size(), 3u);
  EXPECT_EQ(r.entries[0].id, "e1");
  EXPECT_EQ(r.entries[1].id, "e2");
  EXPECT_EQ(r.entries[2].id, "e3");
  EXPECT_NEAR(r.similarity[0], 1.0, 1e-12);
  EXPECT_NEAR(r.similarity[1], 0.6, 1e-12);
  EXPECT_NEAR(r.similarity[2], 0.0, 1e-12);
  EXPECT_FALSE(r.truncated);
}

TEST(Retrieval, TiesBrokenByIdAndRepeatable) {
  std::vector<KnowledgeEntry> kb = {{"b", {}, "", Eigen::Vector2d(1, 1)},
                                    {"a", {}, "", Eigen::Vector2d(2, 2)},
                                    {"c", {}, "", Eigen::Vector2d(-1, 0)}};
  const auto r1 = retrieve_context(Eigen::Vector2d(1, 1), kb, 2);
  const auto r2 = retrieve_context(Eigen::Vector2d(1, 1), kb, 2);
  EXPECT_EQ(r1.entries[0].id, "a");
  EXPECT_EQ(r1.entries[1].id, "b");
  EXPECT_EQ(r1.similarity, r2.similarity);
}

TEST(Retrieval, OversizedTopNReturnsAllAndFlags) {
  const auto r = retrieve_context(Eigen::Vector2d(0, 1), hand_kb(), 10);
  EXPECT_EQ(r.entries.size(), 3u);
  EXPECT_TRUE(r.truncated);
  EXPECT_EQ(r.entries[0].id, "e3");
  EXPECT_THROW(retrieve_context(Eigen::Vector2d(0, 1), {}, 1), std::invalid_argument);
  EXPECT_THROW(retrieve_context(Eigen::Vector2d(0, 1), hand_kb(), 0), std::invalid_argument);
  EXPECT_THROW(retrieve_context(Eigen::Vector3d(0, 1, 0), hand_kb(), 1), std::invalid_argument);
}

TEST(Retrieval, LoadsBundledKbWithModelEmbeddings) {
  const auto& tok = Tokenizer::instance();
  const auto w = Weights::init(ModelConfig::desk(tok.vocab_size()), 1);
  const auto kb = load_kb(std::string(EEGC_DATA_DIR) + "/kb.jsonl", &w);
  ASSERT_EQ(kb.size(), 9u);
  for (const auto& e : kb) EXPECT_EQ(e.embedding.size(), w.cfg.d_model);
  // an entry's own embedding retrieves it first with similarity 1
  const auto r = retrieve_context(kb[4].embedding, kb, 1);
  EXPECT_EQ(r.entries[0].id, kb[4].id);
  EXPECT_NEAR(r.similarity[0], 1.0, 1e-12);
}

// --- sessions ---------------------------------------------------------------

TEST(Session, EvictionKeepsSystemTurnAndDropsOldest) {
  const auto& tok = Tokenizer::instance();
  Session s{"x", {{"system", "sys"}, {"user", "first question"}, {"assistant", "first answer"},
                  {"user", "second question"}}};
  const int full = static_cast<int>(render_transcript(s, tok).size());
  Session t = s;
  evict_to_budget(t, tok, full);
  EXPECT_EQ(t.turns, s.turns);
  evict_to_budget(t, tok, full - 1);
  ASSERT_EQ(t.turns.size(), 3u);
  EXPECT_EQ(t.turns[0].text, "sys");
  EXPECT_EQ(t.turns[1].text, "first answer");
  evict_to_budget(t, tok, 1);
  ASSERT_EQ(t.turns.size(), 2u);
  EXPECT_EQ(t.turns[0].role, "system");
  EXPECT_EQ(t.turns[1].text, "second question");
}

TEST(Session, FirstExchangeRendersAsTrainingSequence) {
  const auto& tok = Tokenizer::instance();
  const std::string prompt = std::string(kSystemPreamble) + "\n\nPatient: male, 40 years old";
  Session s{"x", {{"system", std::string(kSystemPreamble)},
                  {"user", prompt.substr(kSystemPreamble.size())}}};
  EXPECT_EQ(render_transcript(s, tok), make_prompt_ids(tok, prompt));
}

TEST(Session, StorePersistsAcrossReopen) {
  const auto file = fs::temp_directory_path() / "eegc-test-sessions.json";
  fs::remove(file);
  {
    SessionStore st(file);
    st.put({"a", {{"system", "s"}, {"user", "u"}}});
    st.put({"b", {{"system", "s"}}});
  }
  SessionStore again(file);
  EXPECT_EQ(again.size(), 2u);
  ASSERT_TRUE(again.get("a"));
  EXPECT_EQ(again.get("a")->turns.size(), 2u);
  EXPECT_FALSE(again.get("zzz"));
  fs::remove(file);
}

// --- service ----------------------------------------------------------------

TEST(Service, Fig12SubmissionDiagnosesNegativeEmotion) {
  EmrService svc(ServiceConfig{});
  svc.load(overfit_checkpoint());
  const auto d = svc.submit(parse_submission(fig12_body()));
  ASSERT_TRUE(d.emotion.has_value()) << d.diagnosis;
  EXPECT_EQ(coarse_label(*d.emotion), Valence::negative);
  EXPECT_NE(d.diagnosis.find(std::string(to_string(*d.emotion))), std::string::npos);
  EXPECT_NE(d.treatment_plan, kNotAssessed);
  EXPECT_FALSE(d.basic_information.empty());
  for (const auto* s : {&d.medical_history, &d.physical_examination, &d.laboratory_results,
                        &d.follow_up_records, &d.medical_expenses})
    EXPECT_EQ(*s, kNotAssessed);
  EXPECT_EQ(d.provenance.model_id, "desk-overfit");
  EXPECT_EQ(d.provenance.checkpoint_hash, sha256_file(overfit_checkpoint()));
  EXPECT_FALSE(d.provenance.timestamp.empty());
  EXPECT_EQ(d.provenance.top_k, 1);
}

TEST(Service, GreedySubmissionIsDeterministic) {
  EmrService svc(ServiceConfig{});
  svc.load(overfit_checkpoint());
  const auto p = parse_submission(fig12_body());
  json a = svc.submit(p), b = svc.submit(p);
  EXPECT_EQ(strip_timestamp(a).dump(), strip_timestamp(b).dump());
}

TEST(Service, ZeroChannelSubmissionNeverGenerates) {
  EmrService svc(ServiceConfig{});
  svc.load(overfit_checkpoint());
  auto p = parse_submission(fig12_body());
  p.recording.channels.clear();
  try {
    svc.submit(p);
    FAIL();
  } catch (const ServiceError& e) {
    EXPECT_EQ(e.status(), 422);
  }
  EXPECT_EQ(svc.sessions().size(), 0u);
}

TEST(Service, NotLoadedIs503) {
  EmrService svc(ServiceConfig{});
  try {
    svc.submit(parse_submission(fig12_body()));
    FAIL();
  } catch (const ServiceError& e) {
    EXPECT_EQ(e.status(), 503);
  }
  EXPECT_EQ(svc.health()["status"], "unavailable");
}

TEST(Service, HashTracksCheckpointBytes) {
  const auto src = overfit_checkpoint();
  const auto dir = fs::temp_directory_path() / "eegc-test-hash";
  fs::create_directories(dir);
  fs::copy_file(src, dir / "same.bin", fs::copy_options::overwrite_existing);
  EXPECT_EQ(sha256_file((dir / "same.bin").string()), sha256_file(src));
  auto ck = load_checkpoint(src);
  ck.weights.final_norm(0, 0) += 0.5;
  save_checkpoint((dir / "changed.bin").string(), ck.weights, ck.meta);
  EXPECT_NE(sha256_file((dir / "changed.bin").string()), sha256_file(src));
  fs::remove_all(dir);
}

TEST(Service, FollowupGrowsTranscriptByTwoTurns) {
  ServiceConfig cfg;
  cfg.session_file = fs::temp_directory_path() / "eegc-test-followup.json";
  fs::remove(cfg.session_file);
  EmrService svc(cfg);
  svc.load(overfit_checkpoint());
  auto body = fig12_body();
  body["session_id"] = "visit-1";
  const auto d = svc.submit(parse_submission(body));
  EXPECT_EQ(d.session_id, "visit-1");
  const auto before = svc.sessions().get("visit-1")->turns.size();
  svc.followup("visit-1", "How long should the treatment last?");
  const auto after = svc.sessions().get("visit-1")->turns.size();
  EXPECT_EQ(after, before + 2);
  // persisted
  SessionStore reopened(cfg.session_file);
  EXPECT_EQ(reopened.get("visit-1")->turns.size(), after);
  try {
    svc.followup("nope", "hello?");
    FAIL();
  } catch (const ServiceError& e) {
    EXPECT_EQ(e.status(), 404);
  }
  fs::remove(cfg.session_file);
}

TEST(Service, RetrievalAugmentedSubmission) {
  ServiceConfig cfg;
  cfg.retrieval = true;
  cfg.kb_path = std::string(EEGC_DATA_DIR) + "/kb.jsonl";
  EmrService svc(cfg);
  svc.load(overfit_checkpoint());
  const auto d = svc.submit(parse_submission(fig12_body()));
  EXPECT_FALSE(d.diagnosis.empty());
  const auto s = svc.sessions().get(d.session_id);
  ASSERT_TRUE(s);
  EXPECT_NE(s->turns[1].text.find("Context: "), std::string::npos);
}

// --- HTTP -------------------------------------------------------------------

class Http : public ::testing::Test {
 protected:
  void SetUp() override {
    svc_.load(overfit_checkpoint());
    server_ = std::make_unique<HttpServer>(svc_);
    port_ = server_->bind("127.0.0.1", 0);
    thread_ = std::thread([this] { server_->listen(); });
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    client_->set_read_timeout(60, 0);
    for (int i = 0; i < 100 && !client_->Get("/v1/health"); ++i)
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  void TearDown() override {
    server_->stop();
    thread_.join();
  }
  httplib::Result post(const std::string& path, const std::string& body) {
    return client_->Post(path, body, "application/json");
  }

  EmrService svc_{ServiceConfig{}};
  std::unique_ptr<HttpServer> server_;
  std::thread thread_;
  std::unique_ptr<httplib::Client> client_;
  int port_{0};
};

TEST_F(Http, HealthAndModelsConformToSchema) {
  auto h = client_->Get("/v1/health");
  ASSERT_TRUE(h);
  EXPECT_EQ(h->status, 200);
  EXPECT_EQ(json::parse(h->body)["status"], "ok");
  auto m = client_->Get("/v1/models");
  ASSERT_TRUE(m);
  EXPECT_EQ(m->status, 200);
  const auto j = json::parse(m->body);
  ASSERT_EQ(j["models"].size(), 1u);
  const auto& e = j["models"][0];
  EXPECT_EQ(e["id"], "desk-overfit");
  EXPECT_TRUE(e["pruning_ratio"].is_number());
  EXPECT_EQ(e["checkpoint_hash"].get<std::string>().size(), 64u);
  EXPECT_TRUE(e["config"].is_object());
  EXPECT_TRUE(e["n_params"].is_number_integer());
}

TEST_F(Http, EmrIsByteIdenticalModuloTimestamp) {
  const auto body = fig12_body().dump();
  auto a = post("/v1/emr", body), b = post("/v1/emr", body);
  ASSERT_TRUE(a && b);
  EXPECT_EQ(a->status, 200);
  EXPECT_EQ(a->get_header_value("Content-Type"), "application/json");
  const auto ja = json::parse(a->body), jb = json::parse(b->body);
  for (const char* k : {"basic_information", "medical_history", "physical_examination", "diagnosis",
                        "treatment_plan", "laboratory_results", "follow_up_records",
                        "medical_expenses", "provenance"})
    EXPECT_TRUE(ja.contains(k)) << k;
  EXPECT_EQ(strip_timestamp(ja).dump(), strip_timestamp(jb).dump());
  // bodies differ at most inside the timestamp value
  json ta = ja, tb = jb;
  ta["provenance"]["timestamp"] = tb["provenance"]["timestamp"] = "";
  EXPECT_EQ(ta.dump(), tb.dump());
}

TEST_F(Http, ValidationErrorsAreStructured422) {
  auto body = fig12_body();
  body.erase("recording");
  auto r = post("/v1/emr", body.dump());
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 422);
  const auto j = json::parse(r->body);
  EXPECT_EQ(j["code"], "invalid_submission");
  EXPECT_TRUE(j["message"].is_string());
  EXPECT_EQ(j["fields"][0]["field"], "recording");

  auto bad = post("/v1/emr", "{not json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  EXPECT_EQ(json::parse(bad->body)["code"], "bad_json");

  auto chat = post("/v1/chat", json{{"question", "hi"}}.dump());
  ASSERT_TRUE(chat);
  EXPECT_EQ(chat->status, 422);
  EXPECT_EQ(json::parse(chat->body)["fields"][0]["field"], "session_id");
}

TEST_F(Http, ChatFollowsUpAndUnknownSessionIs404) {
  auto e = post("/v1/emr", fig12_body().dump());
  ASSERT_TRUE(e);
  const auto sid = json::parse(e->body)["session_id"].get<std::string>();
  auto c = post("/v1/chat", json{{"session_id", sid}, {"question", "Any diet advice?"}}.dump());
  ASSERT_TRUE(c);
  EXPECT_EQ(c->status, 200);
  const auto j = json::parse(c->body);
  EXPECT_EQ(j["session_id"], sid);
  EXPECT_TRUE(j["answer"].is_string());
  EXPECT_EQ(j["turns"], 5);
  auto missing = post("/v1/chat", json{{"session_id", "nope"}, {"question", "?"}}.dump());
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  EXPECT_EQ(json::parse(missing->body)["code"], "session_not_found");
  auto unknown = client_->Get("/v1/nothing");
  ASSERT_TRUE(unknown);
  EXPECT_EQ(unknown->status, 404);
}
