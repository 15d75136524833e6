// eegc: command-line front end for the compression / pruning / fine-tuning /
// evaluation / serving pipeline.
#include <cmath>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "eegc/compression.hpp"
#include "eegc/dataset.hpp"
#include "eegc/emr.hpp"
#include "eegc/eval.hpp"
#include "eegc/finetune.hpp"
#include "eegc/pruner.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace eegc;

namespace {

void write_json(const std::string& path, const json& j) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << "\n";
    return;
  }
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

// Relative data paths fall back to $EEGC_DATA_DIR when not found as given.
std::string data_path(const std::string& p) {
  if (p.empty() || fs::exists(p) || fs::path(p).is_absolute()) return p;
  if (const char* dir = std::getenv("EEGC_DATA_DIR")) {
    auto alt = fs::path(dir) / p;
    if (fs::exists(alt)) return alt.string();
  }
  return p;
}

Method parse_method(const std::string& s) {
  auto m = method_from_string(s);
  if (!m) throw CLI::ValidationError("--method", "expected W or WtoS");
  return *m;
}

// "0.1..0.9" (step 0.1), "0.1:0.9:0.2", or "0.25,0.5".
std::vector<double> parse_ratios(const std::string& s) {
  std::vector<double> out;
  auto range = [&](double a, double b, double step) {
    for (int i = 0; a + i * step <= b + 1e-9; ++i) out.push_back(std::round((a + i * step) * 1e6) / 1e6);
  };
  if (auto p = s.find(".."); p != std::string::npos) {
    range(std::stod(s.substr(0, p)), std::stod(s.substr(p + 2)), 0.1);
  } else if (std::count(s.begin(), s.end(), ':') == 2) {
    auto a = s.find(':'), b = s.rfind(':');
    range(std::stod(s.substr(0, a)), std::stod(s.substr(b + 1)), std::stod(s.substr(a + 1, b - a - 1)));
  } else {
    std::stringstream ss(s);
    for (std::string tok; std::getline(ss, tok, ',');) out.push_back(std::stod(tok));
  }
  if (out.empty()) throw CLI::ValidationError("--ratios", "no ratios in '" + s + "'");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EEG-to-EMR pipeline: compress, build data, prune, fine-tune, evaluate, serve"};
  app.require_subcommand(1);

  // compress ---------------------------------------------------------------
  auto* compress = app.add_subcommand("compress", "Compress one recording to prompt lines");
  std::string c_in, c_out, c_method = "W", c_wavelet = "haar";
  int c_len = 0, c_bins = 256;
  compress->add_option("--in", c_in, "recording JSON")->required();
  compress->add_option("--method", c_method, "W | WtoS");
  compress->add_option("--target-len", c_len, "points per channel (default: 50 for W, 500 for WtoS)");
  compress->add_option("--wavelet", c_wavelet, "haar | db4");
  compress->add_option("--bins", c_bins, "quantization bins");
  compress->add_option("--out", c_out, "output JSON (default stdout)");
  compress->callback([&] {
    auto cfg = CompressionConfig::for_method(parse_method(c_method));
    if (c_len > 0) cfg.target_len = c_len;
    auto w = wavelet_from_string(c_wavelet);
    if (!w) throw CLI::ValidationError("--wavelet", "expected haar or db4");
    cfg.wavelet = *w;
    cfg.quant_bins = c_bins;
    cfg.validate();
    auto rec = load_recording(data_path(c_in));
    auto pre = preprocess(rec);
    json chans = json::array();
    for (const auto& ch : pre.recording.channels) {
      auto cc = compress_channel(ch, cfg);
      chans.push_back({{"name", cc.name}, {"values", cc.values}, {"quantized", cc.quantized}});
    }
    write_json(c_out, {{"method", to_string(cfg.method)},
                       {"target_len", cfg.target_len},
                       {"segments", cfg.segments},
                       {"wavelet", to_string(cfg.wavelet)},
                       {"bins", cfg.quant_bins},
                       {"reref_skipped", pre.reref_skipped},
                       {"channels", chans},
                       {"lines", compress_recording(rec, cfg)}});
  });

  // build-data -------------------------------------------------------------
  auto* build = app.add_subcommand("build-data", "Build a JSONL prompt corpus");
  bool b_synth = false;
  int b_subjects = 1800;
  std::uint64_t b_seed = 42;
  std::string b_method = "W", b_out;
  std::vector<std::string> b_in;
  build->add_flag("--synth", b_synth, "generate synthetic labeled recordings");
  build->add_option("--in", b_in, "labeled recording JSON files (instead of --synth)");
  build->add_option("--subjects", b_subjects, "synthetic subjects");
  build->add_option("--seed", b_seed, "synthetic seed");
  build->add_option("--method", b_method, "W | WtoS");
  build->add_option("--out", b_out, "corpus JSONL")->required();
  build->callback([&] {
    if (b_synth == !b_in.empty()) throw CLI::ValidationError("build-data", "give exactly one of --synth / --in");
    const auto cfg = CompressionConfig::for_method(parse_method(b_method));
    std::vector<RawRecording> recs;
    if (b_synth) {
      SynthConfig sc;
      sc.n_subjects = b_subjects;
      sc.seed = b_seed;
      recs = synth_generate(sc);
    } else {
      for (const auto& p : b_in) recs.push_back(load_recording(data_path(p)));
    }
    auto corpus = build_corpus(recs, cfg);
    emit_jsonl(corpus, b_out);
    std::cerr << "wrote " << corpus.size() << " records to " << b_out << "\n";
  });

  // pretrain ---------------------------------------------------------------
  auto* pre = app.add_subcommand("pretrain", "Train the desk-scale base model the pruner starts from");
  PretrainConfig pc;
  std::string p_out;
  pre->add_option("--records", pc.n_records, "synthetic training records");
  pre->add_option("--seed", pc.data_seed, "data seed (keep disjoint from task/test seeds)");
  pre->add_option("--init-seed", pc.init_seed, "weight init seed");
  pre->add_option("--epochs", pc.epochs);
  pre->add_option("--lr", pc.lr);
  pre->add_option("--batch-size", pc.batch_size);
  pre->add_option("--out", p_out, "checkpoint path")->required();
  pre->callback([&] {
    const auto& tok = Tokenizer::instance();
    auto w = pretrain_base(ModelConfig::desk(tok.vocab_size()), pc,
                           [](int e, const Weights&, const StageTrace& tr) {
                             std::cerr << "epoch " << e << " loss " << tr.losses.back() << " ("
                                       << tr.seconds << " s)\n";
                           });
    save_checkpoint(p_out, w, {{"model_id", fs::path(p_out).stem().string()}, {"pruning_ratio", 0.0},
                               {"pretrain", {{"records", pc.n_records}, {"seed", pc.data_seed},
                                             {"epochs", pc.epochs}, {"lr", pc.lr}}}});
  });

  // prune ------------------------------------------------------------------
  auto* prn = app.add_subcommand("prune", "Structured pruning of a checkpoint");
  std::string r_ckpt, r_out, r_report;
  double r_ratio = 0.5;
  prn->add_option("--checkpoint", r_ckpt)->required();
  prn->add_option("--ratio", r_ratio)->check(CLI::Range(0.0, 0.95));
  prn->add_option("--out", r_out)->required();
  prn->add_option("--report", r_report, "plan + shape report JSON");
  prn->callback([&] {
    auto ck = load_checkpoint(data_path(r_ckpt));
    auto pm = prune::prune_model(ck.weights, r_ratio);
    auto meta = ck.meta;
    meta["pruning_ratio"] = r_ratio;
    meta["model_id"] = fs::path(r_out).stem().string();
    meta["source_checkpoint"] = sha256_file(data_path(r_ckpt));
    save_checkpoint(r_out, pm.weights, meta);
    json rep = {{"plan", pm.plan},
                {"source_params", ck.weights.n_params()},
                {"pruned_params", pm.weights.n_params()},
                {"shape", prune::shape_report(ck.weights.cfg, r_ratio)}};
    std::cerr << "params " << ck.weights.n_params() << " -> " << pm.weights.n_params() << "\n";
    if (!r_report.empty()) write_json(r_report, rep);
  });

  // shape-plan -------------------------------------------------------------
  auto* shp = app.add_subcommand("shape-plan", "Closed-form shapes and parameter counts per ratio");
  std::string s_cfg, s_ratios = "0.1..0.9", s_out, s_table;
  shp->add_option("--config", s_cfg, "model config JSON")->required();
  shp->add_option("--ratios", s_ratios, "a..b, a:b:step, or a,b,c");
  shp->add_option("--table", s_table, "published table to compare against");
  shp->add_option("--out", s_out);
  shp->callback([&] {
    const auto base = prune::load_config(data_path(s_cfg));
    json rows = json::array();
    for (double r : parse_ratios(s_ratios)) rows.push_back(prune::shape_report(base, r));
    json out = {{"base_params", count_params(base)}, {"rows", rows}};
    if (!s_table.empty()) {
      json cmp = json::array();
      for (const auto& row : prune::load_table(data_path(s_table))) cmp.push_back(prune::compare_row(base, row));
      out["published"] = cmp;
    }
    write_json(s_out, out);
  });

  // train ------------------------------------------------------------------
  auto* trn = app.add_subcommand("train", "Staged LoRA fine-tuning (strategy 1 or 2)");
  int t_strategy = 1, t_stages = 5, t_epochs = 3, t_r = 8, t_batch = 1, t_general_epochs = 1;
  double t_alpha = 32, t_lr = 1e-5, t_general_lr = 1e-4, t_dropout = 0.5;
  std::uint64_t t_seed = 0;
  std::string t_ckpt, t_data, t_out, t_general = "general_corpus.txt";
  trn->add_option("--strategy", t_strategy)->check(CLI::IsMember({1, 2}));
  trn->add_option("--checkpoint", t_ckpt)->required();
  trn->add_option("--data", t_data, "task corpus JSONL")->required();
  trn->add_option("--stages", t_stages);
  trn->add_option("--epochs", t_epochs, "epochs per stage");
  trn->add_option("--lora-r", t_r);
  trn->add_option("--lora-alpha", t_alpha);
  trn->add_option("--lora-dropout", t_dropout);
  trn->add_option("--lr", t_lr);
  trn->add_option("--batch-size", t_batch);
  trn->add_option("--seed", t_seed);
  trn->add_option("--general", t_general, "general text corpus (strategy 2)");
  trn->add_option("--general-lr", t_general_lr);
  trn->add_option("--general-epochs", t_general_epochs);
  trn->add_option("--out", t_out, "checkpoint directory")->required();
  trn->callback([&] {
    const auto& tok = Tokenizer::instance();
    auto ck = load_checkpoint(data_path(t_ckpt));
    auto records = load_jsonl(data_path(t_data));
    auto task = task_sequences(tok, records);
    std::vector<Sequence> general;
    StrategyConfig sc;
    sc.which = t_strategy == 2 ? Strategy::Two : Strategy::One;
    if (sc.which == Strategy::Two) {
      general = text_sequences(tok, load_text_lines(data_path(t_general)), ck.weights.cfg.max_seq_len);
      sc.general.lr = t_general_lr;
      sc.general.seed = t_seed;
      sc.general_epochs = t_general_epochs;
    }
    sc.train.lr = t_lr;
    sc.train.stages = t_stages;
    sc.train.epochs_per_stage = t_epochs;
    sc.train.batch_size = t_batch;
    sc.train.seed = t_seed;
    sc.lora.r = t_r;
    sc.lora.alpha = t_alpha;
    sc.lora.dropout = t_dropout;
    sc.out_dir = t_out;
    sc.checkpoint_meta = ck.meta;
    sc.checkpoint_meta["strategy"] = t_strategy;
    auto res = run_strategy(ck.weights, general, task, sc, [](int s, const Weights&, const StageTrace& tr) {
      std::cerr << "stage " << s << " steps " << tr.losses.size() << " last loss " << tr.losses.back()
                << " (" << tr.seconds << " s)\n";
    });
    std::cerr << "lora params " << res.lora_params << "; checkpoints in " << t_out << "\n";
  });

  // eval -------------------------------------------------------------------
  auto* evl = app.add_subcommand("eval", "Macro-F1 / BLEU / response time on a held-out corpus");
  std::string e_ckpt, e_data, e_task = "nine", e_out;
  int e_topk = 1, e_max_new = 64;
  std::uint64_t e_seed = 0;
  evl->add_option("--checkpoint", e_ckpt)->required();
  evl->add_option("--data", e_data)->required();
  evl->add_option("--task", e_task, "nine | three");
  evl->add_option("--top-k", e_topk);
  evl->add_option("--max-new-tokens", e_max_new);
  evl->add_option("--seed", e_seed);
  evl->add_option("--out", e_out);
  evl->callback([&] {
    const auto& tok = Tokenizer::instance();
    const auto task = task_from_string(e_task);
    auto ck = load_checkpoint(data_path(e_ckpt));
    auto gold = load_jsonl(data_path(e_data));
    GenerationParams gp;
    gp.top_k = e_topk;
    gp.max_new_tokens = e_max_new;
    gp.seed = e_seed;
    auto preds = predict(ck.weights, tok, gold, gp);
    json out = score(gold, preds, task, e_topk);
    out["random_baseline_macro_f1"] = random_baseline(gold, task, e_seed).macro;
    write_json(e_out, out);
  });

  // serve ------------------------------------------------------------------
  auto* srv = app.add_subcommand("serve", "HTTP EMR service (/v1)");
  std::string v_ckpt, v_method = "W", v_kb, v_host = "127.0.0.1", v_sessions;
  int v_port = 8080, v_topk = 1, v_max_new = 64;
  srv->add_option("--checkpoint", v_ckpt)->required();
  srv->add_option("--port", v_port);
  srv->add_option("--host", v_host);
  srv->add_option("--method", v_method, "W | WtoS");
  srv->add_option("--top-k", v_topk);
  srv->add_option("--max-new-tokens", v_max_new);
  srv->add_option("--kb", v_kb, "knowledge base JSONL; enables retrieval");
  srv->add_option("--sessions", v_sessions, "session store file");
  srv->callback([&] {
    ServiceConfig cfg;
    cfg.compression = CompressionConfig::for_method(parse_method(v_method));
    cfg.generation.top_k = v_topk;
    cfg.generation.max_new_tokens = v_max_new;
    cfg.retrieval = !v_kb.empty();
    cfg.kb_path = data_path(v_kb);
    cfg.session_file = v_sessions;
    EmrService svc(cfg);
    svc.load(data_path(v_ckpt));
    HttpServer http(svc);
    const int port = http.bind(v_host, v_port);
    std::cerr << "listening on http://" << v_host << ":" << port << "/v1\n";
    http.listen();
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
