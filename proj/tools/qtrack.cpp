// qtrack: command-line driver for data generation, mining, training, evaluation,
// the slot baseline, the HTTP service and the interactive tracker.
//
// Exit codes: 0 success, 2 usage error (bad flags, unreadable input), 3 runtime failure.

#include "qtrack/http_service.hpp"
#include "qtrack/repl.hpp"
#include "qtrack/slot_baseline.hpp"
#include "qtrack/synthetic.hpp"
#include "qtrack/trainer.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace qtrack;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::ifstream open_in(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read " + path);
  return is;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw UsageError("cannot write " + path.string());
  return os;
}

std::vector<TrackingTriplet> load_dataset(const std::string& path) {
  auto is = open_in(path);
  return read_triplets(is);
}

std::array<double, 3> parse_splits(const std::string& text) {
  std::array<double, 3> r{};
  std::istringstream ss(text);
  std::string part;
  std::size_t n = 0;
  while (std::getline(ss, part, ',')) {
    if (n == 3) throw UsageError("--splits needs exactly three comma-separated ratios");
    try {
      std::size_t used = 0;
      r[n] = std::stod(part, &used);
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw UsageError("--splits: '" + part + "' is not a number");
    }
    ++n;
  }
  if (n != 3) throw UsageError("--splits needs exactly three comma-separated ratios");
  try {
    validate_ratios(r);
  } catch (const Error& e) {
    throw UsageError(std::string("--splits: ") + e.what());
  }
  return r;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::istringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      out.push_back(std::stoull(part));
    } catch (const std::exception&) {
      throw UsageError("--seeds: '" + part + "' is not an integer");
    }
  }
  if (out.empty()) throw UsageError("--seeds is empty");
  return out;
}

void print_report(const std::string& name, const EvalReport& r) {
  std::printf("%s: EM %.2f  F1 %.2f  (%zu samples)\n", name.c_str(), r.em, r.f1, r.samples);
}

void write_report_csv(const std::string& path, const std::string& name, const EvalReport& r) {
  if (path.empty()) return;
  auto os = open_out(path);
  os << "variant,em,f1\n" << name << ',' << r.em << ',' << r.f1 << '\n';
}

struct ModelFlags {
  Hyperparams hp;
  std::string activation = "relu";
  std::string attention_scale = "embed_dim";

  void add(CLI::App* app) {
    app->add_option("--heads", hp.heads, "Attention heads")->check(CLI::PositiveNumber);
    app->add_option("--head-dim", hp.head_dim, "Width of each head")->check(CLI::PositiveNumber);
    app->add_option("--embed-dim", hp.embed_dim, "Word embedding width")->check(CLI::PositiveNumber);
    app->add_option("--max-len", hp.max_len, "Maximum query length in words")->check(CLI::PositiveNumber);
    app->add_option("--dropout", hp.dropout, "Dropout rate")->check(CLI::Range(0.0, 0.999));
    app->add_option("--activation", activation, "relu or tanh")->check(CLI::IsMember({"relu", "tanh"}));
    app->add_option("--attention-scale", attention_scale, "Score scale denominator: embed_dim or head_dim")
        ->check(CLI::IsMember({"embed_dim", "head_dim"}));
  }
  Hyperparams resolve() {
    hp.activation = parse_activation(activation);
    hp.attention_scale = parse_attention_scale(attention_scale);
    return hp;
  }
};

struct TrainFlags {
  TrainConfig cfg;
  std::string embeddings;

  void add(CLI::App* app, bool ablation_flags) {
    app->add_option("--lr", cfg.lr, "Initial learning rate (0 freezes the weights)")->check(CLI::NonNegativeNumber);
    app->add_option("--decay", cfg.decay, "Learning-rate multiplier per epoch")->check(CLI::Range(1e-9, 1.0));
    app->add_option("--batch-size", cfg.batch_size, "Minibatch size")->check(CLI::PositiveNumber);
    app->add_option("--epochs", cfg.max_epochs, "Maximum epochs")->check(CLI::PositiveNumber);
    app->add_option("--patience", cfg.patience, "Epochs without validation EM gain before stopping")
        ->check(CLI::PositiveNumber);
    app->add_option("--embeddings", embeddings, "word2vec text vectors for the embedding table")
        ->check(CLI::ExistingFile);
    if (!ablation_flags) return;
    app->add_flag("--random-embed-init", cfg.random_embed_init, "Ignore --embeddings");
    app->add_flag("--no-self-attention", cfg.no_self_attention, "Feed raw embeddings to the matcher");
    app->add_flag("--single-head", cfg.single_head, "One attention head of the same total width");
    auto* concat = app->add_flag("--enhance-concat-only", cfg.enhance_concat_only, "Feature enhancement [X, H]");
    auto* add = app->add_flag("--enhance-add-only", cfg.enhance_add_only, "Feature enhancement X + H");
    concat->excludes(add);
    add->excludes(concat);
  }
  TrainConfig resolve(std::uint64_t seed) {
    cfg.seed = seed;
    if (!embeddings.empty()) cfg.embeddings = embeddings;
    return cfg;
  }
};

std::shared_ptr<const KeepPredictor> load_predictor(const std::string& dir) {
  if (dir.empty()) return nullptr;
  if (!fs::exists(fs::path(dir) / "config.json")) throw UsageError("no checkpoint at " + dir);
  return std::make_shared<ModelPredictor>(load_checkpoint(dir));
}

httplib::Server* g_server = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-aware query tracking for conversational product search"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  std::uint64_t seed = 1;

  // gen-synthetic
  auto* gen = app.add_subcommand("gen-synthetic", "Simulate search sessions: logs.tsv, gold.jsonl, kb.tsv");
  std::size_t gen_sessions = 10000, gen_vocab = 2000;
  std::string gen_out = "synthetic";
  gen->add_option("--sessions", gen_sessions, "Number of sessions");
  gen->add_option("--vocab", gen_vocab, "Approximate vocabulary size")->check(CLI::Range(100, 1000000));
  gen->add_option("--out-dir", gen_out, "Output directory");

  // build-data
  auto* build = app.add_subcommand("build-data", "Mine query logs into train/val/test triplets");
  std::string bd_logs, bd_out = "data", bd_splits = "0.9,0.05,0.05";
  double bd_window = 30;
  std::size_t bd_min_count = 5;
  build->add_option("--logs", bd_logs, "Raw TSV log: user, unix timestamp, query")->required();
  build->add_option("--out", bd_out, "Output directory for train/val/test.jsonl, rejects.jsonl, stats.json");
  build->add_option("--window", bd_window, "Maximum minutes between paired queries")->check(CLI::PositiveNumber);
  build->add_option("--min-count", bd_min_count, "Minimum pair frequency");
  build->add_option("--splits", bd_splits, "train,val,test ratios summing to 1");

  // train
  auto* tr = app.add_subcommand("train", "Train the tracker and write a checkpoint");
  std::string tr_train, tr_val, tr_out = "checkpoint", tr_log;
  ModelFlags tr_model;
  TrainFlags tr_flags;
  tr->add_option("--train", tr_train, "Training JSONL")->required();
  tr->add_option("--val", tr_val, "Validation JSONL")->required();
  tr->add_option("--out", tr_out, "Checkpoint directory");
  tr->add_option("--log", tr_log, "Training log JSONL (default <out>/train_log.jsonl)");
  tr_model.add(tr);
  tr_flags.add(tr, true);

  // eval
  auto* ev = app.add_subcommand("eval", "Score a checkpoint or a prediction file against a dataset");
  std::string ev_data, ev_ckpt, ev_pred, ev_report, ev_samples;
  ev->add_option("--data", ev_data, "Dataset JSONL")->required();
  auto* ev_ckpt_opt = ev->add_option("--checkpoint", ev_ckpt, "Checkpoint directory");
  auto* ev_pred_opt = ev->add_option("--predictions", ev_pred, "JSONL of {\"labels\": [...]} aligned with --data");
  ev_ckpt_opt->excludes(ev_pred_opt);
  ev_pred_opt->excludes(ev_ckpt_opt);
  ev->add_option("--report", ev_report, "Write variant,em,f1 CSV here");
  ev->add_option("--samples", ev_samples, "Write per-sample predictions JSONL here");

  // baseline-slot
  auto* bs = app.add_subcommand("baseline-slot", "Evaluate the knowledge-base slot tracker");
  std::string bs_data, bs_kb, bs_report;
  bs->add_option("--data", bs_data, "Dataset JSONL")->required();
  bs->add_option("--kb", bs_kb, "Knowledge base TSV: slot, value")->required();
  bs->add_option("--report", bs_report, "Write variant,em,f1 CSV here");

  // serve
  auto* sv = app.add_subcommand("serve", "Run the HTTP tracking service");
  std::string sv_ckpt, sv_host = "127.0.0.1", sv_persist, sv_origin = "*";
  int sv_port = 8080;
  double sv_ttl = 30;
  sv->add_option("--checkpoint", sv_ckpt, "Checkpoint directory (without one, session creation answers 503)");
  sv->add_option("--host", sv_host, "Bind address");
  sv->add_option("--port", sv_port, "Port")->check(CLI::Range(0, 65535));
  sv->add_option("--persist-dir", sv_persist, "Append-only session logs, replayed on startup");
  sv->add_option("--ttl-minutes", sv_ttl, "Idle session lifetime")->check(CLI::PositiveNumber);
  sv->add_option("--cors-origin", sv_origin, "Access-Control-Allow-Origin value");

  // track
  auto* tk = app.add_subcommand("track", "Interactive tracker reading queries from stdin");
  std::string tk_ckpt;
  bool tk_quiet = false;
  tk->add_option("--checkpoint", tk_ckpt, "Checkpoint directory")->required();
  tk->add_flag("--no-prompt", tk_quiet, "Do not print the > prompt");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train and evaluate every ablation variant");
  std::string ab_train, ab_val, ab_test, ab_seeds = "1,2,3", ab_csv = "ablation.csv", ab_md = "ablation.md";
  ModelFlags ab_model;
  TrainFlags ab_flags;
  ab->add_option("--train", ab_train, "Training JSONL")->required();
  ab->add_option("--val", ab_val, "Validation JSONL")->required();
  ab->add_option("--test", ab_test, "Test JSONL")->required();
  ab->add_option("--seeds", ab_seeds, "Comma-separated seeds; rows average over them");
  ab->add_option("--csv", ab_csv, "CSV output");
  ab->add_option("--markdown", ab_md, "Markdown output");
  ab_model.add(ab);
  ab_flags.add(ab, false);

  for (auto* sub : app.get_subcommands([](CLI::App*) { return true; })) {
    sub->add_option("--seed", seed, "Seed for every random choice of the invocation");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen) {
      auto schema = default_schema(seed, gen_vocab);
      const auto corpus = gen_synthetic(schema, gen_sessions);
      const fs::path dir(gen_out);
      {
        auto os = open_out(dir / "logs.tsv");
        for (const auto& r : corpus.logs) write_log(os, r);
      }
      {
        auto os = open_out(dir / "gold.jsonl");
        write_triplets(os, corpus.gold);
      }
      {
        auto os = open_out(dir / "kb.tsv");
        write_kb(os, corpus.kb);
      }
      std::printf("%zu sessions, %zu log records, %zu gold triplets -> %s\n", gen_sessions, corpus.logs.size(),
                  corpus.gold.size(), dir.string().c_str());
    } else if (*build) {
      const auto ratios = parse_splits(bd_splits);
      auto is = open_in(bd_logs);
      const auto logs = read_logs(is);
      const auto pairs = mine_pairs(logs.records, bd_window);
      const auto kept = filter_frequency(pairs, bd_min_count);
      const auto built = build_triplets(kept);
      DatasetSplits parts;
      if (built.triplets.empty()) {
        std::fprintf(stderr, "warning: no triplets survived mining; writing empty splits\n");
      } else {
        parts = split(built.triplets, ratios, seed);
      }
      const fs::path dir(bd_out);
      for (const auto& [name, part] : {std::pair{"train.jsonl", &parts.train}, std::pair{"val.jsonl", &parts.val},
                                       std::pair{"test.jsonl", &parts.test}}) {
        auto os = open_out(dir / name);
        write_triplets(os, *part);
      }
      std::map<std::string, std::size_t> reasons;
      {
        auto os = open_out(dir / "rejects.jsonl");
        for (const auto* list : {&logs.rejects, &built.rejects}) {
          for (const auto& r : *list) {
            os << reject_to_json(r).dump() << '\n';
            reasons[to_string(r.reason)] += r.count;
          }
        }
      }
      const nlohmann::json stats = {{"records", logs.records.size()},
                                    {"pairs", pairs.size()},
                                    {"pairs_after_min_count", kept.size()},
                                    {"triplets", built.triplets.size()},
                                    {"train", parts.train.size()},
                                    {"val", parts.val.size()},
                                    {"test", parts.test.size()},
                                    {"rejects", reasons}};
      {
        auto os = open_out(dir / "stats.json");
        os << stats.dump(2) << '\n';
      }
      std::printf("%s\n", stats.dump().c_str());
    } else if (*tr) {
      const auto train_set = load_dataset(tr_train);
      const auto val_set = load_dataset(tr_val);
      const Hyperparams hp = tr_model.resolve();
      const TrainConfig cfg = tr_flags.resolve(seed);
      const fs::path log_path = tr_log.empty() ? fs::path(tr_out) / "train_log.jsonl" : fs::path(tr_log);
      auto log = open_out(log_path);
      const auto result = train(train_set, val_set, cfg, hp, [&](const EpochLog& e) {
        log << epoch_log_to_json(e).dump() << '\n' << std::flush;
        std::printf("epoch %zu  lr %.6g  loss %.4f  val EM %.2f  F1 %.2f  (%.1fs)\n", e.epoch, e.lr, e.train_loss,
                    e.val_em, e.val_f1, e.seconds);
        std::fflush(stdout);
      });
      save_checkpoint(tr_out, result.model, result.vocab);
      std::printf("best epoch %zu (val EM %.2f) -> %s\n", result.best_epoch, result.best_val_em, tr_out.c_str());
    } else if (*ev) {
      if (ev_ckpt.empty() == ev_pred.empty()) throw UsageError("eval needs exactly one of --checkpoint or --predictions");
      const auto data = load_dataset(ev_data);
      EvalReport report;
      std::string name;
      if (!ev_ckpt.empty()) {
        if (!fs::exists(fs::path(ev_ckpt) / "config.json")) throw UsageError("no checkpoint at " + ev_ckpt);
        const auto ckpt = load_checkpoint(ev_ckpt);
        report = evaluate(ckpt.model, ckpt.vocab, data);
        name = "model";
      } else {
        auto is = open_in(ev_pred);
        std::vector<std::vector<int>> labels;
        std::string line;
        while (std::getline(is, line)) {
          if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
          const auto j = nlohmann::json::parse(line, nullptr, false);
          if (j.is_discarded()) throw UsageError("predictions: malformed JSON line");
          labels.push_back((j.is_object() ? j.at("labels") : j).get<std::vector<int>>());
        }
        report = score_predictions(data, labels);
        name = "predictions";
      }
      print_report(name, report);
      write_report_csv(ev_report, name, report);
      if (!ev_samples.empty()) {
        auto os = open_out(ev_samples);
        for (const auto& r : report.records) {
          os << nlohmann::json{{"labels", r.predicted}, {"probs", r.probabilities}, {"q3", r.predicted_q3},
                               {"em", r.em}, {"f1", r.f1}}
                    .dump()
             << '\n';
        }
      }
    } else if (*bs) {
      const auto data = load_dataset(bs_data);
      auto is = open_in(bs_kb);
      const auto kb = KnowledgeBase::load(is);
      const auto report = evaluate_slot_baseline(kb, data);
      print_report("slot-baseline", report);
      write_report_csv(bs_report, "slot-baseline", report);
    } else if (*sv) {
      SessionStoreOptions opts;
      opts.ttl = std::chrono::seconds(static_cast<long long>(sv_ttl * 60));
      if (!sv_persist.empty()) opts.persist_dir = sv_persist;
      SessionStore store(load_predictor(sv_ckpt), opts);
      if (!store.has_model()) std::fprintf(stderr, "warning: no checkpoint loaded; POST /v1/sessions will answer 503\n");
      httplib::Server server;
      install_routes(server, store, HttpOptions{sv_origin});
      g_server = &server;
      std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
      std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
      std::printf("listening on http://%s:%d\n", sv_host.c_str(), sv_port);
      std::fflush(stdout);
      if (!server.listen(sv_host, sv_port)) throw Error("cannot listen on " + sv_host + ":" + std::to_string(sv_port));
    } else if (*tk) {
      SessionStore store(load_predictor(tk_ckpt));
      run_repl(store, std::cin, std::cout, !tk_quiet);
    } else if (*ab) {
      DatasetSplits data{load_dataset(ab_train), load_dataset(ab_val), load_dataset(ab_test)};
      const auto seeds = parse_seeds(ab_seeds);
      const auto rows = run_ablations(data, ab_flags.resolve(seed), ab_model.resolve(), seeds,
                                      [](const std::string& msg) { std::printf("%s\n", msg.c_str()); std::fflush(stdout); });
      {
        auto os = open_out(ab_csv);
        write_ablation_csv(os, rows);
      }
      {
        auto os = open_out(ab_md);
        write_ablation_markdown(os, rows);
      }
      write_ablation_markdown(std::cout, rows);
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return 0;
}
