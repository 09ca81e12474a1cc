// calm: corpus generation, training, evaluation, reflective-trace demo,
// and plot emission for the CALM desk-scale pipeline.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>

#include "calm/config.hpp"
#include "calm/eval.hpp"
#include "calm/plots.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace calm;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;

json breakdown_json(const train::LossBreakdown& b) {
  return {{"total", b.total},         {"task", b.task},
          {"window", b.window},       {"explicit_aux", b.explicit_aux},
          {"latent_aux", b.latent_aux}, {"balance", b.balance},
          {"identity", b.identity}};
}

json stats_json(const alignment::RoutingStats& s) {
  json j;
  j["importance"] = s.importance;
  j["coverage_fraction"] = s.coverage_fraction;
  return j;
}

void write_json(const std::string& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw InputError("cannot write " + path);
  f << j.dump(2) << "\n";
}

int cmd_corpus(const std::string& spec_path, const std::string& out_dir) {
  auto cfg = config::load_run_config(spec_path);
  fs::create_directories(out_dir);
  auto corpus = corpus::generate_corpus(cfg.corpus_spec);
  corpus::save_jsonl(corpus, out_dir + "/corpus.jsonl");
  config::write_manifest(out_dir, cfg);
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& corpus_path,
              const std::string& out_dir, int runs) {
  auto cfg = config::load_run_config(config_path);
  auto corpus = corpus::load_jsonl(corpus_path);
  fs::create_directories(out_dir);

  json metrics;
  json run_summaries = json::array();
  std::vector<double> final_totals;
  for (int r = 0; r < runs; ++r) {
    config::RunConfig rc = cfg;
    rc.seed = cfg.seed + static_cast<std::uint64_t>(r);
    rc.train.seed = rc.seed;
    rc.model.init_seed = rc.seed;
    model::CalmModel m(rc.model);
    auto result = train::train(m, corpus, rc.train);
    if (r == 0) {
      json hist = json::array();
      for (const auto& e : result.history) {
        json h = breakdown_json(e.mean);
        h["lr"] = e.lr;
        h["gumbel_temp"] = e.gumbel_temp;
        h["corrections"] = e.corrections;
        hist.push_back(h);
      }
      metrics["history"] = hist;
      m.save_checkpoint(out_dir + "/checkpoint",
                        hex64(fnv1a(config::canonical_json(cfg))), cfg.seed);
      write_json(out_dir + "/routing-stats.json", stats_json(result.last_routing_stats));
    }
    if (!result.history.empty()) {
      final_totals.push_back(result.history.back().mean.total);
      json rs = breakdown_json(result.history.back().mean);
      rs["seed"] = rc.seed;
      run_summaries.push_back(rs);
    }
  }
  if (runs > 1 && !final_totals.empty()) {
    double mean = 0;
    for (double v : final_totals) mean += v;
    mean /= static_cast<double>(final_totals.size());
    double ss = 0;
    for (double v : final_totals) ss += (v - mean) * (v - mean);
    double sd = final_totals.size() > 1
                    ? std::sqrt(ss / static_cast<double>(final_totals.size() - 1))
                    : 0.0;
    metrics["runs"] = {{"count", runs},
                       {"final_total_mean", mean},
                       {"final_total_std", sd},
                       {"per_run", run_summaries}};
  }
  write_json(out_dir + "/metrics.json", metrics);
  {
    std::ofstream f(out_dir + "/config.json");
    f << config::canonical_json(cfg) << "\n";
  }
  config::write_manifest(out_dir, cfg);
  return 0;
}

model::CalmModel load_model(const std::string& checkpoint_dir, config::RunConfig& cfg) {
  cfg = config::load_run_config(checkpoint_dir + "/config.json");
  model::CalmModel m(cfg.model);
  m.load_checkpoint(checkpoint_dir + "/checkpoint");
  return m;
}

int cmd_eval(const std::string& checkpoint_dir, const std::string& corpus_path,
             const std::string& report_path) {
  config::RunConfig cfg;
  model::CalmModel m = load_model(checkpoint_dir, cfg);
  auto corpus = corpus::load_jsonl(corpus_path);
  auto sp = corpus::split(corpus, cfg.eval.split_ratios, cfg.seed);
  if (sp.test.empty()) sp.test = sp.train;

  // Refined embeddings over the test split.
  int n = static_cast<int>(sp.test.size());
  Eigen::MatrixXd emb;
  std::vector<int> cultures(n);
  for (int i = 0; i < n; ++i) {
    Eigen::RowVectorXd e = m.refined_embedding(sp.test[i].tokens);
    if (i == 0) emb.resize(n, e.cols());
    emb.row(i) = e;
    cultures[i] = sp.test[i].culture_id;
  }
  auto knn = eval::knn_probe(emb, cultures, std::min(cfg.eval.knn_k, n - 1));

  // Linear probe: train embeddings -> culture, evaluated on test.
  int ntr = static_cast<int>(sp.train.size());
  Eigen::MatrixXd tremb(ntr, emb.cols());
  std::vector<int> trcult(ntr);
  for (int i = 0; i < ntr; ++i) {
    tremb.row(i) = m.refined_embedding(sp.train[i].tokens);
    trcult[i] = sp.train[i].culture_id;
  }
  auto lin = eval::linear_probe(tremb, trcult, emb, cultures);

  // Reflective pass over the test split: task predictions, correction
  // flags (the desk-scale binary misalignment detector behind p_m), OOC.
  std::vector<int> task_preds;
  std::vector<int> flags;
  int correct_tasks = 0;
  double temp_end = cfg.model.alignment.gumbel_temp_end;
  for (int i = 0; i < n; ++i) {
    const auto& ex = sp.test[i];
    auto r = m.refine(ex.tokens);
    auto pr = m.pool().forward({r.refined_explicit}, {r.refined_latent}, temp_end,
                               cfg.seed ^ (0xEE1ULL * (i + 1)));
    auto trace = m.loop().calibrate_and_correct(
        pr.identities[0], r.h_task, ex.tokens, r.refined_explicit, r.refined_latent,
        cfg.model.calibration, m.pool(), m.enc(), cfg.seed ^ (0xCC2ULL * (i + 1)));
    task_preds.push_back(trace.final_output.label);
    flags.push_back(trace.corrected ? 1 : 0);
    if (trace.final_output.label == ex.task_label) ++correct_tasks;
  }
  std::set<int> valid;
  for (int l = 0; l < cfg.corpus_spec.task_label_count; ++l) valid.insert(l);

  // Routing stats on one evaluation batch.
  auto batch = corpus::sample_contrastive_batch(
      sp.test.size() >= static_cast<std::size_t>(cfg.model.contrastive.batch_size)
          ? sp.test
          : corpus,
      std::min<int>(cfg.model.contrastive.batch_size, static_cast<int>(corpus.size()) / 2),
      cfg.seed ^ 0xABCDULL);
  std::vector<ad::Value> re, rl;
  for (const auto& ex : batch.anchors) {
    auto r = m.refine(ex.tokens);
    re.push_back(r.refined_explicit);
    rl.push_back(r.refined_latent);
  }
  auto pr = m.pool().forward(re, rl, temp_end, cfg.seed ^ 0xFEEDULL);

  json report;
  report["probe"] = {{"knn_acc", knn.acc},
                     {"knn_f1_macro", knn.f1_macro},
                     {"linear_acc_at", {{"1", lin.acc_at.at(1)},
                                        {"5", lin.acc_at.at(5)},
                                        {"10", lin.acc_at.at(10)}}}};
  report["macro_f1"] = lin.f1_macro;
  report["task_acc"] = static_cast<double>(correct_tasks) / std::max(1, n);
  report["p_m"] = eval::stereotype_rate(flags);
  report["ooc"] = eval::ooc_rate(task_preds, valid);
  report["routing_stats"] = stats_json(pr.stats);
  write_json(report_path, report);

  // Embeddings CSV for the plots command, colocated with the checkpoint.
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < n; ++i) {
    std::vector<double> row{static_cast<double>(cultures[i])};
    for (Eigen::Index j = 0; j < emb.cols(); ++j) row.push_back(emb(i, j));
    rows.push_back(std::move(row));
  }
  std::vector<std::string> header{"culture_id"};
  for (Eigen::Index j = 0; j < emb.cols(); ++j)
    header.push_back("e" + std::to_string(j));
  plots::write_csv(checkpoint_dir + "/embeddings.csv", header, rows);
  return 0;
}

int cmd_reflect_demo(const std::string& checkpoint_dir, const std::string& example_path) {
  config::RunConfig cfg;
  model::CalmModel m = load_model(checkpoint_dir, cfg);
  std::ifstream f(example_path);
  if (!f) throw InputError("cannot open " + example_path);
  json ej = json::parse(f);
  corpus::Example ex;
  ex.tokens = ej.at("tokens").get<std::vector<int>>();
  ex.culture_id = ej.value("culture_id", 0);
  ex.task_label = ej.value("task_label", 0);

  auto r = m.refine(ex.tokens);
  auto pr = m.pool().forward({r.refined_explicit}, {r.refined_latent},
                             cfg.model.alignment.gumbel_temp_end, cfg.seed ^ 0x7777ULL);
  auto trace = m.loop().calibrate_and_correct(
      pr.identities[0], r.h_task, ex.tokens, r.refined_explicit, r.refined_latent,
      cfg.model.calibration, m.pool(), m.enc(), cfg.seed ^ 0x8888ULL);

  json out;
  json prompt = json::array();
  for (Eigen::Index i = 0; i < trace.prompt.vectors->val.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < trace.prompt.vectors->val.cols(); ++j)
      row.push_back(trace.prompt.vectors->val(i, j));
    prompt.push_back(row);
  }
  out["prompt"] = prompt;
  auto logits_json = [](const reflect::PredictionRecord& rec) {
    json l = json::array();
    for (Eigen::Index j = 0; j < rec.logits->val.cols(); ++j)
      l.push_back(rec.logits->val(0, j));
    return json{{"logits", l}, {"label", rec.label}};
  };
  out["raw_output"] = logits_json(trace.raw_output);
  json hr = json::array();
  for (Eigen::Index j = 0; j < trace.h_reverse.cols(); ++j)
    hr.push_back(trace.h_reverse(j));
  out["h_reverse"] = hr;
  out["delta"] = trace.delta;
  out["corrected"] = trace.corrected;
  out["final_output"] = logits_json(trace.final_output);
  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CALM desk-scale pipeline"};
  app.require_subcommand(1);

  std::string spec_path, out_dir, config_path, corpus_path, checkpoint_dir,
      report_path, example_path, metrics_dir;
  int runs = 1;

  auto* c_corpus = app.add_subcommand("corpus", "generate a synthetic corpus");
  c_corpus->add_option("--spec", spec_path, "run config JSON")->required();
  c_corpus->add_option("--out", out_dir, "output directory")->required();

  auto* c_train = app.add_subcommand("train", "train the model");
  c_train->add_option("--config", config_path, "run config JSON")->required();
  c_train->add_option("--corpus", corpus_path, "corpus JSONL")->required();
  c_train->add_option("--out", out_dir, "output directory")->required();
  c_train->add_option("--runs", runs, "independent runs to aggregate");

  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint");
  c_eval->add_option("--checkpoint", checkpoint_dir, "training output directory")
      ->required();
  c_eval->add_option("--corpus", corpus_path, "corpus JSONL")->required();
  c_eval->add_option("--report", report_path, "report JSON path")->required();

  auto* c_demo = app.add_subcommand("reflect-demo", "print one reflective trace");
  c_demo->add_option("--checkpoint", checkpoint_dir, "training output directory")
      ->required();
  c_demo->add_option("--example", example_path, "example JSON")->required();

  auto* c_plots = app.add_subcommand("plots", "emit plots and CSVs");
  c_plots->add_option("--metrics", metrics_dir, "metrics directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (c_corpus->parsed()) return cmd_corpus(spec_path, out_dir);
    if (c_train->parsed()) return cmd_train(config_path, corpus_path, out_dir, runs);
    if (c_eval->parsed()) return cmd_eval(checkpoint_dir, corpus_path, report_path);
    if (c_demo->parsed()) return cmd_reflect_demo(checkpoint_dir, example_path);
    if (c_plots->parsed()) { plots::emit_plots(metrics_dir); return 0; }
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitUsage;
}
