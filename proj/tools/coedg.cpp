// coedg: command-line driver for co-evolution runs, offline pseudo-label
// filtering, evaluation and the simulated adapter server.

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>

#include "coedg/coevolution.hpp"
#include "coedg/error.hpp"
#include "coedg/metrics.hpp"
#include "coedg/protocol.hpp"

namespace fs = std::filesystem;
using namespace coedg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitAdapter = 2;
constexpr int kExitInternal = 3;
constexpr int kExitInterrupted = 130;

std::atomic<bool> g_interrupted{false};

void on_sigint(int) { g_interrupted.store(true); }

int exit_code(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::kConfig:
    case ErrorKind::kParse:
    case ErrorKind::kInvalidArgument:
      return kExitConfig;
    case ErrorKind::kTransport:
    case ErrorKind::kTimeout:
    case ErrorKind::kProtocol:
    case ErrorKind::kUnsupported:
      return kExitAdapter;
    case ErrorKind::kInternal:
      break;
  }
  return kExitInternal;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("coedg");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* lvl = std::getenv("COEDG_LOG")) spdlog::set_level(spdlog::level::from_str(lvl));
}

// Reads [{sample_id, detections}] into an ordered map.
std::map<std::string, std::vector<Detection>> read_predictions(const fs::path& path) {
  const json j = read_json_file(path);
  std::map<std::string, std::vector<Detection>> out;
  try {
    for (const auto& r : j) out[r.at("sample_id").get<std::string>()] = r.at("detections").get<std::vector<Detection>>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kParse, path.string() + ": " + e.what());
  } catch (const Error& e) {
    throw Error(ErrorKind::kParse, path.string() + ": " + e.what());
  }
  return out;
}

std::map<std::string, GeneratorCategorySet> read_gen_cats(const fs::path& path, double threshold) {
  const json j = read_json_file(path);
  std::map<std::string, GeneratorCategorySet> out;
  try {
    for (const auto& r : j) {
      const auto id = r.at("sample_id").get<std::string>();
      if (r.contains("categories")) {
        out[id] = {id, r["categories"].get<std::set<CategoryId>>()};
      } else {
        const auto probs = r.at("category_probs").get<std::vector<double>>();
        out[id] = categories_from_probs(id, probs, threshold);
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kParse, path.string() + ": " + e.what());
  }
  return out;
}

// Throws a config error naming up to ten ids present in one set but not the other.
template <typename A, typename B>
void require_same_ids(const A& a, const B& b, const std::string& what) {
  std::vector<std::string> bad;
  for (const auto& [id, _] : a) {
    if (!b.count(id)) bad.push_back(id);
  }
  for (const auto& [id, _] : b) {
    if (!a.count(id)) bad.push_back(id);
  }
  if (bad.empty()) return;
  std::sort(bad.begin(), bad.end());
  std::string msg = what + ": " + std::to_string(bad.size()) + " mismatched sample ids:";
  for (std::size_t i = 0; i < bad.size() && i < 10; ++i) msg += " " + bad[i];
  throw Error(ErrorKind::kConfig, msg);
}

std::map<std::string, Tokens> read_reports(const fs::path& path, std::map<std::string, std::vector<double>>* probs) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kConfig, "cannot open " + path.string());
  std::map<std::string, Tokens> out;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const json r = json::parse(line);
      const auto id = r.at("sample_id").get<std::string>();
      out[id] = tokenize(r.at("report").get<std::string>());
      if (probs != nullptr && r.contains("category_probs")) {
        (*probs)[id] = r["category_probs"].get<std::vector<double>>();
      }
    } catch (const json::exception& e) {
      throw Error(ErrorKind::kParse, path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

void emit(const std::string& text, const std::string& out_dir, const std::string& name) {
  std::cout << text;
  if (!out_dir.empty()) write_text_file(text, fs::path(out_dir) / name);
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"coedg: co-evolving detection and report generation engine"};
  app.set_version_flag("--version", std::string(COEDG_VERSION));
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::vector<double> thresholds;
  std::vector<double> tau_grid = {0.7, 0.8, 0.9, 0.95};
  bool semi_oracle = false;
  bool resume = false;
  int iterations = 1;

  // make-synth
  auto* synth = app.add_subcommand("make-synth", "Write a synthetic dataset directory");
  SynthConfig synth_cfg;
  synth->add_option("--out-dir", out_dir, "Output directory")->required();
  synth->add_option("--seed", seed, "Random seed");
  synth->add_option("--samples", synth_cfg.n_samples, "Number of samples");
  synth->add_option("--categories", synth_cfg.n_categories, "Number of categories (<= 8)");
  synth->add_option("--labeled-fraction", synth_cfg.labeled_fraction, "Fraction of fully labeled samples");

  // coevolve
  auto* coevolve = app.add_subcommand("coevolve", "Run co-evolution from a JSON config");
  coevolve->add_option("--config", config_path, "Config file");
  coevolve->add_option("--out-dir", out_dir, "Run directory")->default_val("runs/coevolve");
  auto* seed_opt = coevolve->add_option("--seed", seed, "Override the config seed");
  auto* thr_opt = coevolve->add_option("--thresholds", thresholds, "IoU thresholds for mAP")->delimiter(',');
  coevolve->add_flag("--semi-oracle", semi_oracle, "Use ground-truth categories for the generator filter");
  coevolve->add_flag("--resume", resume, "Continue from the run directory's checkpoint");

  // filter
  auto* filter = app.add_subcommand("filter", "Assemble pseudo labels from prediction files");
  std::string teacher_path, student_path, gen_cats_path, out_path;
  double tau = 0.9, iou_thr = 0.5, gen_threshold = 0.5;
  filter->add_option("--teacher", teacher_path, "Teacher predictions")->required();
  filter->add_option("--student", student_path, "Student predictions")->required();
  filter->add_option("--gen-cats", gen_cats_path, "Generator categories (omit to keep every category)");
  filter->add_option("--config", config_path, "Config file supplying tau and nms_iou_thr");
  auto* tau_opt = filter->add_option("--tau", tau, "Score threshold");
  auto* iou_opt = filter->add_option("--iou", iou_thr, "SA-NMS IoU threshold");
  filter->add_option("--gen-threshold", gen_threshold, "Probability threshold for category_probs records");
  filter->add_option("--out", out_path, "Output file")->required();

  // eval-det
  auto* eval_det = app.add_subcommand("eval-det", "mAP of detection predictions");
  std::string pred_path, gt_path, truth_path;
  eval_det->add_option("--pred", pred_path, "Predictions [{sample_id, detections}]")->required();
  eval_det->add_option("--gt", gt_path, "Ground-truth box records")->required();
  eval_det->add_option("--thresholds", thresholds, "IoU thresholds")->delimiter(',');
  eval_det->add_option("--out-dir", out_dir, "Directory for det_eval.json and det_eval.md");

  // eval-rep
  auto* eval_rep = app.add_subcommand("eval-rep", "BLEU, ROUGE-L and AUC of generated reports");
  eval_rep->add_option("--pred", pred_path, "Generated reports (JSON lines)")->required();
  eval_rep->add_option("--gt", gt_path, "Reference reports (JSON lines)")->required();
  eval_rep->add_option("--truth", truth_path, "Ground-truth box records, enables AUC");
  eval_rep->add_option("--out-dir", out_dir, "Directory for rep_eval.json and rep_eval.md");

  // sweep-tau
  auto* sweep = app.add_subcommand("sweep-tau", "Short co-evolution runs over a tau grid");
  sweep->add_option("--config", config_path, "Config file")->required();
  sweep->add_option("--tau-grid", tau_grid, "Comma-separated tau values")->delimiter(',');
  sweep->add_option("--iterations", iterations, "Iterations per run")->default_val(1);
  auto* sweep_seed = sweep->add_option("--seed", seed, "Override the config seed");
  sweep->add_option("--thresholds", thresholds, "IoU thresholds for mAP")->delimiter(',');
  sweep->add_option("--out-dir", out_dir, "Directory for sweep.md, sweep.csv, sweep.json");

  // serve-sim
  auto* serve = app.add_subcommand("serve-sim", "Serve the simulated adapter over stdin/stdout");
  ServeOptions serve_opts;
  serve->add_option("--stall-op", serve_opts.stall_op, "Never answer this op (fault injection)");
  serve->add_option("--fake-version", serve_opts.fake_version, "Answer init with this protocol version");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*synth) {
      const auto data = synth_dataset(synth_cfg, seed);
      write_dataset_dir(data, out_dir);
      spdlog::info("wrote {} samples to {}", data.samples.size(), out_dir);
      return kExitOk;
    }

    if (*coevolve) {
      CoEvoConfig cfg;
      if (!config_path.empty()) {
        cfg = load_config(config_path);
      } else if (resume && fs::exists(fs::path(out_dir) / "checkpoint.json")) {
        cfg = config_from_json(read_json_file(fs::path(out_dir) / "checkpoint.json").at("config"));
      } else {
        throw Error(ErrorKind::kConfig, "coevolve needs --config");
      }
      if (*seed_opt) cfg.seed = seed;
      if (*thr_opt) cfg.thresholds = thresholds;
      if (semi_oracle) cfg.semi_oracle = true;
      cfg.validate();
      std::signal(SIGINT, on_sigint);
      const auto outcome = run_coevolution(cfg, out_dir, {resume, &g_interrupted});
      if (!outcome.completed) return kExitInterrupted;
      std::ifstream summary(fs::path(out_dir) / "summary.md");
      std::cout << summary.rdbuf();
      return kExitOk;
    }

    if (*filter) {
      if (!config_path.empty()) {
        const auto cfg = load_config(config_path);
        if (!*tau_opt) tau = cfg.tau;
        if (!*iou_opt) iou_thr = cfg.nms_iou_thr;
      }
      const auto teacher = read_predictions(teacher_path);
      const auto student = read_predictions(student_path);
      require_same_ids(teacher, student, "teacher vs student");
      std::map<std::string, GeneratorCategorySet> gen_cats;
      if (!gen_cats_path.empty()) {
        gen_cats = read_gen_cats(gen_cats_path, gen_threshold);
        require_same_ids(teacher, gen_cats, "predictions vs gen-cats");
      } else {
        for (const auto& [id, dets] : teacher) {
          auto& set = gen_cats[id];
          set.sample_id = id;
          for (const auto& d : dets) set.categories.insert(d.category);
          for (const auto& d : student.at(id)) set.categories.insert(d.category);
          set.categories.erase(kBackground);
        }
      }
      json out = json::array();
      long kept = 0, excluded = 0;
      for (const auto& [id, t] : teacher) {
        const auto pl = assemble_pseudo_labels(id, t, student.at(id), gen_cats.at(id), {tau, iou_thr});
        kept += static_cast<long>(pl.labels.size());
        excluded += pl.include_in_unsup_loss ? 0 : 1;
        out.push_back(pl);
      }
      write_json_file(out, out_path);
      spdlog::info("{} samples, {} pseudo labels, {} excluded from the unsupervised loss", teacher.size(), kept,
                   excluded);
      return kExitOk;
    }

    if (*eval_det) {
      if (thresholds.empty()) thresholds = {0.25, 0.5, 0.75};
      const auto preds = read_predictions(pred_path);
      const auto gt = load_ground_truth(gt_path);
      require_same_ids(preds, gt, "predictions vs ground truth");
      std::vector<ImageEval> images;
      for (const auto& [id, boxes] : gt) images.push_back({preds.at(id), boxes});
      const auto result = mean_ap(images, thresholds);
      if (!out_dir.empty()) write_json_file(result, fs::path(out_dir) / "det_eval.json");
      emit(det_table_markdown(result), out_dir, "det_eval.md");
      return kExitOk;
    }

    if (*eval_rep) {
      std::map<std::string, std::vector<double>> probs;
      const auto preds = read_reports(pred_path, &probs);
      const auto refs = read_reports(gt_path, nullptr);
      require_same_ids(preds, refs, "predictions vs references");
      std::vector<Tokens> cands, references;
      for (const auto& [id, r] : refs) {
        cands.push_back(preds.at(id));
        references.push_back(r);
      }
      RepEvalResult result;
      if (!truth_path.empty()) {
        const auto truth = load_ground_truth(truth_path);
        std::vector<std::vector<double>> scores;
        std::vector<std::vector<int>> labels;
        for (const auto& [id, _] : refs) {
          auto p = probs.find(id);
          auto t = truth.find(id);
          if (p == probs.end() || t == truth.end()) {
            throw Error(ErrorKind::kConfig, "AUC needs category_probs and ground truth for sample " + id);
          }
          std::vector<int> row(p->second.size(), 0);
          for (const auto& g : t->second) {
            if (g.category > 0 && g.category <= static_cast<int>(row.size())) row[g.category - 1] = 1;
          }
          scores.push_back(p->second);
          labels.push_back(std::move(row));
        }
        result = evaluate_reports(cands, references, &scores, &labels);
      } else {
        result = evaluate_reports(cands, references);
      }
      if (!out_dir.empty()) write_json_file(result, fs::path(out_dir) / "rep_eval.json");
      emit(rep_table_markdown(result), out_dir, "rep_eval.md");
      return kExitOk;
    }

    if (*sweep) {
      auto cfg = load_config(config_path);
      cfg.iterations = iterations;
      if (*sweep_seed) cfg.seed = seed;
      if (!thresholds.empty()) cfg.thresholds = thresholds;
      cfg.validate();
      const auto rows = sweep_tau(cfg, tau_grid);
      if (!out_dir.empty()) {
        json j = json::array();
        for (const auto& r : rows) j.push_back(json{{"tau", r.tau}, {"map", r.map}});
        write_json_file(json{{"thresholds", cfg.thresholds}, {"rows", j}}, fs::path(out_dir) / "sweep.json");
        write_text_file(sweep_csv(rows, cfg.thresholds), fs::path(out_dir) / "sweep.csv");
      }
      emit(sweep_markdown(rows, cfg.thresholds), out_dir, "sweep.md");
      return kExitOk;
    }

    if (*serve) {
      std::ios::sync_with_stdio(false);
      return serve_stdio(std::cin, std::cout, serve_opts);
    }
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return exit_code(e);
  } catch (const std::exception& e) {
    spdlog::error("internal error: {}", e.what());
    return kExitInternal;
  }
  return kExitInternal;
}
