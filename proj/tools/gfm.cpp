// gfm: data generation, pretraining, fine-tuning, evaluation and ablations.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 runtime or numeric
// error, 4 ablation finished with failed runs.

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gfm/band_adapt.hpp"
#include "gfm/experiment.hpp"

#ifndef GFM_GIT_HASH
#define GFM_GIT_HASH "unknown"
#endif

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitPartial = 4;

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string output_dir;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "JSON experiment config");
  cmd->add_option("-s,--set", c.overrides, "Override a config field, e.g. --set mae.mask_ratio=0.6");
  cmd->add_option("--seed", c.seed, "Run seed (replaces the config's seed list; default from GFM_SEED)");
  cmd->add_option("-o,--output-dir", c.output_dir, "Output directory (overrides output_dir)");
}

gfm::ExperimentConfig load(const Common& c) {
  auto j = gfm::read_config_json(c.config, c.overrides);
  if (c.seed) {
    j["seeds"] = {*c.seed};
  } else if (!j.contains("seeds")) {
    if (const char* env = std::getenv("GFM_SEED"); env && *env) {
      try {
        j["seeds"] = {std::stoull(env)};
      } catch (const std::exception&) {
        throw gfm::ConfigError(std::string("GFM_SEED must be a non-negative integer, got '") + env + "'");
      }
    }
  }
  if (!c.output_dir.empty()) j["output_dir"] = c.output_dir;
  auto cfg = gfm::ExperimentConfig::from_json(j);
  cfg.validate();
  return cfg;
}

void log(const std::string& s) { std::cerr << s << std::endl; }

std::string seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

std::vector<std::string> band_names(std::int64_t bands) {
  if (bands == 3) return {"Red", "Green", "Blue"};
  return gfm::default_band_order();
}

int cmd_gen_data(const Common& c) {
  const auto cfg = load(c);
  const auto root = std::filesystem::path(cfg.output_dir) / "data";
  const auto train_dir = cfg.data.train_dir.empty() ? root / "train" : std::filesystem::path(cfg.data.train_dir);
  const auto test_dir = cfg.data.test_dir.empty() ? root / "test" : std::filesystem::path(cfg.data.test_dir);
  auto gen = cfg.data;
  gen.train_dir.clear();
  gen.test_dir.clear();
  const auto raw = gfm::load_raw_splits(gen);
  const auto hash = cfg.hash();
  const auto names = band_names(cfg.data.scene.bands);
  gfm::write_split(train_dir, "train", raw.train, cfg.data.scene.num_classes, hash, names);
  gfm::write_split(test_dir, "test", raw.test, cfg.data.scene.num_classes, hash, names);
  std::cout << "wrote " << raw.train.size() << " train scenes to " << train_dir.string() << "\n"
            << "wrote " << raw.test.size() << " test scenes to " << test_dir.string() << "\n";
  return 0;
}

int cmd_pretrain(const Common& c) {
  const auto cfg = load(c);
  const std::filesystem::path out = cfg.output_dir;
  const auto raw = gfm::load_raw_splits(cfg.data);
  std::string csv;
  nlohmann::json runs = nlohmann::json::array();
  for (auto seed : cfg.seeds) {
    const auto r = gfm::run_pretrain(cfg, raw, seed, [&](std::int64_t e, double loss) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "pretrain seed %llu epoch %lld loss %.6f",
                    static_cast<unsigned long long>(seed), static_cast<long long>(e + 1), loss);
      log(buf);
    });
    const auto ck = out / "checkpoints" / seed_dir(seed);
    gfm::save_checkpoint(r.weights, ck);
    const auto one = gfm::pretrain_csv(r);
    csv += csv.empty() ? one : one.substr(one.find('\n') + 1);
    runs.push_back({{"seed", seed},
                    {"checkpoint", ck.string()},
                    {"epoch_loss", r.curve.epoch_loss},
                    {"seconds", r.seconds}});
    std::cout << "checkpoint " << ck.string() << "\n";
  }
  gfm::write_text(out / "pretrain_loss.csv", csv);
  nlohmann::json rep{{"config_hash", cfg.hash()},
                     {"config", cfg.to_json()},
                     {"provenance", {{"git", GFM_GIT_HASH}, {"seeds", cfg.seeds}}},
                     {"runs", runs}};
  gfm::write_text(out / "pretrain_report.json", rep.dump(2) + "\n");
  std::cout << "loss curve " << (out / "pretrain_loss.csv").string() << "\n";
  return 0;
}

void print_report(const gfm::RunResult& r) {
  auto line = [&](const char* kind, const gfm::EvalReport& e) {
    std::cout << "seed " << r.seed << " " << kind << "  mAP50 " << gfm::format_metric(e.map50()) << "  mAP "
              << gfm::format_metric(e.map()) << "  S " << gfm::format_metric(e.map_s()) << "  M "
              << gfm::format_metric(e.map_m()) << "  L " << gfm::format_metric(e.map_l()) << "\n";
  };
  line("box ", r.box);
  if (r.mask) line("mask", *r.mask);
}

int cmd_finetune(const Common& c) {
  const auto cfg = load(c);
  const std::filesystem::path out = cfg.output_dir;
  const auto raw = gfm::load_raw_splits(cfg.data);
  std::vector<gfm::RunResult> runs;
  for (auto seed : cfg.seeds) {
    auto r = gfm::run_finetune(cfg, raw, seed, [&](const gfm::EpochLog& e) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "finetune seed %llu epoch %lld loss %.6f",
                    static_cast<unsigned long long>(seed), static_cast<long long>(e.epoch), e.total);
      log(buf);
    });
    gfm::save_checkpoint(r.weights, out / "checkpoints" / seed_dir(seed));
    print_report(r);
    if (r.backbone_unchanged)
      std::cout << "backbone unchanged: " << (*r.backbone_unchanged ? "yes" : "NO") << "\n";
    r.weights = {};
    runs.push_back(std::move(r));
  }
  gfm::write_run_reports(out, cfg, runs, GFM_GIT_HASH);
  std::cout << "reports in " << out.string() << "\n";
  for (const auto& r : runs)
    if (r.backbone_unchanged && !*r.backbone_unchanged) return kExitRuntime;
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& predictions, int threads) {
  auto cfg = load(c);
  if (threads > 0) cfg.eval_threads = threads;
  if (checkpoint.empty() == predictions.empty())
    throw gfm::UsageError("eval needs exactly one of --checkpoint or --predictions");
  const std::filesystem::path out = cfg.output_dir;
  const auto raw = gfm::load_raw_splits(cfg.data);
  const auto seed = cfg.seeds.front();
  const auto ev = predictions.empty() ? gfm::evaluate_checkpoint(cfg, raw, seed, checkpoint)
                                      : gfm::evaluate_predictions(cfg, raw, gfm::read_predictions(predictions));
  gfm::RunResult r;
  r.config_hash = cfg.hash();
  r.seed = seed;
  r.task = cfg.task;
  r.box = ev.box;
  r.mask = ev.mask;
  r.inference_seconds_per_image = ev.seconds_per_image;
  print_report(r);
  gfm::write_text(out / "eval_metrics.csv", gfm::metrics_csv({r}));
  nlohmann::json rep{{"config_hash", r.config_hash},
                     {"seed", seed},
                     {"source", predictions.empty() ? "checkpoint:" + checkpoint : "predictions:" + predictions},
                     {"box", gfm::report_json(r.box)},
                     {"provenance", {{"git", GFM_GIT_HASH}, {"seeds", {seed}}}},
                     {"notes", gfm::report_notes(cfg, false)}};
  if (r.mask) rep["mask"] = gfm::report_json(*r.mask);
  if (predictions.empty()) {
    rep["timing"] = {{"inference_seconds_per_image", ev.seconds_per_image}};
    std::printf("inference %.4f s/image\n", ev.seconds_per_image);
    gfm::write_predictions(out / "predictions.json", ev.detections);
  }
  gfm::write_text(out / "eval_report.json", rep.dump(2) + "\n");
  std::vector<std::vector<std::string>> rows{{"box", gfm::format_metric(r.box.map50()), gfm::format_metric(r.box.map()),
                                              gfm::format_metric(r.box.map_s()), gfm::format_metric(r.box.map_m()),
                                              gfm::format_metric(r.box.map_l())}};
  if (r.mask)
    rows.push_back({"mask", gfm::format_metric(r.mask->map50()), gfm::format_metric(r.mask->map()),
                    gfm::format_metric(r.mask->map_s()), gfm::format_metric(r.mask->map_m()),
                    gfm::format_metric(r.mask->map_l())});
  gfm::write_text(out / "eval_report.md", "# Evaluation\n\nconfig `" + r.config_hash + "`, seed " +
                                              std::to_string(seed) + "\n\n" +
                                              gfm::markdown_table({"iou", "mAP50", "mAP", "mAP_S", "mAP_M", "mAP_L"}, rows) +
                                              gfm::markdown_notes(gfm::report_notes(cfg, false)));
  return 0;
}

int cmd_ablate(const Common& c, const std::string& axis_flag) {
  auto cfg = load(c);
  if (!axis_flag.empty()) cfg.axis = axis_flag;
  const auto axis = gfm::parse_axis(cfg.axis);
  const std::filesystem::path out = cfg.output_dir;
  const auto res = gfm::run_ablation(cfg, axis, out, [](const gfm::AblationCell& cell) {
    if (cell.run)
      log("ablate " + cell.value + " seed " + std::to_string(cell.seed) +
          " mAP50 " + gfm::format_metric(cell.run->box.map50()));
    else
      log("ablate " + cell.value + " seed " + std::to_string(cell.seed) + " FAILED: " + cell.error);
  });
  gfm::write_ablation_reports(out, cfg, res, GFM_GIT_HASH);
  const auto table = gfm::ablation_table(res, cfg.task == gfm::Task::InstanceSegmentation);
  std::cout << gfm::markdown_table(table[0], {table.begin() + 1, table.end()});
  return res.any_failed() ? kExitPartial : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Geospatial foundation model detection toolkit"};
  app.require_subcommand(1);
  Common c;
  std::string checkpoint, predictions, axis;
  int threads = 0;

  auto* gen = app.add_subcommand("gen-data", "Generate synthetic train/test splits");
  add_common(gen, c);
  auto* pre = app.add_subcommand("pretrain", "Masked-autoencoder pretraining of the encoder");
  add_common(pre, c);
  auto* fin = app.add_subcommand("finetune", "Fine-tune a detector and report test metrics");
  add_common(fin, c);
  fin->add_option("--checkpoint", checkpoint, "Backbone weights (pretrain or finetune output)");
  fin->add_flag("--freeze-backbone", [&](std::int64_t) { c.overrides.push_back("freeze_backbone=true"); },
                "Train only pyramid and heads");
  auto* ev = app.add_subcommand("eval", "Evaluate a detector checkpoint or a predictions file");
  add_common(ev, c);
  ev->add_option("--checkpoint", checkpoint, "Fine-tuned detector checkpoint directory");
  ev->add_option("--predictions", predictions, "COCO results JSON to score instead of a model");
  ev->add_option("--threads", threads, "Evaluation worker threads")->check(CLI::PositiveNumber);
  auto* sch = app.add_subcommand("schema", "Print the config JSON Schema");
  auto* def = app.add_subcommand("defaults", "Print the default config (after --config/--set)");
  add_common(def, c);
  auto* abl = app.add_subcommand("ablate", "Run one ablation axis over all seeds");
  add_common(abl, c);
  abl->add_option("--axis", axis, "bands, pyramid, resolution or fraction");
  abl->add_option("--checkpoint", checkpoint, "Backbone weights for every run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (!checkpoint.empty() && !ev->parsed()) c.overrides.push_back("checkpoint=" + nlohmann::json(checkpoint).dump());
    if (sch->parsed()) {
      std::cout << gfm::config_schema().dump(2) << "\n";
      return 0;
    }
    if (def->parsed()) {
      std::cout << load(c).to_json().dump(2) << "\n";
      return 0;
    }
    if (gen->parsed()) return cmd_gen_data(c);
    if (pre->parsed()) return cmd_pretrain(c);
    if (fin->parsed()) return cmd_finetune(c);
    if (ev->parsed()) return cmd_eval(c, checkpoint, predictions, threads);
    if (abl->parsed()) return cmd_ablate(c, axis);
  } catch (const gfm::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kExitConfig;
  } catch (const gfm::UsageError& e) {
    std::cerr << e.what() << "\n";
    return kExitConfig;
  } catch (const gfm::AdaptationRequiredError& e) {
    std::cerr << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}
