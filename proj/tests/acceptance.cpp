// Acceptance runner: one PASS/FAIL line per criterion.
//
//   acceptance [--only N[,N...]] [--work DIR]
//
// Expensive artifacts (the pretrained encoder, per-run CSVs) are cached under
// the work directory so criteria can run as separate processes.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gfm/band_adapt.hpp"
#include "gfm/experiment.hpp"
#include "metrics_oracle.hpp"
#include "op_suite.hpp"
#include "reference.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace gfm;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path g_work = "acceptance_work";
const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};

void progress(const std::string& s) { std::cerr << "  " << s << std::endl; }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Desk-scale experiment shared by every training criterion.
ExperimentConfig base_config() {
  ExperimentConfig c;
  c.seeds = kSeeds;
  return c;
}

// CSV fingerprint of one fine-tuning run, stored for the determinism check.
std::string run_csv(const RunResult& r) { return metrics_csv({r}) + loss_csv({r}); }

void store_csv(const std::string& name, const std::string& text) { write_text(g_work / "csv" / (name + ".csv"), text); }

// ---------------------------------------------------------------- pretraining

struct PretrainArtifact {
  fs::path checkpoint;
  std::vector<double> epoch_loss;
  double seconds = 0;
};

PretrainArtifact pretrained_encoder() {
  const auto cfg = base_config();
  const auto dir = g_work / ("mae_" + cfg.hash());
  PretrainArtifact a;
  a.checkpoint = dir / "checkpoint";
  if (fs::exists(dir / "done.json")) {
    const auto j = nlohmann::json::parse(read_file(dir / "done.json"));
    a.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
    a.seconds = j.at("seconds").get<double>();
    return a;
  }
  progress("pretraining encoder (200 scenes, " + std::to_string(cfg.mae.epochs) + " epochs)");
  const auto r = run_pretrain(cfg, load_raw_splits(cfg.data), 1, [](std::int64_t e, double loss) {
    progress("mae epoch " + std::to_string(e + 1) + " loss " + fmt("%.5f", loss));
  });
  save_checkpoint(r.weights, a.checkpoint);
  store_csv("mae_seed1", pretrain_csv(r));
  a.epoch_loss = r.curve.epoch_loss;
  a.seconds = r.seconds;
  write_text(dir / "done.json", nlohmann::json{{"epoch_loss", a.epoch_loss}, {"seconds", a.seconds}}.dump() + "\n");
  return a;
}

ExperimentConfig pretrained_config() {
  auto c = base_config();
  c.checkpoint = pretrained_encoder().checkpoint.string();
  return c;
}

// --------------------------------------------------------------- criteria

Outcome band_equivalence() {
  const auto t0 = Clock::now();
  double worst_pad = 0, worst_dup = 0;
  Rng rng(101);
  for (int trial = 0; trial < 100; ++trial) {
    PatchEmbedLayer<float> layer(6, 1, 16, 768, Rng(1000 + static_cast<std::uint64_t>(trial)));
    auto x = testing::random_tensor<float>({3, 1, 32, 32}, rng);
    auto embed = [&](const Tensor<float>& in, const Tensor<float>& k) {
      return conv3d(in, k, layer.bias, {1, 16, 16});
    };
    const auto pad = embed(adapt_zero_pad(x), layer.kernel);
    const auto sliced = embed(x, kernel_channels(layer.kernel, 0, 3));
    worst_pad = std::max(worst_pad, testing::max_abs_diff(pad, sliced));
    const auto dup = embed(adapt_duplicate(x), layer.kernel);
    const auto summed = embed(x, add(kernel_channels(layer.kernel, 0, 3), kernel_channels(layer.kernel, 3, 3)));
    worst_dup = std::max(worst_dup, testing::max_abs_diff(dup, summed));
  }
  const double secs = since(t0);
  return {worst_pad < 1e-6 && worst_dup < 1e-5 && secs < 10,
          "zero-pad vs sliced max|diff| " + fmt("%.2e", worst_pad) + " (< 1e-6), duplication vs summed " +
              fmt("%.2e", worst_dup) + " (< 1e-5), 100 trials in " + fmt("%.1f", secs) + " s (< 10 s)"};
}

Outcome parameter_accounting() {
  PatchEmbedLayer<float> six(6, 1, 16, 768, Rng(1));
  const auto three = retrain_patch_embed(six, 3, 2);
  const auto delta = param_count(six) - param_count(three);
  return {delta == 589824, "param_count(6-band) - param_count(3-band) = " + std::to_string(delta) +
                               " (expected 589824 at D=768, p=16, t=1)"};
}

Outcome autodiff() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::string worst_op;
  std::int64_t coords = 0;
  const auto ops = testing::run_op_gradchecks(7);
  for (const auto& c : ops) {
    coords += c.coords;
    if (c.max_rel_error >= worst) worst = c.max_rel_error, worst_op = c.name;
  }
  const auto comp = testing::composite_grad_check();
  const double secs = since(t0);
  return {worst < 1e-4 && comp.max_rel_error < 1e-3 && secs < 300,
          std::to_string(ops.size()) + " ops, " + std::to_string(coords) + " coordinates, worst rel. error " +
              fmt("%.2e", worst) + " (" + worst_op + ", < 1e-4); composite " + fmt("%.2e", comp.max_rel_error) +
              " (< 1e-3); " + fmt("%.1f", secs) + " s (< 300 s)"};
}

Outcome metric_oracle() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  int mismatches = 0, compared = 0;
  for (int n = 0; n < 500; ++n) {
    const auto inst = testing::random_instance(rng);
    for (auto kind : {IouKind::Box, IouKind::Mask}) {
      EvalConfig c;
      c.iou_kind = kind;
      const auto r = evaluate(inst.dets, inst.gts, c);
      const auto o = testing::evaluate_oracle(inst.dets, inst.gts, c);
      for (int s = 0; s < 4; ++s) {
        ++compared;
        if (r.strata[s].per_threshold != o.per_threshold[s] || r.strata[s].mean != o.mean[s]) ++mismatches;
      }
    }
  }
  const double secs = since(t0);
  return {mismatches == 0 && secs < 120,
          std::to_string(mismatches) + " mismatches over 500 instances x {box, mask} x 4 strata (" +
              std::to_string(compared) + " comparisons of every threshold and the mean), " + fmt("%.1f", secs) +
              " s (< 120 s)"};
}

Outcome nms_oracle() {
  Rng rng(2);
  int mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto n = 1 + rng.below(64);
    const auto boxes = testing::random_boxes(rng, n, 40);
    std::vector<double> scores;
    for (std::size_t i = 0; i < n; ++i) scores.push_back(std::round(rng.uniform() * 20) / 20);
    const double thr = rng.uniform(0.1, 0.9);
    mismatches += nms(boxes, scores, thr) != testing::nms_reference(boxes, scores, thr);
  }
  return {mismatches == 0, std::to_string(mismatches) + " keep-set mismatches over 1000 instances of <= 64 boxes"};
}

Outcome mae_contract() {
  // gradient of the loss with respect to the reconstruction, through a real model
  const auto cfg = base_config();
  auto sc = cfg.data.scene;
  const auto scene = synth_scene(sc, 0);
  auto ec = cfg.encoder_config();
  MaeModel<float> model(ec, cfg.mae, Rng(3));
  const auto x = scene.raster;
  const auto plan = mask_for(3, 0, 0, model.encoder.tokenize(x).size(), cfg.mae.mask_ratio);
  auto recon = mae_forward(model, x, plan).detach();
  recon.set_requires_grad(true);
  backward(mae_loss(recon, mae_target(model, x), plan));
  const auto g = recon.grad();
  const auto width = recon.dim(1);
  std::int64_t nonzero_visible = 0, nonzero_masked = 0;
  for (auto i : plan.visible)
    for (std::int64_t j = 0; j < width; ++j) nonzero_visible += g[static_cast<std::size_t>(i * width + j)] != 0.0f;
  for (auto i : plan.masked)
    for (std::int64_t j = 0; j < width; ++j) nonzero_masked += g[static_cast<std::size_t>(i * width + j)] != 0.0f;

  // share of normalized variance that is sensor noise, a floor no predictor can remove
  const auto raw = load_raw_splits(cfg.data);
  const auto st = band_stats(raw.train);
  double noise_share = 0;
  for (double sd : st.std) noise_share += cfg.data.scene.noise_std * cfg.data.scene.noise_std / (sd * sd) / 6.0;

  const auto a = pretrained_encoder();
  const double first = a.epoch_loss.front(), last = a.epoch_loss.back();
  const bool ok = nonzero_visible == 0 && nonzero_masked > 0 && last <= 0.5 * first && a.seconds < 900;
  return {ok, std::to_string(nonzero_visible) + " nonzero gradient entries at " + std::to_string(plan.visible.size()) +
                  " unmasked tokens (" + std::to_string(nonzero_masked) + " at masked); pretraining 200 scenes x " +
                  std::to_string(a.epoch_loss.size()) + " epochs, seed 1: loss " + fmt("%.4f", first) + " -> " +
                  fmt("%.4f", last) + " = " + fmt("%.1f", 100.0 * last / first) + "% of epoch 1 (<= 50%), " +
                  fmt("%.0f", a.seconds) + " s (< 900 s); noise is " + fmt("%.0f", 100.0 * noise_share) +
                  "% of the normalized variance"};
}

RunResult learnability_run(Task task, const std::string& name) {
  auto cfg = base_config();
  cfg.task = task;
  const auto t0 = Clock::now();
  auto r = run_finetune(cfg, load_raw_splits(cfg.data), 1, [&](const EpochLog& e) {
    progress(name + " epoch " + std::to_string(e.epoch) + " loss " + fmt("%.4f", e.total));
  });
  progress(name + " finished in " + fmt("%.0f", since(t0)) + " s");
  store_csv(name + "_seed1", run_csv(r));
  return r;
}

Outcome learnability() {
  auto t0 = Clock::now();
  const auto det = learnability_run(Task::Detection, "detection");
  const double det_s = since(t0);
  t0 = Clock::now();
  const auto seg = learnability_run(Task::InstanceSegmentation, "segmentation");
  const double seg_s = since(t0);
  const auto d50 = det.box.map50().value_or(0), m50 = seg.mask ? seg.mask->map50().value_or(0) : 0.0;
  return {d50 >= 0.5 && m50 >= 0.4 && det_s < 1800 && seg_s < 1800,
          "detection box mAP50 " + fmt("%.4f", d50) + " (>= 0.5) in " + fmt("%.0f", det_s) +
              " s; segmentation mask mAP50 " + fmt("%.4f", m50) + " (>= 0.4) in " + fmt("%.0f", seg_s) +
              " s (each < 1800 s); 200 train / 50 test, 64x64, 6 bands, seed 1"};
}

AblationResult ablation(AblationAxis axis, const ExperimentConfig& cfg) {
  const auto dir = g_work / ("ablation_" + to_string(axis));
  const auto res = run_ablation(cfg, axis, dir, [&](const AblationCell& c) {
    if (c.run) {
      store_csv(to_string(axis) + "_" + c.value + "_seed" + std::to_string(c.seed), run_csv(*c.run));
      progress(to_string(axis) + " " + c.value + " seed " + std::to_string(c.seed) + " mAP50 " +
               format_metric(c.run->box.map50()));
    } else {
      progress(to_string(axis) + " " + c.value + " seed " + std::to_string(c.seed) + " FAILED " + c.error);
    }
  });
  write_ablation_reports(dir, cfg, res, "acceptance");
  return res;
}

std::string per_seed(const AblationResult& a, std::size_t v) {
  std::string s;
  for (std::size_t k = 0; k < a.seeds.size(); ++k) s += (k ? "/" : "") + format_metric(a.map50(v, k), 3);
  return s;
}

// Counts seeds where mAP50 is non-increasing along the axis order.
int monotone_seeds(const AblationResult& a) {
  int n = 0;
  for (std::size_t k = 0; k < a.seeds.size(); ++k) {
    bool ok = true;
    for (std::size_t v = 1; v < a.values.size(); ++v) {
      const auto prev = a.map50(v - 1, k), cur = a.map50(v, k);
      ok = ok && prev && cur && *cur <= *prev;
    }
    n += ok;
  }
  return n;
}

Outcome bands_trend() {
  const auto a = ablation(AblationAxis::Bands, pretrained_config());
  int wins = 0;
  for (std::size_t k = 0; k < a.seeds.size(); ++k) {
    const auto zero = a.map50(0, k), retrained = a.map50(2, k);
    wins += zero && retrained && *retrained >= *zero;
  }
  return {wins >= 4 && !a.any_failed(),
          "Retrained >= Zero-Padded in " + std::to_string(wins) + "/5 seeds (>= 4); mAP50 per seed: zero-padded " +
              per_seed(a, 0) + ", duplication " + per_seed(a, 1) + ", retrained " + per_seed(a, 2)};
}

Outcome pyramid_trend() {
  const auto a = ablation(AblationAxis::Pyramid, pretrained_config());
  int wins = 0;
  for (std::size_t k = 0; k < a.seeds.size(); ++k) {
    const auto single = a.map50(0, k), generated = a.map50(1, k);
    wins += single && generated && *generated >= *single;
  }
  return {wins >= 4 && !a.any_failed(),
          "generated (random init) >= single-scale in " + std::to_string(wins) +
              "/5 seeds (>= 4); mAP50 per seed: single " + per_seed(a, 0) + ", generated " + per_seed(a, 1) +
              ", generated pretrained " + per_seed(a, 2)};
}

Outcome resolution_trend() {
  const auto a = ablation(AblationAxis::Resolution, pretrained_config());
  const int n = monotone_seeds(a);
  const auto table = read_file(g_work / "ablation_resolution" / "ablation_resolution.csv");
  const bool delta_format = std::regex_search(table, std::regex(R"(,[+-]\d+\.\d{2}%)"));
  return {n >= 4 && delta_format && !a.any_failed(),
          "mAP50 non-increasing over 1/2/4/8 in " + std::to_string(n) + "/5 seeds (>= 4); percent-delta column " +
              (delta_format ? "present" : "MISSING") + "; per seed: x1 " + per_seed(a, 0) + ", x2 " + per_seed(a, 1) +
              ", x4 " + per_seed(a, 2) + ", x8 " + per_seed(a, 3)};
}

Outcome fraction_trend() {
  // nested subsets, checked exactly for every seed
  bool nested = true;
  for (auto seed : kSeeds) {
    std::vector<std::vector<std::int64_t>> sets;
    for (double f : {1.0, 0.75, 0.5, 0.25}) {
      auto s = subsample_indices(200, f, seed);
      nested = nested && static_cast<double>(s.size()) == 200 * f;
      std::sort(s.begin(), s.end());
      sets.push_back(s);
    }
    for (std::size_t i = 1; i < sets.size(); ++i)
      nested = nested && std::includes(sets[i - 1].begin(), sets[i - 1].end(), sets[i].begin(), sets[i].end());
  }
  const auto a = ablation(AblationAxis::Fraction, pretrained_config());
  const int n = monotone_seeds(a);
  return {n >= 4 && nested && !a.any_failed(),
          "mAP50 non-increasing over 100/75/50/25% in " + std::to_string(n) + "/5 seeds (>= 4); nested subsets " +
              (nested ? "exact" : "VIOLATED") + "; per seed: 100% " + per_seed(a, 0) + ", 75% " + per_seed(a, 1) +
              ", 50% " + per_seed(a, 2) + ", 25% " + per_seed(a, 3)};
}

Outcome branch_rule() {
  auto cfg = pretrained_config();
  cfg.epochs = 1;
  cfg.data.train_scenes = 40;
  cfg.data.test_scenes = 10;
  const auto raw = load_raw_splits(cfg.data);
  const auto det = run_finetune(cfg, raw, 1);
  const auto dir = g_work / "branch";
  save_checkpoint(det.weights, dir / "detection");
  const auto manifest = nlohmann::json::parse(read_file(dir / "detection" / "manifest.json"));
  int mask_tensors = 0, total = 0;
  for (const auto& e : manifest) {
    ++total;
    mask_tensors += e.at("name").get<std::string>().find("mask") != std::string::npos;
  }
  auto seg_cfg = cfg;
  seg_cfg.task = Task::InstanceSegmentation;
  const auto seg = run_finetune(seg_cfg, raw, 1);
  int seg_mask = 0;
  for (const auto& n : seg.parameter_names) seg_mask += n.find("mask") != std::string::npos;

  cfg.freeze_backbone = true;
  const auto frozen = run_finetune(cfg, raw, 1);
  const auto enc = load_checkpoint(cfg.checkpoint);
  int compared = 0, differing = 0;
  for (const auto& t : frozen.weights.tensors) {
    if (t.name.rfind("backbone.", 0) != 0) continue;
    ++compared;
    const auto* src = enc.find("encoder." + t.name.substr(9));
    differing += !src || src->vec() != t.tensor.vec();
  }
  const bool ok = mask_tensors == 0 && total > 0 && seg_mask > 0 && frozen.backbone_unchanged.value_or(false) &&
                  compared > 0 && differing == 0;
  return {ok, std::to_string(mask_tensors) + " mask-branch tensors among " + std::to_string(total) +
                  " in the detection checkpoint manifest (segmentation has " + std::to_string(seg_mask) +
                  "); frozen run: " + std::to_string(differing) + " of " + std::to_string(compared) +
                  " backbone tensors differ from the pretrained encoder"};
}

// Recomputes one run per (axis value, first seed), both learnability runs and
// the pretraining curve, and compares the CSV bytes with those stored when the
// criteria ran. Missing references are produced first.
Outcome determinism() {
  struct Job {
    std::string name;
    std::function<std::string()> run;
  };
  std::vector<Job> jobs;
  jobs.push_back({"mae_seed1", [] {
                    const auto cfg = base_config();
                    return pretrain_csv(run_pretrain(cfg, load_raw_splits(cfg.data), 1));
                  }});
  for (auto [task, name] : {std::pair{Task::Detection, "detection"}, std::pair{Task::InstanceSegmentation, "segmentation"}})
    jobs.push_back({std::string(name) + "_seed1", [task] {
                      auto cfg = base_config();
                      cfg.task = task;
                      return run_csv(run_finetune(cfg, load_raw_splits(cfg.data), 1));
                    }});
  for (auto axis : {AblationAxis::Bands, AblationAxis::Pyramid, AblationAxis::Resolution, AblationAxis::Fraction}) {
    const auto plan = axis_plan(axis);
    for (const auto& v : plan.values)
      jobs.push_back({to_string(axis) + "_" + v + "_seed1", [axis, plan, v] {
                        auto cfg = pretrained_config();
                        plan.apply(cfg, v);
                        if (cfg.pyramid == PyramidKind::GeneratedPretrained)
                          cfg.pyramid_checkpoint =
                              pretrain_pyramid_source(cfg, g_work / ("ablation_" + to_string(axis)) / "pyramid_source")
                                  .string();
                        return run_csv(run_finetune(cfg, load_raw_splits(cfg.data), 1));
                      }});
  }
  int identical = 0;
  std::vector<std::string> differing;
  for (const auto& j : jobs) {
    const auto ref = g_work / "csv" / (j.name + ".csv");
    if (!fs::exists(ref)) store_csv(j.name, j.run());
    const auto again = j.run();
    progress("rerun " + j.name + (again == read_file(ref) ? " identical" : " DIFFERS"));
    if (again == read_file(ref)) ++identical;
    else differing.push_back(j.name);
  }
  std::string d = std::to_string(identical) + "/" + std::to_string(jobs.size()) +
                  " reruns byte-identical (pretraining, both learnability runs, every ablation value at seed 1)";
  for (const auto& n : differing) d += "; differs: " + n;
  return {differing.empty(), d};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::string work = g_work.string();
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 13));
  app.add_option("--work", work, "Cache and report directory");
  CLI11_PARSE(app, argc, argv);
  g_work = work;
  fs::create_directories(g_work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"band-adaptation equivalence", band_equivalence},
      {"parameter accounting", parameter_accounting},
      {"autodiff correctness", autodiff},
      {"metric-oracle equivalence", metric_oracle},
      {"NMS oracle", nms_oracle},
      {"MAE contract", mae_contract},
      {"end-to-end learnability", learnability},
      {"band-adaptation trend", bands_trend},
      {"pyramid trend", pyramid_trend},
      {"resolution trend", resolution_trend},
      {"training-fraction trend", fraction_trend},
      {"branch activation and frozen backbone", branch_rule},
      {"determinism", determinism},
  };
  const std::set<int> selected(only.begin(), only.end());
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all = all && o.pass;
    std::printf("%s criterion %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
