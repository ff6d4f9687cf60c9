#pragma once

// Experiment runner: configuration, data preparation, fine-tuning, evaluation,
// ablation sweeps and report emission.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfm/checkpoint.hpp"
#include "gfm/datagen.hpp"
#include "gfm/detect.hpp"
#include "gfm/mae.hpp"
#include "gfm/metrics.hpp"
#include "gfm/optim.hpp"

namespace gfm {

// ------------------------------------------------------------------ training

struct TrainConfig {
  std::int64_t epochs = 8;
  std::int64_t batch_size = 4;  // scenes per optimizer step
  double lr = 1e-3;
  double weight_decay = 0.05;
  std::int64_t warmup_steps = 20;
  double min_lr_ratio = 0.05;  // cosine floor as a fraction of lr
  double grad_clip = 5.0;      // global L2 norm; 0 disables

  void validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(lr > 0)) throw ConfigError("train.lr must be positive");
    if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
    if (warmup_steps < 0) throw ConfigError("train.warmup_steps must be >= 0");
    if (!(min_lr_ratio >= 0 && min_lr_ratio <= 1)) throw ConfigError("train.min_lr_ratio must be in [0, 1]");
    if (grad_clip < 0) throw ConfigError("train.grad_clip must be >= 0");
  }
};

// Linear warmup, then cosine decay to min_lr_ratio * lr at the last step.
inline double lr_at(const TrainConfig& c, std::int64_t step, std::int64_t total) {
  if (step < c.warmup_steps) return c.lr * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps + 1);
  const auto span = std::max<std::int64_t>(1, total - c.warmup_steps);
  const double prog = std::min(1.0, static_cast<double>(step - c.warmup_steps) / static_cast<double>(span));
  const double floor = c.min_lr_ratio * c.lr;
  return floor + (c.lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * prog));
}

template <class T>
double clip_grad_norm(const ParamList<T>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    for (auto g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& p : params) {
      auto t = p.tensor;
      if (!t.has_grad()) continue;
      for (auto& g : t.mutable_grad()) g = static_cast<T>(g * s);
    }
  }
  return norm;
}

struct EpochLog {
  std::int64_t epoch = 0;
  double lr = 0;  // at the epoch's last step
  double total = 0;
  std::vector<std::pair<std::string, double>> terms;  // mean per scene
};

struct FinetuneResult {
  std::vector<EpochLog> curve;
  std::int64_t iterations = 0;
  double seconds_per_iteration = 0;
};

struct TrainSample {
  Tensor<float> x;  // normalized model input
  std::vector<InstanceAnnotation> gts;
};

// Shuffled epochs of per-scene losses, accumulated over `batch_size` scenes
// per AdamW step. Frozen backbones are excluded from the optimizer and from
// gradient computation.
template <class T>
FinetuneResult finetune_loop(Detector<T>& det, const std::vector<TrainSample>& data,
                             const TrainConfig& cfg, bool freeze_backbone, std::uint64_t seed,
                             const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (data.empty()) throw UsageError("finetune: empty training set");
  ParamList<T> backbone, heads, params;
  det.collect_backbone(backbone);
  det.collect_heads(heads);
  if (freeze_backbone) {
    for (auto& p : backbone) p.tensor.set_requires_grad(false);
    params = heads;
  } else {
    params = backbone;
    params.insert(params.end(), heads.begin(), heads.end());
  }
  AdamW<T> opt(params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  const auto n = static_cast<std::int64_t>(data.size());
  const auto steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const auto total_steps = steps_per_epoch * cfg.epochs;
  FinetuneResult res;
  const auto t0 = std::chrono::steady_clock::now();
  std::int64_t step = 0;
  for (std::int64_t e = 0; e < cfg.epochs; ++e) {
    auto order = Rng(seed).split("finetune_order").split(static_cast<std::uint64_t>(e)).permutation(data.size());
    std::vector<std::vector<std::pair<std::string, double>>> per_scene(data.size());
    std::vector<double> totals(data.size(), 0.0);
    opt.zero_grad();
    for (std::int64_t b = 0; b < steps_per_epoch; ++b) {
      const auto lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      for (auto i = lo; i < hi; ++i) {
        const auto idx = order[static_cast<std::size_t>(i)];
        const auto sample_seed = Rng(seed).split("finetune_sample").split(static_cast<std::uint64_t>(e))
                                     .split(static_cast<std::uint64_t>(idx)).next_u64();
        auto L = detector_losses(det, data[idx].x.template cast<T>(), data[idx].gts, sample_seed);
        const double lv = static_cast<double>(L.total.item());
        if (!std::isfinite(lv))
          throw NumericError("fine-tuning diverged at epoch " + std::to_string(e + 1) + " step " +
                             std::to_string(step) + " (loss " + std::to_string(lv) + ")");
        totals[idx] = lv;
        for (const auto& [name, t] : L.terms) per_scene[idx].emplace_back(name, t);
        backward(scale(L.total, static_cast<T>(1.0 / static_cast<double>(hi - lo))));
      }
      opt.set_lr(lr_at(cfg, step, total_steps));
      clip_grad_norm(params, cfg.grad_clip);
      opt.step();
      opt.zero_grad();
      ++step;
    }
    EpochLog log;
    log.epoch = e + 1;
    log.lr = lr_at(cfg, step - 1, total_steps);
    for (double v : totals) log.total += v;
    log.total /= static_cast<double>(n);
    for (const auto& [name, _] : per_scene[0]) {
      double s = 0;
      for (const auto& ps : per_scene)
        for (const auto& [nm, v] : ps)
          if (nm == name) s += v;
      log.terms.emplace_back(name, s / static_cast<double>(n));
    }
    res.curve.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  const auto t1 = std::chrono::steady_clock::now();
  res.iterations = step;
  res.seconds_per_iteration = std::chrono::duration<double>(t1 - t0).count() / static_cast<double>(std::max<std::int64_t>(1, step));
  if (freeze_backbone)
    for (auto& p : backbone) p.tensor.set_requires_grad(true);
  return res;
}

struct EvalOutcome {
  EvalReport box;
  std::optional<EvalReport> mask;
  std::vector<Detection> detections;
  double seconds_per_image = 0;
};

// Predicts every test scene (ids assigned in scene order) and scores boxes,
// plus masks for segmentation models.
template <class T>
EvalOutcome evaluate_detector(const Detector<T>& det, const std::vector<TrainSample>& test,
                              const std::vector<std::int64_t>& image_ids, int threads = 1,
                              const EvalConfig& base = {}) {
  EvalOutcome out;
  std::vector<InstanceAnnotation> gts;
  const auto t0 = std::chrono::steady_clock::now();
  std::int64_t next_id = 1;
  for (std::size_t i = 0; i < test.size(); ++i) {
    for (auto d : predict(det, test[i].x.template cast<T>(), image_ids[i])) {
      d.id = next_id++;
      out.detections.push_back(std::move(d));
    }
    gts.insert(gts.end(), test[i].gts.begin(), test[i].gts.end());
  }
  const auto t1 = std::chrono::steady_clock::now();
  out.seconds_per_image =
      std::chrono::duration<double>(t1 - t0).count() / static_cast<double>(std::max<std::size_t>(1, test.size()));
  EvalConfig bc = base;
  bc.iou_kind = IouKind::Box;
  out.box = evaluate(out.detections, gts, bc, threads);
  if (det.mask_head) {
    EvalConfig mc = base;
    mc.iou_kind = IouKind::Mask;
    out.mask = evaluate(out.detections, gts, mc, threads);
  }
  return out;
}

// -------------------------------------------------------------- configuration

struct ModelConfig {
  std::int64_t patch = 4, embed_dim = 64, depth = 4, heads = 4, window_size = 2;
  double mlp_ratio = 4.0;
  std::int64_t fpn_dim = 64, box_hidden = 128, mask_channels = 16;
  std::vector<std::int64_t> conv_widths{16, 32, 64, 128};
};

struct DataConfig {
  std::string train_dir, test_dir;  // empty: generate in memory
  std::int64_t train_scenes = 200, test_scenes = 50;
  SceneConfig scene;

  DataConfig() {
    scene.num_classes = 3;
    scene.max_objects = 8;
    scene.min_size = 4;
    scene.max_size = 20;
    scene.noise_std = 0.05;
    scene.seed = 1;
  }
};

// Index offset separating generated test scenes from training scenes.
inline constexpr std::int64_t kTestIndexOffset = 1000000;

enum class AblationAxis { Bands, Pyramid, Resolution, Fraction };

inline std::string to_string(AblationAxis a) {
  constexpr const char* names[] = {"bands", "pyramid", "resolution", "fraction"};
  return names[static_cast<int>(a)];
}
inline AblationAxis parse_axis(const std::string& s) {
  if (s == "bands") return AblationAxis::Bands;
  if (s == "pyramid") return AblationAxis::Pyramid;
  if (s == "resolution") return AblationAxis::Resolution;
  if (s == "fraction") return AblationAxis::Fraction;
  throw ConfigError("ablate.axis must be bands, pyramid, resolution or fraction, got '" + s + "'");
}

struct ExperimentConfig {
  Task task = Task::Detection;
  BackboneKind backbone = BackboneKind::GfmGlobalAttn;
  std::optional<AdaptationStrategy> adaptation;  // nullopt: native band count
  PyramidKind pyramid = PyramidKind::GeneratedRandomInit;
  std::int64_t resolution_factor = 1;
  double train_fraction = 1.0;
  bool freeze_backbone = false;
  std::vector<std::uint64_t> seeds{1};
  std::int64_t epochs = 4;
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  MaeConfig mae;
  std::string checkpoint;          // backbone (MAE or fine-tuned) weights
  std::string pyramid_checkpoint;  // generator weights for generated_pretrained
  int eval_threads = 1;
  double small_max_area = 32.0 * 32.0, medium_max_area = 96.0 * 96.0;
  std::string axis = "pyramid";
  std::string output_dir = "runs";

  ExperimentConfig() {
    mae.epochs = 20;
    mae.batch_size = 8;
  }

  nlohmann::json to_json() const {
    const auto& sc = data.scene;
    std::vector<std::string> shapes;
    for (auto s : sc.shapes) shapes.push_back(s == ShapeFamily::Ellipse ? "ellipse" : "blob_polygon");
    return {
        {"task", to_string(task)},
        {"backbone", to_string(backbone)},
        {"adaptation", adaptation ? std::string(to_string(*adaptation)) : std::string("native")},
        {"pyramid", to_string(pyramid)},
        {"resolution_factor", resolution_factor},
        {"train_fraction", train_fraction},
        {"freeze_backbone", freeze_backbone},
        {"seeds", seeds},
        {"epochs", epochs},
        {"data",
         {{"train_dir", data.train_dir},
          {"test_dir", data.test_dir},
          {"train_scenes", data.train_scenes},
          {"test_scenes", data.test_scenes},
          {"bands", sc.bands},
          {"image_size", sc.image_size},
          {"min_objects", sc.min_objects},
          {"max_objects", sc.max_objects},
          {"min_size", sc.min_size},
          {"max_size", sc.max_size},
          {"num_classes", sc.num_classes},
          {"noise_std", sc.noise_std},
          {"background_amplitude", sc.background_amplitude},
          {"shapes", shapes},
          {"signatures", sc.signatures},
          {"background", sc.background},
          {"seed", sc.seed}}},
        {"model",
         {{"patch", model.patch},
          {"embed_dim", model.embed_dim},
          {"depth", model.depth},
          {"heads", model.heads},
          {"mlp_ratio", model.mlp_ratio},
          {"window_size", model.window_size},
          {"fpn_dim", model.fpn_dim},
          {"box_hidden", model.box_hidden},
          {"mask_channels", model.mask_channels},
          {"conv_widths", model.conv_widths}}},
        {"train",
         {{"batch_size", train.batch_size},
          {"lr", train.lr},
          {"weight_decay", train.weight_decay},
          {"warmup_steps", train.warmup_steps},
          {"min_lr_ratio", train.min_lr_ratio},
          {"grad_clip", train.grad_clip}}},
        {"mae",
         {{"mask_ratio", mae.mask_ratio},
          {"epochs", mae.epochs},
          {"batch_size", mae.batch_size},
          {"lr", mae.optim.lr},
          {"weight_decay", mae.optim.weight_decay},
          {"decoder_dim", mae.decoder_dim},
          {"decoder_depth", mae.decoder_depth},
          {"norm_pix_loss", mae.norm_pix_loss},
          {"resample_masks", mae.resample_masks}}},
        {"checkpoint", checkpoint},
        {"pyramid_checkpoint", pyramid_checkpoint},
        {"eval", {{"threads", eval_threads}, {"small_max_area", small_max_area}, {"medium_max_area", medium_max_area}}},
        {"ablate", {{"axis", axis}}},
        {"output_dir", output_dir}};
  }

  static ExperimentConfig from_json(const nlohmann::json& user);

  // Field-path validation; throws ConfigError.
  void validate() const {
    if (!(mae.mask_ratio >= 0.0 && mae.mask_ratio < 1.0))
      throw ConfigError("mae.mask_ratio must be in [0, 1), got " + std::to_string(mae.mask_ratio));
    mae.validate();
    if (resolution_factor != 1 && resolution_factor != 2 && resolution_factor != 4 && resolution_factor != 8)
      throw ConfigError("resolution_factor must be 1, 2, 4 or 8, got " + std::to_string(resolution_factor));
    if (train_fraction != 1.0 && train_fraction != 0.75 && train_fraction != 0.5 && train_fraction != 0.25)
      throw ConfigError("train_fraction must be 1.0, 0.75, 0.5 or 0.25, got " + std::to_string(train_fraction));
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (data.train_scenes < 1 || data.test_scenes < 1)
      throw ConfigError("data.train_scenes and data.test_scenes must be >= 1");
    if (data.scene.image_size % (8 * resolution_factor) != 0 || data.scene.image_size % 32 != 0)
      throw ConfigError("data.image_size must be a multiple of 32 and of 8 x resolution_factor");
    data.scene.validate();
    if (adaptation && data.scene.bands != 3)
      throw ConfigError("adaptation: " + std::string(to_string(*adaptation)) +
                        " applies to 3-band data; data.bands is " + std::to_string(data.scene.bands));
    if (eval_threads < 1) throw ConfigError("eval.threads must be >= 1");
    eval_config().validate();
    auto t = train;
    t.epochs = epochs;
    t.validate();
    parse_axis(axis);
    detector_config().validate();
  }

  // Band count the model's patch embedding consumes.
  std::int64_t model_bands() const {
    if (!adaptation) return data.scene.bands;
    return *adaptation == AdaptationStrategy::RetrainedPatchEmbed ? 3 : 6;
  }

  DetectorConfig detector_config() const {
    DetectorConfig d;
    d.task = task;
    d.backbone = backbone;
    d.pyramid = pyramid;
    d.encoder.in_chans = model_bands();
    d.encoder.patch = model.patch;
    d.encoder.embed_dim = model.embed_dim;
    d.encoder.depth = model.depth;
    d.encoder.heads = model.heads;
    d.encoder.mlp_ratio = model.mlp_ratio;
    d.encoder.window_size = model.window_size;
    d.conv.in_chans = model_bands();
    d.conv.widths = model.conv_widths;
    d.head.fpn_dim = model.fpn_dim;
    d.head.box_hidden = model.box_hidden;
    d.head.mask_channels = model.mask_channels;
    d.num_classes = data.scene.num_classes;
    d.image_size = data.scene.image_size;
    return d;
  }

  EncoderConfig encoder_config() const {
    auto d = detector_config();
    d.encoder.in_chans = data.scene.bands;
    return d.encoder;
  }

  EvalConfig eval_config() const {
    EvalConfig e;
    e.small_max_area = small_max_area;
    e.medium_max_area = medium_max_area;
    return e;
  }

  TrainConfig train_config() const {
    auto t = train;
    t.epochs = epochs;
    return t;
  }

  // Stable hash of everything that affects results (not seeds, threads or paths of outputs).
  std::string hash() const {
    auto j = to_json();
    j.erase("seeds");
    j.erase("output_dir");
    j["eval"].erase("threads");
    j.erase("ablate");
    const auto s = j.dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }
};

namespace detail {

inline void check_known_keys(const nlohmann::json& user, const nlohmann::json& schema,
                             const std::string& path) {
  if (!user.is_object()) throw ConfigError((path.empty() ? "config" : path) + ": expected an object");
  for (const auto& [k, v] : user.items()) {
    const auto p = path.empty() ? k : path + "." + k;
    if (!schema.contains(k)) throw ConfigError("unknown field " + p);
    if (schema[k].is_object()) check_known_keys(v, schema[k], p);
  }
}

template <class V>
V field(const nlohmann::json& j, const std::string& path) {
  const nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    node = &node->at(path.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  try {
    return node->get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(path + ": wrong type (" + std::string(node->type_name()) + ")");
  }
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& user) {
  const ExperimentConfig defaults;
  auto j = defaults.to_json();
  detail::check_known_keys(user, j, "");
  j.merge_patch(user);
  using detail::field;
  ExperimentConfig c;
  c.task = parse_task(field<std::string>(j, "task"));
  c.backbone = parse_backbone(field<std::string>(j, "backbone"));
  const auto ad = field<std::string>(j, "adaptation");
  if (ad == "native") c.adaptation.reset();
  else c.adaptation = parse_adaptation(ad);
  c.pyramid = parse_pyramid(field<std::string>(j, "pyramid"));
  c.resolution_factor = field<std::int64_t>(j, "resolution_factor");
  c.train_fraction = field<double>(j, "train_fraction");
  c.freeze_backbone = field<bool>(j, "freeze_backbone");
  c.seeds = field<std::vector<std::uint64_t>>(j, "seeds");
  c.epochs = field<std::int64_t>(j, "epochs");
  c.data.train_dir = field<std::string>(j, "data.train_dir");
  c.data.test_dir = field<std::string>(j, "data.test_dir");
  c.data.train_scenes = field<std::int64_t>(j, "data.train_scenes");
  c.data.test_scenes = field<std::int64_t>(j, "data.test_scenes");
  try {
    c.data.scene = SceneConfig::from_json(j.at("data"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("data: ") + e.what());
  }
  auto& m = c.model;
  m.patch = field<std::int64_t>(j, "model.patch");
  m.embed_dim = field<std::int64_t>(j, "model.embed_dim");
  m.depth = field<std::int64_t>(j, "model.depth");
  m.heads = field<std::int64_t>(j, "model.heads");
  m.mlp_ratio = field<double>(j, "model.mlp_ratio");
  m.window_size = field<std::int64_t>(j, "model.window_size");
  m.fpn_dim = field<std::int64_t>(j, "model.fpn_dim");
  m.box_hidden = field<std::int64_t>(j, "model.box_hidden");
  m.mask_channels = field<std::int64_t>(j, "model.mask_channels");
  m.conv_widths = field<std::vector<std::int64_t>>(j, "model.conv_widths");
  auto& t = c.train;
  t.batch_size = field<std::int64_t>(j, "train.batch_size");
  t.lr = field<double>(j, "train.lr");
  t.weight_decay = field<double>(j, "train.weight_decay");
  t.warmup_steps = field<std::int64_t>(j, "train.warmup_steps");
  t.min_lr_ratio = field<double>(j, "train.min_lr_ratio");
  t.grad_clip = field<double>(j, "train.grad_clip");
  auto& a = c.mae;
  a.mask_ratio = field<double>(j, "mae.mask_ratio");
  a.epochs = field<std::int64_t>(j, "mae.epochs");
  a.batch_size = field<std::int64_t>(j, "mae.batch_size");
  a.optim.lr = field<double>(j, "mae.lr");
  a.optim.weight_decay = field<double>(j, "mae.weight_decay");
  a.decoder_dim = field<std::int64_t>(j, "mae.decoder_dim");
  a.decoder_depth = field<std::int64_t>(j, "mae.decoder_depth");
  a.norm_pix_loss = field<bool>(j, "mae.norm_pix_loss");
  a.resample_masks = field<bool>(j, "mae.resample_masks");
  c.checkpoint = field<std::string>(j, "checkpoint");
  c.pyramid_checkpoint = field<std::string>(j, "pyramid_checkpoint");
  c.eval_threads = field<int>(j, "eval.threads");
  c.small_max_area = field<double>(j, "eval.small_max_area");
  c.medium_max_area = field<double>(j, "eval.medium_max_area");
  c.axis = field<std::string>(j, "ablate.axis");
  c.output_dir = field<std::string>(j, "output_dir");
  return c;
}

namespace detail {

inline nlohmann::json schema_of(const nlohmann::json& v, const std::string& path) {
  static const std::map<std::string, std::vector<std::string>> choices{
      {"task", {"detection", "instance_segmentation"}},
      {"backbone", {"gfm_global_attn", "vit_windowed", "conv_hierarchical"}},
      {"adaptation", {"native", "zero_padded", "channel_duplication", "retrained_patch_embed"}},
      {"pyramid", {"single_scale", "generated_random_init", "generated_pretrained", "fpn"}},
      {"ablate.axis", {"bands", "pyramid", "resolution", "fraction"}},
  };
  static const std::map<std::string, nlohmann::json> values{
      {"resolution_factor", {1, 2, 4, 8}},
      {"train_fraction", {1.0, 0.75, 0.5, 0.25}},
      {"data.bands", {3, 6}},
  };
  nlohmann::json s;
  if (v.is_object()) {
    s["type"] = "object";
    s["additionalProperties"] = false;
    for (const auto& [k, sub] : v.items()) s["properties"][k] = schema_of(sub, path.empty() ? k : path + "." + k);
  } else if (v.is_array()) {
    s["type"] = "array";
    if (!v.empty()) s["items"] = schema_of(v.front(), path + "[]");
    else if (path == "data.signatures") s["items"] = {{"type", "array"}, {"items", {{"type", "number"}}}, {"minItems", 6}, {"maxItems", 6}};
  } else if (v.is_boolean()) {
    s["type"] = "boolean";
  } else if (v.is_number_integer() || v.is_number_unsigned()) {
    s["type"] = "integer";
  } else if (v.is_number()) {
    s["type"] = "number";
  } else {
    s["type"] = "string";
  }
  if (auto it = choices.find(path); it != choices.end()) s["enum"] = it->second;
  if (auto it = values.find(path); it != values.end()) s["enum"] = it->second;
  return s;
}

}  // namespace detail

// JSON Schema (draft 2020-12) of the experiment config; every field is optional
// and defaults to ExperimentConfig{}.
inline nlohmann::json config_schema() {
  auto s = detail::schema_of(ExperimentConfig{}.to_json(), "");
  s["$schema"] = "https://json-schema.org/draft/2020-12/schema";
  s["title"] = "gfm experiment config";
  return s;
}

// Applies "a.b.c=value" to a JSON document. The value is parsed as JSON when
// possible and taken as a string otherwise.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' must have the form path=value");
  const auto path = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const auto key = path.substr(start, dot - start);
    if (key.empty()) throw ConfigError("override '" + assignment + "': empty path segment");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    node = &(*node)[key];
    if (!node->is_object() && !node->is_null())
      throw ConfigError("override '" + assignment + "': " + path.substr(0, dot) + " is not an object");
    start = dot + 1;
  }
}

inline nlohmann::json read_config_json(const std::string& path, const std::vector<std::string>& overrides) {
  nlohmann::json j = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config " + path + " at byte " + std::to_string(e.byte) + ": not valid JSON");
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  return j;
}

inline ExperimentConfig load_experiment_config(const std::string& path,
                                               const std::vector<std::string>& overrides) {
  auto c = ExperimentConfig::from_json(read_config_json(path, overrides));
  c.validate();
  return c;
}

// -------------------------------------------------------------------- data

struct PreparedData {
  std::vector<TrainSample> train, test;
  std::vector<std::int64_t> test_ids;
  std::vector<std::int64_t> train_indices;  // positions kept from the full training split
  BandStats stats;
  std::int64_t input_bands = 0;  // model-facing band count after adaptation
};

// Raw splits, either generated from the scene config or read from disk.
struct RawSplits {
  std::vector<Scene> train, test;
};

inline std::vector<Scene> generate_split(const SceneConfig& sc, std::int64_t count, std::int64_t offset) {
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) out.push_back(synth_scene(sc, offset + i));
  return out;
}

inline RawSplits load_raw_splits(const DataConfig& d) {
  RawSplits r;
  if (!d.train_dir.empty()) r.train = read_split(d.train_dir).scenes;
  else r.train = generate_split(d.scene, d.train_scenes, 0);
  if (!d.test_dir.empty()) r.test = read_split(d.test_dir).scenes;
  else r.test = generate_split(d.scene, d.test_scenes, kTestIndexOffset);
  if (r.train.empty() || r.test.empty()) throw UsageError("dataset: empty train or test split");
  return r;
}

// 3-band rasters are stored R, G, B; the embedding's first three bands are
// Blue, Green, Red.
inline Tensor<float> to_embedding_order(const Tensor<float>& x) {
  return x.dim(0) == 3 ? rgb_to_band_order(x) : x;
}

inline Tensor<float> adapt_input(const Tensor<float>& x, const std::optional<AdaptationStrategy>& a) {
  if (!a) return x;
  switch (*a) {
    case AdaptationStrategy::ZeroPadded: return adapt_zero_pad(x);
    case AdaptationStrategy::ChannelDuplication: return adapt_duplicate(x);
    case AdaptationStrategy::RetrainedPatchEmbed: return x;
  }
  return x;
}

// Fraction subsampling (nested per seed), resolution degradation followed by
// nearest upsampling back to the original grid, normalization with train-split
// statistics and band adaptation.
inline PreparedData prepare_data(const ExperimentConfig& cfg, const RawSplits& raw, std::uint64_t seed) {
  PreparedData p;
  p.train_indices = subsample_indices(static_cast<std::int64_t>(raw.train.size()), cfg.train_fraction, seed);
  const auto f = cfg.resolution_factor;
  auto transform = [&](const Scene& s) {
    Scene o = s;
    o.raster = to_embedding_order(s.raster);
    if (f > 1) o = upsample_scene(degrade_resolution(o, f), f);
    return o;
  };
  std::vector<Scene> train, test;
  for (auto i : p.train_indices) train.push_back(transform(raw.train[static_cast<std::size_t>(i)]));
  for (const auto& s : raw.test) test.push_back(transform(s));
  p.stats = band_stats(train);
  for (const auto& s : train)
    p.train.push_back({adapt_input(normalize_raster(s.raster, p.stats), cfg.adaptation), s.annotations});
  for (const auto& s : test) {
    p.test.push_back({adapt_input(normalize_raster(s.raster, p.stats), cfg.adaptation), s.annotations});
    p.test_ids.push_back(s.image_id);
  }
  p.input_bands = p.train.front().x.dim(0);
  return p;
}

// ----------------------------------------------------------------- weights

// Backbone weights from an MAE checkpoint ("encoder.*") or a detector
// checkpoint ("backbone.*"). The retrained strategy swaps in a fresh 3-band
// patch embedding after loading the 6-band weights.
template <class T>
LoadReport load_backbone(Detector<T>& det, const Checkpoint& ck,
                         const std::optional<AdaptationStrategy>& adaptation, std::uint64_t seed) {
  Checkpoint scoped;
  for (const auto& t : ck.tensors) {
    if (t.name.rfind("encoder.", 0) == 0) scoped.tensors.push_back({"backbone." + t.name.substr(8), t.tensor});
    else if (t.name.rfind("backbone.", 0) == 0) scoped.tensors.push_back(t);
  }
  const bool retrain = adaptation && *adaptation == AdaptationStrategy::RetrainedPatchEmbed;
  if (det.hierarchical()) {
    ParamList<T> ps;
    det.collect_backbone(ps);
    return load_into(ps, scoped, true);
  }
  const auto* k = scoped.find("backbone.patch_embed.weight");
  if (!k) throw LoadError("checkpoint has no patch embedding (backbone.patch_embed.weight)");
  const auto ck_bands = k->dim(1), model_bands = det.vit.embed.in_chans();
  if (retrain) {
    if (ck_bands != 6) throw LoadError("retrained patch embedding starts from a 6-band checkpoint, got " + std::to_string(ck_bands));
    auto ec = det.cfg.encoder;
    ec.in_chans = 6;
    Encoder<T> six(ec, Rng(seed).split("unused"));
    ParamList<T> ps;
    six.collect(ps, "backbone");
    auto rep = load_into(ps, scoped, true);
    six.embed = retrain_patch_embed(six.embed, 3, Rng(seed).split("retrain").next_u64());
    six.cfg.in_chans = 3;
    det.vit = six;
    det.cfg.encoder.in_chans = 3;
    return rep;
  }
  if (ck_bands != model_bands) throw AdaptationRequiredError(ck_bands, model_bands);
  ParamList<T> ps;
  det.collect_backbone(ps);
  return load_into(ps, scoped, true);
}

template <class T>
Checkpoint detector_checkpoint(const Detector<T>& det) {
  ParamList<T> ps;
  det.collect(ps);
  return make_checkpoint(ps);
}

// --------------------------------------------------------------------- runs

struct RunResult {
  std::string config_hash;
  std::uint64_t seed = 0;
  Task task = Task::Detection;
  EvalReport box;
  std::optional<EvalReport> mask;
  FinetuneResult train;
  double inference_seconds_per_image = 0;
  std::optional<bool> backbone_unchanged;  // set for frozen runs
  std::vector<std::string> parameter_names;
  Checkpoint weights;
};

// One fine-tuning run: build, optionally load weights, train, evaluate.
inline RunResult run_finetune(const ExperimentConfig& cfg, const RawSplits& raw, std::uint64_t seed,
                              const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (cfg.freeze_backbone && cfg.checkpoint.empty())
    throw UsageError("freeze_backbone requires a checkpoint (--checkpoint)");
  if (cfg.pyramid == PyramidKind::GeneratedPretrained && cfg.pyramid_checkpoint.empty())
    throw ConfigError("pyramid_checkpoint: generated_pretrained needs generator weights");
  const auto data = prepare_data(cfg, raw, seed);
  auto dc = cfg.detector_config();
  const bool retrain = cfg.adaptation && *cfg.adaptation == AdaptationStrategy::RetrainedPatchEmbed;
  if (retrain && !cfg.checkpoint.empty()) dc.encoder.in_chans = dc.conv.in_chans = 6;
  Detector<float> det(dc, Rng(seed).split("model"));
  if (!cfg.checkpoint.empty()) load_backbone(det, load_checkpoint(cfg.checkpoint), cfg.adaptation, seed);
  const auto expected = det.hierarchical() ? det.cfg.conv.in_chans : det.vit.embed.in_chans();
  if (expected != data.input_bands) throw AdaptationRequiredError(expected, data.input_bands);
  if (cfg.pyramid == PyramidKind::GeneratedPretrained)
    load_pretrained_pyramid(det.generator, load_checkpoint(cfg.pyramid_checkpoint), true);

  RunResult r;
  r.config_hash = cfg.hash();
  r.seed = seed;
  r.task = cfg.task;
  std::vector<std::vector<float>> before;
  ParamList<float> bb;
  det.collect_backbone(bb);
  if (cfg.freeze_backbone)
    for (const auto& p : bb) before.push_back(p.tensor.vec());
  r.train = finetune_loop(det, data.train, cfg.train_config(), cfg.freeze_backbone, seed, on_epoch);
  if (cfg.freeze_backbone) {
    bool same = true;
    for (std::size_t i = 0; i < bb.size(); ++i) same = same && bb[i].tensor.vec() == before[i];
    r.backbone_unchanged = same;
  }
  auto ev = evaluate_detector(det, data.test, data.test_ids, cfg.eval_threads, cfg.eval_config());
  r.box = ev.box;
  r.mask = ev.mask;
  r.inference_seconds_per_image = ev.seconds_per_image;
  r.weights = detector_checkpoint(det);
  for (const auto& t : r.weights.tensors) r.parameter_names.push_back(t.name);
  return r;
}

// ------------------------------------------------------------------ reports

inline std::string fmt_value(const std::optional<double>& v) { return format_metric(v, 6); }

inline std::string percent_delta(const std::optional<double>& v, const std::optional<double>& base) {
  if (!v || !base || *base == 0.0) return "N/A";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.2f%%", (*v - *base) / *base * 100.0);
  return buf;
}

inline const char* kMetricHeader = "mAP50,mAP,mAP_S,mAP_M,mAP_L";

inline std::string metric_cells(const EvalReport& r) {
  return fmt_value(r.map50()) + "," + fmt_value(r.map()) + "," + fmt_value(r.map_s()) + "," +
         fmt_value(r.map_m()) + "," + fmt_value(r.map_l());
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw UsageError("cannot write " + p.string());
  out << s;
}

// Scores a fine-tuned detector checkpoint on the test split. Normalization
// statistics come from the training split exactly as in fine-tuning.
inline EvalOutcome evaluate_checkpoint(const ExperimentConfig& cfg, const RawSplits& raw, std::uint64_t seed,
                                       const std::filesystem::path& ck_dir) {
  cfg.validate();
  const auto data = prepare_data(cfg, raw, seed);
  Detector<float> det(cfg.detector_config(), Rng(seed).split("model"));
  const auto ck = load_checkpoint(ck_dir);
  if (!det.hierarchical()) {
    if (const auto* k = ck.find("backbone.patch_embed.weight"); k && k->dim(1) != data.input_bands)
      throw AdaptationRequiredError(k->dim(1), data.input_bands);
  }
  ParamList<float> ps;
  det.collect(ps);
  load_into(ps, ck, true);
  return evaluate_detector(det, data.test, data.test_ids, cfg.eval_threads, cfg.eval_config());
}

// Scores externally produced detections against the test split.
inline EvalOutcome evaluate_predictions(const ExperimentConfig& cfg, const RawSplits& raw,
                                        const std::vector<Detection>& dets) {
  std::vector<InstanceAnnotation> gts;
  for (const auto& s : raw.test) gts.insert(gts.end(), s.annotations.begin(), s.annotations.end());
  EvalOutcome out;
  out.detections = dets;
  out.box = evaluate(dets, gts, cfg.eval_config(), cfg.eval_threads);
  if (cfg.task == Task::InstanceSegmentation) {
    EvalConfig mc = cfg.eval_config();
    mc.iou_kind = IouKind::Mask;
    out.mask = evaluate(dets, gts, mc, cfg.eval_threads);
  }
  out.seconds_per_image = 0;
  return out;
}

// COCO results array; records without an "id" are numbered by position.
inline std::vector<Detection> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open predictions file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error&) {
    throw FormatError("predictions " + path.string() + ": not valid JSON");
  }
  if (!j.is_array()) throw FormatError("predictions " + path.string() + ": expected a JSON array");
  std::vector<Detection> dets;
  std::int64_t next_id = 1;
  for (auto e : j) {
    if (e.is_object() && !e.contains("id")) e["id"] = next_id;
    ++next_id;
    dets.push_back(detection_from_json(e));
  }
  return dets;
}

inline void write_predictions(const std::filesystem::path& path, const std::vector<Detection>& dets) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& d : dets) j.push_back(detection_json(d));
  write_text(path, j.dump() + "\n");
}

inline std::string metrics_csv(const std::vector<RunResult>& runs) {
  std::string s = std::string("config_hash,seed,task,iou,") + kMetricHeader + "\n";
  for (const auto& r : runs) {
    s += r.config_hash + "," + std::to_string(r.seed) + "," + to_string(r.task) + ",box," + metric_cells(r.box) + "\n";
    if (r.mask) s += r.config_hash + "," + std::to_string(r.seed) + "," + to_string(r.task) + ",mask," + metric_cells(*r.mask) + "\n";
  }
  return s;
}

inline std::string loss_csv(const std::vector<RunResult>& runs) {
  std::string s;
  for (const auto& r : runs) {
    if (s.empty()) {
      s = "config_hash,seed,epoch,lr,total";
      if (!r.train.curve.empty())
        for (const auto& [name, _] : r.train.curve[0].terms) s += "," + name;
      s += "\n";
    }
    for (const auto& e : r.train.curve) {
      char buf[64];
      s += r.config_hash + "," + std::to_string(r.seed) + "," + std::to_string(e.epoch);
      std::snprintf(buf, sizeof buf, ",%.8g,%.8f", e.lr, e.total);
      s += buf;
      for (const auto& [_, v] : e.terms) {
        std::snprintf(buf, sizeof buf, ",%.8f", v);
        s += buf;
      }
      s += "\n";
    }
  }
  return s;
}

inline nlohmann::json run_json(const RunResult& r) {
  nlohmann::json j{{"config_hash", r.config_hash},
                   {"seed", r.seed},
                   {"task", to_string(r.task)},
                   {"box", report_json(r.box)},
                   {"timing",
                    {{"train_seconds_per_iteration", r.train.seconds_per_iteration},
                     {"inference_seconds_per_image", r.inference_seconds_per_image},
                     {"iterations", r.train.iterations}}}};
  if (r.mask) j["mask"] = report_json(*r.mask);
  if (r.backbone_unchanged) j["backbone_unchanged"] = *r.backbone_unchanged;
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& e : r.train.curve) curve.push_back({{"epoch", e.epoch}, {"total", e.total}});
  j["loss_curve"] = curve;
  return j;
}

inline std::string markdown_row(const std::vector<std::string>& cells) {
  std::string s = "|";
  for (const auto& c : cells) s += " " + c + " |";
  return s + "\n";
}

inline std::string markdown_table(const std::vector<std::string>& header,
                                  const std::vector<std::vector<std::string>>& rows) {
  std::string s = markdown_row(header);
  std::vector<std::string> rule(header.size(), "---");
  s += markdown_row(rule);
  for (const auto& r : rows) s += markdown_row(r);
  return s;
}

// Reading notes attached to every report.
inline std::vector<std::string> report_notes(const ExperimentConfig& cfg, bool pretrained_pyramid) {
  std::vector<std::string> notes{
      "Size strata use ground-truth area: box area for boxes, mask pixel count for masks; edges " +
      std::to_string(cfg.small_max_area) + " and " + std::to_string(cfg.medium_max_area) +
      " px. N/A marks a stratum with no ground truth."};
  if (pretrained_pyramid)
    notes.push_back(
        "Pretrained pyramid: no external generator weights are available, so the generator is taken from a detector "
        "fine-tuned on a disjoint synthetic corpus" +
        std::string(cfg.checkpoint.empty() ? " from a randomly initialised encoder."
                                           : ", starting from this repository's own MAE-pretrained encoder."));
  return notes;
}

inline std::string markdown_notes(const std::vector<std::string>& notes) {
  std::string s = "\n## Notes\n\n";
  for (const auto& n : notes) s += "- " + n + "\n";
  return s;
}

// Writes metrics.csv, loss_curve.csv, report.json and report.md for a set of runs.
inline void write_run_reports(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                              const std::vector<RunResult>& runs, const std::string& git_hash) {
  write_text(dir / "metrics.csv", metrics_csv(runs));
  write_text(dir / "loss_curve.csv", loss_csv(runs));
  nlohmann::json rep{{"config_hash", cfg.hash()},
                     {"config", cfg.to_json()},
                     {"provenance", {{"git", git_hash}, {"seeds", cfg.seeds}}},
                     {"notes", report_notes(cfg, cfg.pyramid == PyramidKind::GeneratedPretrained)},
                     {"runs", nlohmann::json::array()}};
  for (const auto& r : runs) rep["runs"].push_back(run_json(r));
  write_text(dir / "report.json", rep.dump(2) + "\n");
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : runs) {
    char t1[32], t2[32];
    std::snprintf(t1, sizeof t1, "%.4f", r.train.seconds_per_iteration);
    std::snprintf(t2, sizeof t2, "%.4f", r.inference_seconds_per_image);
    rows.push_back({std::to_string(r.seed), "box", format_metric(r.box.map50()), format_metric(r.box.map()),
                    format_metric(r.box.map_s()), format_metric(r.box.map_m()), format_metric(r.box.map_l()), t1, t2});
    if (r.mask)
      rows.push_back({std::to_string(r.seed), "mask", format_metric(r.mask->map50()), format_metric(r.mask->map()),
                      format_metric(r.mask->map_s()), format_metric(r.mask->map_m()),
                      format_metric(r.mask->map_l()), "", ""});
  }
  write_text(dir / "report.md",
             "# Run report\n\nconfig `" + cfg.hash() + "`, task " + to_string(cfg.task) + ", git " + git_hash + "\n\n" +
                 markdown_table({"seed", "iou", "mAP50", "mAP", "mAP_S", "mAP_M", "mAP_L",
                                 "train s/iter", "inference s/image"},
                                rows) +
                 markdown_notes(report_notes(cfg, cfg.pyramid == PyramidKind::GeneratedPretrained)));
}

// ---------------------------------------------------------------- ablations

struct AblationCell {
  std::string value;  // axis value label
  std::uint64_t seed = 0;
  std::string config_hash;
  std::optional<RunResult> run;  // nullopt when the run failed
  std::string error;
};

struct AblationResult {
  AblationAxis axis = AblationAxis::Pyramid;
  std::vector<std::string> values;  // row/column order
  std::vector<std::string> labels;  // display names
  std::vector<std::uint64_t> seeds;
  std::vector<AblationCell> cells;  // value-major

  bool any_failed() const {
    for (const auto& c : cells)
      if (!c.run) return true;
    return false;
  }
  const AblationCell& cell(std::size_t v, std::size_t s) const { return cells[v * seeds.size() + s]; }
  std::optional<double> map50(std::size_t v, std::size_t s) const {
    const auto& c = cell(v, s);
    return c.run ? c.run->box.map50() : std::nullopt;
  }
};

struct AxisPlan {
  std::vector<std::string> values, labels;
  std::function<void(ExperimentConfig&, const std::string&)> apply;
};

inline AxisPlan axis_plan(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::Bands:
      return {{"zero_padded", "channel_duplication", "retrained_patch_embed"},
              {"Zero-Padded", "Channel Duplication", "Retrained"},
              [](ExperimentConfig& c, const std::string& v) {
                c.data.scene.bands = 3;
                c.adaptation = parse_adaptation(v);
              }};
    case AblationAxis::Pyramid:
      return {{"single_scale", "generated_random_init", "generated_pretrained"},
              {"Single-scale", "Generated (random init)", "Generated (pretrained)"},
              [](ExperimentConfig& c, const std::string& v) { c.pyramid = parse_pyramid(v); }};
    case AblationAxis::Resolution:
      return {{"1", "2", "4", "8"},
              {"Original", "1/2", "1/4", "1/8"},
              [](ExperimentConfig& c, const std::string& v) { c.resolution_factor = std::stoll(v); }};
    case AblationAxis::Fraction:
      return {{"1.0", "0.75", "0.5", "0.25"},
              {"100%", "75%", "50%", "25%"},
              [](ExperimentConfig& c, const std::string& v) { c.train_fraction = std::stod(v); }};
  }
  throw ConfigError("unknown ablation axis");
}

// Generator weights for generated_pretrained runs: the pyramid of a detector
// fine-tuned on a synthetic corpus disjoint from the experiment's data.
inline std::filesystem::path pretrain_pyramid_source(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  const auto ck_dir = dir / "checkpoint";
  if (std::filesystem::exists(ck_dir / "manifest.json")) return ck_dir;
  auto src = cfg;
  src.pyramid = PyramidKind::GeneratedRandomInit;
  src.data.train_dir.clear();
  src.data.test_dir.clear();
  src.data.scene.seed = cfg.data.scene.seed + 7919;
  src.data.scene.signatures.clear();
  src.train_fraction = 1.0;
  src.resolution_factor = 1;
  src.freeze_backbone = false;
  const auto r = run_finetune(src, load_raw_splits(src.data), cfg.seeds.front());
  Checkpoint pyr;
  for (const auto& t : r.weights.tensors)
    if (t.name.rfind("pyramid.", 0) == 0) pyr.tensors.push_back(t);
  save_checkpoint(pyr, ck_dir);
  return ck_dir;
}

// Cartesian product of axis values and seeds. Failed runs are recorded, not
// rethrown.
inline AblationResult run_ablation(const ExperimentConfig& base, AblationAxis axis,
                                   const std::filesystem::path& out_dir,
                                   const std::function<void(const AblationCell&)>& on_cell = {}) {
  base.validate();
  const auto plan = axis_plan(axis);
  if (axis == AblationAxis::Bands && base.checkpoint.empty())
    throw UsageError("bands ablation needs a 6-band pretrained checkpoint (--checkpoint)");
  if (axis == AblationAxis::Pyramid && base.backbone == BackboneKind::ConvHierarchical)
    throw ConfigError("ablate.axis: pyramid generation applies to single-scale backbones only");
  AblationResult res;
  res.axis = axis;
  res.values = plan.values;
  res.labels = plan.labels;
  res.seeds = base.seeds;
  std::optional<RawSplits> raw;
  for (const auto& v : plan.values) {
    auto cfg = base;
    plan.apply(cfg, v);
    for (auto seed : base.seeds) {
      AblationCell cell;
      cell.value = v;
      cell.seed = seed;
      try {
        if (cfg.pyramid == PyramidKind::GeneratedPretrained && cfg.pyramid_checkpoint.empty())
          cfg.pyramid_checkpoint = pretrain_pyramid_source(cfg, out_dir / "pyramid_source").string();
        cfg.validate();
        cell.config_hash = cfg.hash();
        // bands change the raw data; other axes transform one shared copy
        RawSplits local;
        const RawSplits* use = nullptr;
        if (axis == AblationAxis::Bands) {
          local = load_raw_splits(cfg.data);
          use = &local;
        } else {
          if (!raw) raw = load_raw_splits(cfg.data);
          use = &*raw;
        }
        cell.run = run_finetune(cfg, *use, seed);
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
      if (on_cell) on_cell(cell);
      res.cells.push_back(std::move(cell));
    }
  }
  return res;
}

inline std::string ablation_runs_csv(const AblationResult& a) {
  std::string s = std::string("axis,value,seed,config_hash,status,iou,") + kMetricHeader + "\n";
  for (const auto& c : a.cells) {
    const auto head = to_string(a.axis) + "," + c.value + "," + std::to_string(c.seed) + "," + c.config_hash;
    if (!c.run) {
      s += head + ",FAILED,box,FAILED,FAILED,FAILED,FAILED,FAILED\n";
      continue;
    }
    s += head + ",ok,box," + metric_cells(c.run->box) + "\n";
    if (c.run->mask) s += head + ",ok,mask," + metric_cells(*c.run->mask) + "\n";
  }
  return s;
}

// Mean over seeds of one metric for axis value v; nullopt when any run failed
// or the metric is N/A for every seed.
inline std::optional<double> seed_mean(const AblationResult& a, std::size_t v,
                                       const std::function<std::optional<double>(const RunResult&)>& metric,
                                       bool* failed = nullptr) {
  double sum = 0;
  int n = 0;
  for (std::size_t s = 0; s < a.seeds.size(); ++s) {
    const auto& c = a.cell(v, s);
    if (!c.run) {
      if (failed) *failed = true;
      return std::nullopt;
    }
    if (const auto m = metric(*c.run)) sum += *m, ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

struct MetricColumn {
  std::string name;
  std::function<std::optional<double>(const RunResult&)> get;
};

inline std::vector<MetricColumn> metric_columns(bool with_mask) {
  std::vector<MetricColumn> cols{
      {"mAP50", [](const RunResult& r) { return r.box.map50(); }},
      {"mAP", [](const RunResult& r) { return r.box.map(); }},
      {"mAP_S", [](const RunResult& r) { return r.box.map_s(); }},
      {"mAP_M", [](const RunResult& r) { return r.box.map_m(); }},
      {"mAP_L", [](const RunResult& r) { return r.box.map_l(); }}};
  if (with_mask) {
    cols.push_back({"mask_mAP50", [](const RunResult& r) { return r.mask ? r.mask->map50() : std::nullopt; }});
    cols.push_back({"mask_mAP", [](const RunResult& r) { return r.mask ? r.mask->map() : std::nullopt; }});
  }
  return cols;
}

// Table shaped like the corresponding experiment: one row per axis value, or
// for resolution one row per metric with a percent-change column per factor.
inline std::vector<std::vector<std::string>> ablation_table(const AblationResult& a, bool with_mask) {
  const auto cols = metric_columns(with_mask);
  std::vector<std::vector<std::string>> t;
  auto cell_text = [&](std::size_t v, const MetricColumn& m) {
    bool failed = false;
    const auto x = seed_mean(a, v, m.get, &failed);
    return failed ? std::string("FAILED") : format_metric(x);
  };
  if (a.axis == AblationAxis::Resolution) {
    std::vector<std::string> head{"metric", a.labels[0]};
    for (std::size_t v = 1; v < a.values.size(); ++v) {
      head.push_back(a.labels[v]);
      head.push_back("change " + a.labels[v]);
    }
    t.push_back(head);
    for (const auto& m : cols) {
      bool f0 = false;
      const auto base = seed_mean(a, 0, m.get, &f0);
      std::vector<std::string> row{m.name, cell_text(0, m)};
      for (std::size_t v = 1; v < a.values.size(); ++v) {
        bool fv = false;
        const auto x = seed_mean(a, v, m.get, &fv);
        row.push_back(cell_text(v, m));
        row.push_back(f0 || fv ? "FAILED" : percent_delta(x, base));
      }
      t.push_back(row);
    }
    return t;
  }
  std::vector<std::string> head{to_string(a.axis)};
  for (const auto& m : cols) head.push_back(m.name);
  t.push_back(head);
  for (std::size_t v = 0; v < a.values.size(); ++v) {
    std::vector<std::string> row{a.labels[v]};
    for (const auto& m : cols) row.push_back(cell_text(v, m));
    t.push_back(row);
  }
  return t;
}

inline std::string csv_join(const std::vector<std::vector<std::string>>& rows) {
  std::string s;
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) s += (i ? "," : "") + r[i];
    s += "\n";
  }
  return s;
}

inline void write_ablation_reports(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                                   const AblationResult& a, const std::string& git_hash) {
  const bool mask = cfg.task == Task::InstanceSegmentation;
  const auto name = "ablation_" + to_string(a.axis);
  const auto table = ablation_table(a, mask);
  write_text(dir / (name + ".csv"), csv_join(table));
  write_text(dir / (name + "_runs.csv"), ablation_runs_csv(a));
  std::vector<RunResult> ok;
  for (const auto& c : a.cells)
    if (c.run) ok.push_back(*c.run);
  write_text(dir / (name + "_loss_curve.csv"), loss_csv(ok));

  const auto notes = report_notes(cfg, a.axis == AblationAxis::Pyramid || cfg.pyramid == PyramidKind::GeneratedPretrained);
  nlohmann::json rep{{"axis", to_string(a.axis)},
                     {"config_hash", cfg.hash()},
                     {"config", cfg.to_json()},
                     {"provenance", {{"git", git_hash}, {"seeds", a.seeds}}},
                     {"notes", notes},
                     {"runs", nlohmann::json::array()}};
  std::vector<std::vector<std::string>> timing;
  for (const auto& c : a.cells) {
    nlohmann::json j{{"value", c.value}, {"seed", c.seed}, {"config_hash", c.config_hash}};
    if (c.run) {
      j["result"] = run_json(*c.run);
      char t1[32], t2[32];
      std::snprintf(t1, sizeof t1, "%.4f", c.run->train.seconds_per_iteration);
      std::snprintf(t2, sizeof t2, "%.4f", c.run->inference_seconds_per_image);
      timing.push_back({c.value, std::to_string(c.seed), t1, t2});
    } else {
      j["error"] = c.error;
      timing.push_back({c.value, std::to_string(c.seed), "FAILED", "FAILED"});
    }
    rep["runs"].push_back(j);
  }
  write_text(dir / "report.json", rep.dump(2) + "\n");
  std::vector<std::vector<std::string>> body(table.begin() + 1, table.end());
  std::string md = "# Ablation: " + to_string(a.axis) + "\n\nconfig `" + cfg.hash() + "`, seeds";
  for (auto s : a.seeds) md += " " + std::to_string(s);
  md += ", git " + git_hash + ". Values are means over seeds.\n\n" + markdown_table(table[0], body) +
        "\n## Timing\n\n" + markdown_table({"value", "seed", "train s/iter", "inference s/image"}, timing) +
        markdown_notes(notes);
  write_text(dir / (name + ".md"), md);
}

// ---------------------------------------------------------------- pretraining

struct PretrainResult {
  std::string config_hash;
  std::uint64_t seed = 0;
  PretrainCurve curve;
  Checkpoint weights;
  double seconds = 0;
};

inline PretrainResult run_pretrain(const ExperimentConfig& cfg, const RawSplits& raw, std::uint64_t seed,
                                   const std::function<void(std::int64_t, double)>& on_epoch = {}) {
  cfg.validate();
  std::vector<Scene> train;
  for (const auto& s : raw.train) train.push_back({s.image_id, to_embedding_order(s.raster), s.annotations});
  const auto st = band_stats(train);
  std::vector<Tensor<float>> xs;
  for (const auto& s : train) xs.push_back(normalize_raster(s.raster, st));
  auto ec = cfg.encoder_config();
  ec.in_chans = xs.front().dim(0);
  MaeModel<float> model(ec, cfg.mae, Rng(seed).split("mae"));
  PretrainResult r;
  r.config_hash = cfg.hash();
  r.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  r.curve = pretrain_loop(model, xs, seed, on_epoch);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ParamList<float> ps;
  model.collect(ps);
  r.weights = make_checkpoint(ps);
  return r;
}

inline std::string pretrain_csv(const PretrainResult& r) {
  std::string s = "config_hash,seed,epoch,loss\n";
  for (std::size_t e = 0; e < r.curve.epoch_loss.size(); ++e) {
    char buf[48];
    std::snprintf(buf, sizeof buf, ",%zu,%.8f\n", e + 1, r.curve.epoch_loss[e]);
    s += r.config_hash + "," + std::to_string(r.seed) + buf;
  }
  return s;
}

}  // namespace gfm
