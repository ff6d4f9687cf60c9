#pragma once

// Two-stage detector: anchors and region proposals over a feature pyramid,
// RoI Align, a box branch (classification + class-agnostic refinement) and an
// optional mask branch, with target assignment and the training losses.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "gfm/band_adapt.hpp"
#include "gfm/box.hpp"
#include "gfm/datagen.hpp"
#include "gfm/encoder.hpp"
#include "gfm/metrics.hpp"
#include "gfm/pyramid.hpp"

namespace gfm {

// ------------------------------------------------------------------- anchors

struct AnchorConfig {
  std::vector<double> ratios{0.5, 1.0, 2.0};  // height / width
  double size_per_stride = 2.0;               // anchor side = size_per_stride * stride

  void validate() const {
    if (ratios.empty()) throw ConfigError("anchors.ratios must not be empty");
    for (double r : ratios)
      if (!(r > 0)) throw ConfigError("anchors.ratios must be positive");
    if (!(size_per_stride > 0)) throw ConfigError("anchors.size_per_stride must be positive");
  }
};

struct LevelSpec {
  std::int64_t stride = 4, height = 0, width = 0;
  std::vector<double> sizes;  // square-anchor sides at this level
};

struct AnchorSet {
  std::vector<Box> boxes;                  // level-major, then (a, i, j)
  std::vector<LevelSpec> levels;
  std::vector<std::int64_t> offsets;       // first anchor of each level
  std::int64_t per_position = 0;

  std::size_t size() const { return boxes.size(); }
};

inline Box anchor_box(double cx, double cy, double size, double ratio) {
  const double w = size / std::sqrt(ratio), h = size * std::sqrt(ratio);
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

inline AnchorSet generate_anchors(const std::vector<LevelSpec>& levels, const AnchorConfig& cfg) {
  cfg.validate();
  if (levels.empty()) throw ConfigError("anchors: no feature levels");
  AnchorSet set;
  set.levels = levels;
  set.per_position = static_cast<std::int64_t>(levels[0].sizes.size() * cfg.ratios.size());
  for (const auto& lv : levels) {
    if (lv.sizes.empty()) throw ConfigError("anchors: level without sizes");
    if (static_cast<std::int64_t>(lv.sizes.size() * cfg.ratios.size()) != set.per_position)
      throw ConfigError("anchors: every level needs the same number of anchors per position");
    set.offsets.push_back(static_cast<std::int64_t>(set.boxes.size()));
    const double s = static_cast<double>(lv.stride);
    for (double size : lv.sizes)
      for (double r : cfg.ratios)
        for (std::int64_t i = 0; i < lv.height; ++i)
          for (std::int64_t j = 0; j < lv.width; ++j)
            set.boxes.push_back(anchor_box((j + 0.5) * s, (i + 0.5) * s, size, r));
  }
  return set;
}

template <class T>
std::vector<LevelSpec> level_specs(const FeatureLevels<T>& f, const AnchorConfig& cfg) {
  std::vector<LevelSpec> out;
  for (std::size_t i = 0; i < f.size(); ++i)
    out.push_back({f.strides[i], f.maps[i].dim(1), f.maps[i].dim(2),
                   {cfg.size_per_stride * static_cast<double>(f.strides[i])}});
  // A single level carries the sizes a full pyramid would spread over 4..32.
  if (out.size() == 1) {
    out[0].sizes.clear();
    for (std::int64_t s : {4, 8, 16, 32}) out[0].sizes.push_back(cfg.size_per_stride * s);
  }
  return out;
}

// ---------------------------------------------------------------- box coding

using Deltas = std::array<double, 4>;

struct BoxCoder {
  double wx = 1, wy = 1, ww = 1, wh = 1;
  double clamp = std::log(1000.0 / 16.0);

  Deltas encode(const Box& ref, const Box& gt) const {
    return {wx * (gt.cx() - ref.cx()) / ref.width(), wy * (gt.cy() - ref.cy()) / ref.height(),
            ww * std::log(gt.width() / ref.width()), wh * std::log(gt.height() / ref.height())};
  }

  Box decode(const Box& ref, const Deltas& d) const {
    for (double v : d)
      if (!std::isfinite(v)) throw NumericError("decode_boxes: non-finite delta");
    const double dx = d[0] / wx, dy = d[1] / wy;
    const double dw = std::min(d[2] / ww, clamp), dh = std::min(d[3] / wh, clamp);
    const double cx = ref.cx() + dx * ref.width(), cy = ref.cy() + dy * ref.height();
    const double w = ref.width() * std::exp(dw), h = ref.height() * std::exp(dh);
    return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
  }
};

inline const BoxCoder& rpn_coder() {
  static const BoxCoder c{1, 1, 1, 1};
  return c;
}
inline const BoxCoder& head_coder() {
  static const BoxCoder c{10, 10, 5, 5};
  return c;
}

// Decodes and clips to a width x height image.
inline std::vector<Box> decode_boxes(const std::vector<Box>& refs, const std::vector<Deltas>& d,
                                     double width, double height,
                                     const BoxCoder& coder = rpn_coder()) {
  if (refs.size() != d.size()) throw DimensionError("decode_boxes: count mismatch");
  std::vector<Box> out;
  out.reserve(refs.size());
  for (std::size_t i = 0; i < refs.size(); ++i)
    out.push_back(coder.decode(refs[i], d[i]).clipped(width, height));
  return out;
}

// ----------------------------------------------------------------------- nms

// Indices ordered by descending score; equal scores keep input order.
inline std::vector<std::int64_t> score_order(const std::vector<double>& scores) {
  std::vector<std::int64_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::int64_t a, std::int64_t b) { return scores[a] > scores[b]; });
  return order;
}

// Greedy suppression of boxes overlapping a kept box by IoU > threshold.
// Returns kept indices in descending-score order.
inline std::vector<std::int64_t> nms(const std::vector<Box>& boxes,
                                     const std::vector<double>& scores, double iou_threshold) {
  if (boxes.size() != scores.size()) throw DimensionError("nms: count mismatch");
  for (double s : scores)
    if (!std::isfinite(s)) throw NumericError("nms: non-finite score");
  const auto order = score_order(scores);
  std::vector<char> dead(boxes.size(), 0);
  std::vector<std::int64_t> keep;
  for (std::size_t a = 0; a < order.size(); ++a) {
    const auto i = order[a];
    if (dead[i]) continue;
    keep.push_back(i);
    for (std::size_t b = a + 1; b < order.size(); ++b) {
      const auto j = order[b];
      if (!dead[j] && iou(boxes[i], boxes[j]) > iou_threshold) dead[j] = 1;
    }
  }
  return keep;
}

// NMS applied independently per class; result sorted by descending score.
inline std::vector<std::int64_t> batched_nms(const std::vector<Box>& boxes,
                                             const std::vector<double>& scores,
                                             const std::vector<std::int64_t>& classes,
                                             double iou_threshold) {
  std::vector<std::int64_t> keep;
  std::vector<std::int64_t> cls(classes);
  std::sort(cls.begin(), cls.end());
  cls.erase(std::unique(cls.begin(), cls.end()), cls.end());
  for (auto c : cls) {
    std::vector<std::int64_t> idx;
    std::vector<Box> b;
    std::vector<double> s;
    for (std::size_t i = 0; i < boxes.size(); ++i)
      if (classes[i] == c) {
        idx.push_back(static_cast<std::int64_t>(i));
        b.push_back(boxes[i]);
        s.push_back(scores[i]);
      }
    for (auto k : nms(b, s, iou_threshold)) keep.push_back(idx[k]);
  }
  std::stable_sort(keep.begin(), keep.end(), [&](std::int64_t a, std::int64_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  });
  return keep;
}

// ----------------------------------------------------------------------- rpn

template <class T>
struct RpnOutput {
  Tensor<T> logits;  // [N, 1], anchor order
  Tensor<T> deltas;  // [N, 4]
};

template <class T>
struct Rpn {
  Conv2d<T> conv, cls, box;
  std::int64_t per_position = 3;

  Rpn() = default;
  Rpn(std::int64_t F, std::int64_t A, Rng rng)
      : conv(F, F, 3, 1, 1, rng.split("conv")),
        cls(F, A, 1, 1, 0, rng.split("cls"), 0.01),
        box(F, 4 * A, 1, 1, 0, rng.split("box"), 0.01),
        per_position(A) {}

  RpnOutput<T> operator()(const FeatureLevels<T>& f) const {
    std::vector<Tensor<T>> ls, ds;
    const auto A = per_position;
    for (const auto& m : f.maps) {
      auto h = relu(conv(m));
      auto l = cls(h), d = box(h);
      const auto HW = m.dim(1) * m.dim(2);
      ls.push_back(reshape(l, {A * HW, 1}));
      // channel 4a+k at position p -> row (a, p), column k
      std::vector<std::int64_t> idx(static_cast<std::size_t>(A * HW * 4));
      for (std::int64_t a = 0; a < A; ++a)
        for (std::int64_t p = 0; p < HW; ++p)
          for (std::int64_t k = 0; k < 4; ++k) idx[(a * HW + p) * 4 + k] = (4 * a + k) * HW + p;
      ds.push_back(reshape(gather(d, idx), {A * HW, 4}));
    }
    return {concat_rows(ls), concat_rows(ds)};
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    conv.collect(out, prefix + ".conv");
    cls.collect(out, prefix + ".cls");
    box.collect(out, prefix + ".box");
  }
};

template <class T>
RpnOutput<T> rpn_forward(const Rpn<T>& rpn, const FeatureLevels<T>& f) {
  return rpn(f);
}

// ------------------------------------------------------------ target assignment

enum class Stage { Rpn, Head };

struct Assignment {
  std::vector<std::int64_t> labels;   // rpn: 1/0/-1; head: class id or 0
  std::vector<std::int64_t> matched;  // gt index or -1
  std::vector<Deltas> targets;        // regression targets (valid where matched >= 0)
};

struct AssignConfig {
  double rpn_fg = 0.7, rpn_bg = 0.3, head_fg = 0.5;
};

inline Assignment assign_targets(const std::vector<Box>& refs,
                                 const std::vector<InstanceAnnotation>& gts, Stage stage,
                                 const AssignConfig& cfg = {}) {
  const auto n = refs.size();
  Assignment a;
  a.labels.assign(n, 0);
  a.matched.assign(n, -1);
  a.targets.assign(n, Deltas{0, 0, 0, 0});
  if (gts.empty()) return a;
  for (const auto& g : gts)
    if (!g.box.valid()) throw InputError("assign_targets: ground-truth box without area");
  std::vector<double> best(n, 0.0);
  std::vector<std::int64_t> arg(n, -1);
  std::vector<double> gt_best(gts.size(), 0.0);
  std::vector<std::vector<double>> ious(n, std::vector<double>(gts.size()));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(refs[i], gts[g].box);
      ious[i][g] = v;
      if (v > best[i]) {
        best[i] = v;
        arg[i] = static_cast<std::int64_t>(g);
      }
      gt_best[g] = std::max(gt_best[g], v);
    }
  const BoxCoder& coder = stage == Stage::Rpn ? rpn_coder() : head_coder();
  for (std::size_t i = 0; i < n; ++i) {
    bool pos;
    if (stage == Stage::Rpn) {
      pos = best[i] >= cfg.rpn_fg;
      a.labels[i] = pos ? 1 : (best[i] < cfg.rpn_bg ? 0 : -1);
      if (!pos)  // the best anchor for some gt is positive regardless of IoU
        for (std::size_t g = 0; g < gts.size(); ++g)
          if (gt_best[g] > 0 && ious[i][g] == gt_best[g]) {
            pos = true;
            arg[i] = static_cast<std::int64_t>(g);
            a.labels[i] = 1;
            break;
          }
    } else {
      pos = best[i] >= cfg.head_fg;
      a.labels[i] = pos ? gts[arg[i]].class_id : 0;
    }
    if (pos) {
      a.matched[i] = arg[i];
      a.targets[i] = coder.encode(refs[i], gts[arg[i]].box);
    }
  }
  return a;
}

// Random subset of positive (label > 0) and negative (label == 0) indices,
// at most `batch` in total with at most `batch * pos_fraction` positives.
inline std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>> sample_labels(
    const std::vector<std::int64_t>& labels, std::int64_t batch, double pos_fraction, Rng& rng) {
  std::vector<std::int64_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] > 0) pos.push_back(static_cast<std::int64_t>(i));
    if (labels[i] == 0) neg.push_back(static_cast<std::int64_t>(i));
  }
  rng.shuffle(pos);
  rng.shuffle(neg);
  const auto npos = std::min<std::int64_t>(static_cast<std::int64_t>(pos.size()),
                                           static_cast<std::int64_t>(batch * pos_fraction));
  const auto nneg = std::min<std::int64_t>(static_cast<std::int64_t>(neg.size()), batch - npos);
  pos.resize(static_cast<std::size_t>(npos));
  neg.resize(static_cast<std::size_t>(nneg));
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());
  return {pos, neg};
}

// ------------------------------------------------------------------ roi heads

// Pyramid level for a box: floor(k0 + log2(sqrt(area) / canonical)),
// clamped to the available strides.
inline std::size_t roi_level(const Box& b, const std::vector<std::int64_t>& strides,
                             double canonical, int k0 = 4) {
  if (strides.size() == 1) return 0;
  const double k = std::floor(k0 + std::log2(std::sqrt(b.area()) / canonical + 1e-8));
  const double lo = std::log2(static_cast<double>(strides.front()));
  const double hi = std::log2(static_cast<double>(strides.back()));
  const auto kk = std::clamp(k, lo, hi);
  for (std::size_t i = 0; i < strides.size(); ++i)
    if (std::log2(static_cast<double>(strides[i])) >= kk) return i;
  return strides.size() - 1;
}

// [R, F*out*out] features for boxes, each pooled from its assigned level.
template <class T>
Tensor<T> roi_features(const FeatureLevels<T>& f, const std::vector<Box>& boxes, std::int64_t out,
                       double canonical) {
  if (boxes.empty()) throw EmptyRoiError("roi_features: no boxes");
  std::vector<std::vector<std::int64_t>> by_level(f.size());
  for (std::size_t i = 0; i < boxes.size(); ++i)
    by_level[roi_level(boxes[i], f.strides, canonical)].push_back(static_cast<std::int64_t>(i));
  std::vector<Tensor<T>> parts;
  std::vector<std::int64_t> where(boxes.size());
  std::int64_t row = 0;
  const auto width = f.channels() * out * out;
  for (std::size_t l = 0; l < f.size(); ++l) {
    if (by_level[l].empty()) continue;
    std::vector<Box> bl;
    for (auto i : by_level[l]) {
      bl.push_back(boxes[i]);
      where[i] = row++;
    }
    auto pooled = roi_align(f.maps[l], bl,
                            {out, out, 1.0 / static_cast<double>(f.strides[l]), 2});
    parts.push_back(reshape(pooled, {static_cast<std::int64_t>(bl.size()), width}));
  }
  auto all = parts.size() == 1 ? parts[0] : concat_rows(parts);
  bool identity = true;
  for (std::size_t i = 0; i < where.size(); ++i) identity = identity && where[i] == static_cast<std::int64_t>(i);
  return identity ? all : gather_rows(all, where);
}

template <class T>
struct BoxHead {
  Linear<T> fc1, fc2, cls, box;

  BoxHead() = default;
  BoxHead(std::int64_t in, std::int64_t hidden, std::int64_t num_classes, Rng rng)
      : fc1(in, hidden, rng.split("fc1"), std::sqrt(1.0 / static_cast<double>(in))),
        fc2(hidden, hidden, rng.split("fc2"), std::sqrt(1.0 / static_cast<double>(hidden))),
        cls(hidden, num_classes + 1, rng.split("cls"), 0.01),
        box(hidden, 4, rng.split("box"), 0.001) {}

  // (class logits [R, K+1], class-agnostic deltas [R, 4])
  std::pair<Tensor<T>, Tensor<T>> operator()(const Tensor<T>& feats) const {
    auto h = relu(fc2(relu(fc1(feats))));
    return {cls(h), box(h)};
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
    cls.collect(out, prefix + ".cls");
    box.collect(out, prefix + ".box");
  }
};

template <class T>
std::pair<Tensor<T>, Tensor<T>> box_head_forward(const BoxHead<T>& h, const Tensor<T>& feats) {
  return h(feats);
}

template <class T>
struct MaskHead {
  std::vector<Conv2d<T>> convs;
  ConvTranspose2d<T> up;
  Conv2d<T> pred;
  std::int64_t in_channels = 0, pool = 14;

  MaskHead() = default;
  MaskHead(std::int64_t F, std::int64_t channels, std::int64_t num_classes, std::int64_t pool_,
           Rng rng)
      : in_channels(F), pool(pool_) {
    std::int64_t c = F;
    for (int i = 0; i < 4; ++i) {
      convs.emplace_back(c, channels, 3, 1, 1, rng.split("conv").split(static_cast<std::uint64_t>(i)));
      c = channels;
    }
    up = ConvTranspose2d<T>(channels, channels, 2, 2, rng.split("up"));
    pred = Conv2d<T>(channels, num_classes, 1, 1, 0, rng.split("pred"), 0.001);
  }

  std::int64_t out_size() const { return 2 * pool; }

  // feats [R, F*pool*pool] -> per-RoI logits [K, 2*pool, 2*pool], flattened to
  // [R, K * (2*pool)^2].
  Tensor<T> operator()(const Tensor<T>& feats) const {
    const auto R = feats.dim(0);
    std::vector<Tensor<T>> rows;
    for (std::int64_t r = 0; r < R; ++r) {
      auto h = reshape(slice_rows(feats, r, 1), {in_channels, pool, pool});
      for (const auto& c : convs) h = relu(c(h));
      h = relu(up(h));
      auto y = pred(h);
      rows.push_back(reshape(y, {1, static_cast<std::int64_t>(y.numel())}));
    }
    return concat_rows(rows);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < convs.size(); ++i) convs[i].collect(out, prefix + ".conv" + std::to_string(i));
    up.collect(out, prefix + ".up");
    pred.collect(out, prefix + ".pred");
  }
};

template <class T>
Tensor<T> mask_head_forward(const MaskHead<T>& h, const Tensor<T>& feats) {
  return h(feats);
}

// Columns of one class channel from mask logits [R, K*S*S]: row r takes
// channel classes[r]-1.
template <class T>
Tensor<T> select_mask_channel(const Tensor<T>& logits, const std::vector<std::int64_t>& classes,
                              std::int64_t cells) {
  const auto R = logits.dim(0), width = logits.dim(1);
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(R * cells));
  for (std::int64_t r = 0; r < R; ++r)
    for (std::int64_t q = 0; q < cells; ++q) idx.push_back(r * width + (classes[r] - 1) * cells + q);
  return reshape(gather(logits, idx), {R, cells});
}

// Binary mask target for `roi` on an S x S grid: RoI Align of the gt mask,
// thresholded at 0.5.
inline std::vector<double> mask_target(const BinaryMask& gt, const Box& roi, std::int64_t S) {
  std::vector<double> plane(gt.bits.begin(), gt.bits.end());
  auto m = Tensor<double>::from({1, gt.height, gt.width}, std::move(plane));
  auto pooled = roi_align(m, {roi}, {S, S, 1.0, 2});
  std::vector<double> out(static_cast<std::size_t>(S * S));
  for (std::int64_t i = 0; i < S * S; ++i) out[i] = pooled[i] >= 0.5 ? 1.0 : 0.0;
  return out;
}

// ------------------------------------------------------------------- losses

enum class Task { Detection, InstanceSegmentation };

inline std::string to_string(Task t) {
  return t == Task::Detection ? "detection" : "instance_segmentation";
}
inline Task parse_task(const std::string& s) {
  if (s == "detection") return Task::Detection;
  if (s == "instance_segmentation") return Task::InstanceSegmentation;
  throw ConfigError("task must be detection or instance_segmentation, got '" + s + "'");
}

template <class T>
struct TaskOutputs {
  Tensor<T> rpn_logits;  // sampled anchors, [Na, 1]
  Tensor<T> rpn_deltas;  // positive anchors, [Pa, 4] (may be empty)
  Tensor<T> cls_logits;  // sampled RoIs, [Nr, K+1]
  Tensor<T> box_deltas;  // positive RoIs, [Pr, 4] (may be empty)
  Tensor<T> mask_logits; // positive RoIs, gt-class channel, [Pm, S*S] (may be empty)
};

struct TaskTargets {
  std::vector<double> rpn_labels;
  std::vector<double> rpn_deltas;
  std::vector<std::int64_t> cls_labels;
  std::vector<double> box_deltas;
  std::vector<double> mask_targets;
};

template <class T>
struct LossTerms {
  Tensor<T> total;
  std::vector<std::pair<std::string, double>> terms;

  double value(const std::string& name) const {
    for (const auto& [k, v] : terms)
      if (k == name) return v;
    throw UsageError("loss term '" + name + "' not present");
  }
  bool has(const std::string& name) const {
    for (const auto& t : terms)
      if (t.first == name) return true;
    return false;
  }
};

namespace detail {

template <class T>
std::vector<T> as(const std::vector<double>& v) {
  return std::vector<T>(v.begin(), v.end());
}

}  // namespace detail

// RPN BCE + smooth-L1, head CE + smooth-L1, and (segmentation only) per-pixel
// BCE on positive RoIs. Box terms are normalized by the sampled count.
template <class T>
LossTerms<T> task_losses(const TaskOutputs<T>& out, const TaskTargets& tg, Task task) {
  LossTerms<T> r;
  std::vector<Tensor<T>> parts;
  auto push = [&](const std::string& name, const Tensor<T>& t) {
    parts.push_back(t);
    r.terms.push_back({name, static_cast<double>(t.item())});
  };
  const auto zero = [] { return Tensor<T>::zeros({1}); };
  push("rpn_cls", bce_with_logits(out.rpn_logits, detail::as<T>(tg.rpn_labels)));
  const auto na = static_cast<T>(std::max<std::size_t>(tg.rpn_labels.size(), 1));
  push("rpn_box", tg.rpn_deltas.empty()
                      ? zero()
                      : scale(smooth_l1(out.rpn_deltas, detail::as<T>(tg.rpn_deltas), T(1)), T(1) / na));
  push("cls", cross_entropy(out.cls_logits, tg.cls_labels));
  const auto nr = static_cast<T>(std::max<std::size_t>(tg.cls_labels.size(), 1));
  push("box", tg.box_deltas.empty()
                  ? zero()
                  : scale(smooth_l1(out.box_deltas, detail::as<T>(tg.box_deltas), T(1)), T(1) / nr));
  if (task == Task::InstanceSegmentation)
    push("mask", tg.mask_targets.empty()
                     ? zero()
                     : bce_with_logits(out.mask_logits, detail::as<T>(tg.mask_targets)));
  r.total = add_all(parts);
  return r;
}

// ----------------------------------------------------------------- detector

enum class BackboneKind { GfmGlobalAttn, VitWindowed, ConvHierarchical };
enum class PyramidKind { SingleScale, GeneratedRandomInit, GeneratedPretrained, Fpn };

inline std::string to_string(BackboneKind b) {
  switch (b) {
    case BackboneKind::GfmGlobalAttn: return "gfm_global_attn";
    case BackboneKind::VitWindowed: return "vit_windowed";
    case BackboneKind::ConvHierarchical: return "conv_hierarchical";
  }
  return "?";
}
inline BackboneKind parse_backbone(const std::string& s) {
  if (s == "gfm_global_attn") return BackboneKind::GfmGlobalAttn;
  if (s == "vit_windowed") return BackboneKind::VitWindowed;
  if (s == "conv_hierarchical") return BackboneKind::ConvHierarchical;
  throw ConfigError("backbone must be gfm_global_attn, vit_windowed or conv_hierarchical, got '" +
                    s + "'");
}
inline std::string to_string(PyramidKind p) {
  switch (p) {
    case PyramidKind::SingleScale: return "single_scale";
    case PyramidKind::GeneratedRandomInit: return "generated_random_init";
    case PyramidKind::GeneratedPretrained: return "generated_pretrained";
    case PyramidKind::Fpn: return "fpn";
  }
  return "?";
}
inline PyramidKind parse_pyramid(const std::string& s) {
  if (s == "single_scale") return PyramidKind::SingleScale;
  if (s == "generated_random_init") return PyramidKind::GeneratedRandomInit;
  if (s == "generated_pretrained") return PyramidKind::GeneratedPretrained;
  if (s == "fpn") return PyramidKind::Fpn;
  throw ConfigError("pyramid must be single_scale, generated_random_init, generated_pretrained or "
                    "fpn, got '" + s + "'");
}

struct HeadConfig {
  std::int64_t fpn_dim = 32;
  AnchorConfig anchors;
  AssignConfig assign;
  std::int64_t rpn_pre_nms = 256, rpn_post_nms = 64;
  double rpn_nms = 0.7;
  std::int64_t rpn_batch = 128;
  double rpn_pos_fraction = 0.5;
  std::int64_t roi_batch = 64;
  double roi_pos_fraction = 0.25;
  std::int64_t box_pool = 7, box_hidden = 128;
  std::int64_t mask_pool = 14, mask_channels = 16, mask_max_rois = 8;
  double score_threshold = 0.05, nms_threshold = 0.5;
  std::int64_t max_detections = 100;
  double mask_threshold = 0.5;
  double canonical_size = 64;  // box side mapped to the stride-16 level

  void validate() const {
    anchors.validate();
    if (fpn_dim < 1) throw ConfigError("head.fpn_dim must be positive");
    if (rpn_pre_nms < 1 || rpn_post_nms < 1) throw ConfigError("head.rpn_pre_nms/rpn_post_nms must be positive");
    if (rpn_batch < 1 || roi_batch < 1) throw ConfigError("head.rpn_batch/roi_batch must be positive");
    if (!(rpn_pos_fraction > 0 && rpn_pos_fraction <= 1) || !(roi_pos_fraction > 0 && roi_pos_fraction <= 1))
      throw ConfigError("head positive fractions must be in (0, 1]");
    if (box_pool < 1 || mask_pool < 1 || box_hidden < 1 || mask_channels < 1 || mask_max_rois < 1)
      throw ConfigError("head pooling sizes and widths must be positive");
    if (!(score_threshold >= 0 && score_threshold < 1)) throw ConfigError("head.score_threshold must be in [0, 1)");
    if (max_detections < 1) throw ConfigError("head.max_detections must be positive");
  }
};

struct DetectorConfig {
  Task task = Task::Detection;
  BackboneKind backbone = BackboneKind::GfmGlobalAttn;
  PyramidKind pyramid = PyramidKind::GeneratedRandomInit;
  EncoderConfig encoder;
  ConvBackboneConfig conv;
  HeadConfig head;
  std::int64_t num_classes = 2;
  std::int64_t image_size = 64;

  void validate() const {
    if (num_classes < 1) throw ConfigError("data.num_classes must be >= 1");
    const bool hier = backbone == BackboneKind::ConvHierarchical;
    if (pyramid == PyramidKind::Fpn && !hier)
      throw ConfigError(
          "pyramid: fpn requires the conv_hierarchical backbone; hierarchical backbones adopt an "
          "FPN while single-scale transformer backbones use the multi-scale generation network");
    if (pyramid != PyramidKind::Fpn && hier)
      throw ConfigError(
          "pyramid: " + to_string(pyramid) +
          " requires a single-scale backbone; hierarchical backbones adopt an FPN while "
          "single-scale transformer backbones use the multi-scale generation network");
    if (hier) conv.validate();
    else encoder.validate();
    head.validate();
  }
};

template <class T>
struct Detector {
  DetectorConfig cfg;
  Encoder<T> vit;
  ConvBackbone<T> cnn;
  SingleScaleNeck<T> single;
  SimplePyramid<T> generator;
  Fpn<T> fpn;
  Rpn<T> rpn;
  BoxHead<T> box_head;
  std::optional<MaskHead<T>> mask_head;

  Detector() = default;
  Detector(const DetectorConfig& c, Rng rng) : cfg(c) {
    cfg.validate();
    const auto F = c.head.fpn_dim;
    if (c.backbone == BackboneKind::ConvHierarchical) {
      cnn = ConvBackbone<T>(c.conv, rng.split("backbone"));
      fpn = Fpn<T>(c.conv.widths, F, rng.split("pyramid"));
    } else {
      auto ec = c.encoder;
      ec.attention = c.backbone == BackboneKind::VitWindowed ? AttentionKind::Windowed
                                                             : AttentionKind::Global;
      cfg.encoder = ec;
      vit = Encoder<T>(ec, rng.split("backbone"));
      if (c.pyramid == PyramidKind::SingleScale)
        single = SingleScaleNeck<T>(ec.embed_dim, F, ec.patch, rng.split("pyramid"));
      else
        generator = SimplePyramid<T>(ec.embed_dim, F, ec.patch, rng.split("pyramid"));
    }
    const auto per_level = c.pyramid == PyramidKind::SingleScale ? 4 : 1;
    const auto A = static_cast<std::int64_t>(per_level * c.head.anchors.ratios.size());
    rpn = Rpn<T>(F, A, rng.split("rpn"));
    box_head = BoxHead<T>(F * c.head.box_pool * c.head.box_pool, c.head.box_hidden, c.num_classes,
                          rng.split("box_head"));
    if (c.task == Task::InstanceSegmentation)
      mask_head = MaskHead<T>(F, c.head.mask_channels, c.num_classes, c.head.mask_pool,
                              rng.split("mask_head"));
  }

  bool hierarchical() const { return cfg.backbone == BackboneKind::ConvHierarchical; }

  FeatureLevels<T> features(const Tensor<T>& x) const {
    const auto H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
    if (hierarchical()) return fpn(cnn(x));
    auto m = vit.encode(x);
    if (cfg.pyramid == PyramidKind::SingleScale) return single(m, H, W);
    return generator(m, H, W);
  }

  void collect_backbone(ParamList<T>& out) const {
    if (hierarchical()) cnn.collect(out, "backbone");
    else vit.collect(out, "backbone");
  }

  void collect_heads(ParamList<T>& out) const {
    if (hierarchical()) fpn.collect(out, "pyramid");
    else if (cfg.pyramid == PyramidKind::SingleScale) single.collect(out, "pyramid");
    else generator.collect(out, "pyramid");
    rpn.collect(out, "rpn");
    box_head.collect(out, "roi_heads.box");
    if (mask_head) mask_head->collect(out, "roi_heads.mask");
  }

  void collect(ParamList<T>& out) const {
    collect_backbone(out);
    collect_heads(out);
  }
};

// Top-scoring anchors decoded, clipped and NMS-filtered into proposals.
template <class T>
std::vector<Box> select_proposals(const RpnOutput<T>& out, const AnchorSet& anchors,
                                  const HeadConfig& h, double width, double height) {
  const auto N = static_cast<std::int64_t>(anchors.size());
  std::vector<double> scores(static_cast<std::size_t>(N));
  for (std::int64_t i = 0; i < N; ++i) scores[i] = static_cast<double>(out.logits[i]);
  auto order = score_order(scores);
  order.resize(static_cast<std::size_t>(std::min<std::int64_t>(N, h.rpn_pre_nms)));
  std::vector<Box> cand;
  std::vector<double> cs;
  for (auto i : order) {
    Deltas d{};
    for (int k = 0; k < 4; ++k) d[k] = static_cast<double>(out.deltas[i * 4 + k]);
    const Box b = rpn_coder().decode(anchors.boxes[i], d).clipped(width, height);
    if (b.width() < 1e-3 || b.height() < 1e-3) continue;
    cand.push_back(b);
    cs.push_back(scores[i]);
  }
  std::vector<Box> props;
  for (auto k : nms(cand, cs, h.rpn_nms)) {
    if (static_cast<std::int64_t>(props.size()) >= h.rpn_post_nms) break;
    props.push_back(cand[k]);
  }
  return props;
}

template <class T>
std::vector<T> to_targets(const std::vector<Deltas>& all, const std::vector<std::int64_t>& idx) {
  std::vector<T> out;
  for (auto i : idx)
    for (double v : all[i]) out.push_back(static_cast<T>(v));
  return out;
}

// Forward pass plus target assignment and losses for one scene. The sampling
// seed fixes anchor/RoI sampling; `fixed_proposals` bypasses proposal
// selection (used to freeze the discrete choices in gradient checks).
template <class T>
LossTerms<T> detector_losses(const Detector<T>& det, const Tensor<T>& x,
                             const std::vector<InstanceAnnotation>& gts, std::uint64_t sample_seed,
                             const std::vector<Box>* fixed_proposals = nullptr) {
  const auto& h = det.cfg.head;
  const double W = static_cast<double>(x.dim(x.rank() - 1));
  const double H = static_cast<double>(x.dim(x.rank() - 2));
  Rng rng(sample_seed);
  auto feats = det.features(x);
  const auto anchors = generate_anchors(level_specs(feats, h.anchors), h.anchors);
  auto rout = det.rpn(feats);

  TaskOutputs<T> out;
  TaskTargets tg;
  const auto ra = assign_targets(anchors.boxes, gts, Stage::Rpn, h.assign);
  auto rs = rng.split("rpn_sample");
  auto [apos, aneg] = sample_labels(ra.labels, h.rpn_batch, h.rpn_pos_fraction, rs);
  std::vector<std::int64_t> asampled(apos);
  asampled.insert(asampled.end(), aneg.begin(), aneg.end());
  out.rpn_logits = gather_rows(rout.logits, asampled);
  for (auto i : asampled) tg.rpn_labels.push_back(ra.labels[i] > 0 ? 1.0 : 0.0);
  if (!apos.empty()) {
    out.rpn_deltas = gather_rows(rout.deltas, apos);
    for (double v : to_targets<double>(ra.targets, apos)) tg.rpn_deltas.push_back(v);
  }

  std::vector<Box> props;
  if (fixed_proposals) props = *fixed_proposals;
  else {
    NoGradGuard ng;
    props = select_proposals(rout, anchors, h, W, H);
  }
  for (const auto& g : gts) props.push_back(g.box);
  if (props.empty()) props.push_back(Box{0, 0, W, H});
  const auto pa = assign_targets(props, gts, Stage::Head, h.assign);
  auto ps = rng.split("roi_sample");
  auto [rpos, rneg] = sample_labels(pa.labels, h.roi_batch, h.roi_pos_fraction, ps);
  std::vector<std::int64_t> rsampled(rpos);
  rsampled.insert(rsampled.end(), rneg.begin(), rneg.end());
  std::vector<Box> rois;
  for (auto i : rsampled) {
    rois.push_back(props[i]);
    tg.cls_labels.push_back(pa.labels[i]);
  }
  auto [cls, deltas] = det.box_head(roi_features(feats, rois, h.box_pool, h.canonical_size));
  out.cls_logits = cls;
  if (!rpos.empty()) {
    std::vector<std::int64_t> rows(rpos.size());
    std::iota(rows.begin(), rows.end(), 0);  // positives lead the sampled list
    out.box_deltas = gather_rows(deltas, rows);
    for (double v : to_targets<double>(pa.targets, rpos)) tg.box_deltas.push_back(v);
  }

  if (det.mask_head && !rpos.empty()) {
    const auto S = det.mask_head->out_size();
    const auto m = std::min<std::int64_t>(static_cast<std::int64_t>(rpos.size()), h.mask_max_rois);
    std::vector<Box> mrois;
    std::vector<std::int64_t> mcls;
    for (std::int64_t k = 0; k < m; ++k) {
      const auto i = rpos[k];
      mrois.push_back(props[i]);
      mcls.push_back(pa.labels[i]);
      for (double v : mask_target(gts[pa.matched[i]].mask, props[i], S)) tg.mask_targets.push_back(v);
    }
    auto logits = (*det.mask_head)(roi_features(feats, mrois, h.mask_pool, h.canonical_size));
    out.mask_logits = select_mask_channel(logits, mcls, S * S);
  }
  return task_losses(out, tg, det.cfg.task);
}

// Pastes an S x S probability grid into `box` of an H x W image by bilinear
// resampling at pixel centres, thresholded at `thr`.
inline BinaryMask paste_mask(const std::vector<double>& grid, std::int64_t S, const Box& box,
                             std::int64_t H, std::int64_t W, double thr) {
  BinaryMask m(H, W);
  const auto r0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(box.y1)));
  const auto r1 = std::min<std::int64_t>(H, static_cast<std::int64_t>(std::ceil(box.y2)));
  const auto c0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(box.x1)));
  const auto c1 = std::min<std::int64_t>(W, static_cast<std::int64_t>(std::ceil(box.x2)));
  const double sy = S / box.height(), sx = S / box.width();
  for (std::int64_t r = r0; r < r1; ++r)
    for (std::int64_t c = c0; c < c1; ++c) {
      const double y = r + 0.5, x = c + 0.5;
      if (y < box.y1 || y > box.y2 || x < box.x1 || x > box.x2) continue;
      const double v = bilinear_sample<double>(grid, S, S, (y - box.y1) * sy - 0.5,
                                               (x - box.x1) * sx - 0.5);
      if (v >= thr) m.at(r, c) = 1;
    }
  return m;
}

template <class T>
std::vector<Detection> predict(const Detector<T>& det, const Tensor<T>& x, std::int64_t image_id) {
  NoGradGuard ng;
  const auto& h = det.cfg.head;
  const auto Hi = x.dim(x.rank() - 2), Wi = x.dim(x.rank() - 1);
  const double W = static_cast<double>(Wi), H = static_cast<double>(Hi);
  auto feats = det.features(x);
  const auto anchors = generate_anchors(level_specs(feats, h.anchors), h.anchors);
  const auto props = select_proposals(det.rpn(feats), anchors, h, W, H);
  if (props.empty()) return {};
  auto [cls, deltas] = det.box_head(roi_features(feats, props, h.box_pool, h.canonical_size));
  const auto probs = softmax(cls);
  const auto K1 = probs.dim(1);
  std::vector<Box> boxes;
  std::vector<double> scores;
  std::vector<std::int64_t> classes;
  for (std::size_t r = 0; r < props.size(); ++r) {
    Deltas d{};
    for (int k = 0; k < 4; ++k) d[k] = static_cast<double>(deltas[r * 4 + k]);
    const Box b = head_coder().decode(props[r], d).clipped(W, H);
    if (b.width() < 1e-3 || b.height() < 1e-3) continue;
    for (std::int64_t k = 1; k < K1; ++k) {
      const double s = static_cast<double>(probs[r * K1 + k]);
      if (s <= h.score_threshold) continue;
      boxes.push_back(b);
      scores.push_back(s);
      classes.push_back(k);
    }
  }
  auto keep = batched_nms(boxes, scores, classes, h.nms_threshold);
  if (static_cast<std::int64_t>(keep.size()) > h.max_detections)
    keep.resize(static_cast<std::size_t>(h.max_detections));
  std::vector<Detection> dets;
  for (auto i : keep) {
    Detection d;
    d.image_id = image_id;
    d.class_id = classes[i];
    d.box = boxes[i];
    d.score = scores[i];
    dets.push_back(std::move(d));
  }
  if (det.mask_head && !dets.empty()) {
    std::vector<Box> bx;
    std::vector<std::int64_t> cl;
    for (const auto& d : dets) {
      bx.push_back(d.box);
      cl.push_back(d.class_id);
    }
    const auto S = det.mask_head->out_size();
    auto logits = select_mask_channel(
        (*det.mask_head)(roi_features(feats, bx, h.mask_pool, h.canonical_size)), cl, S * S);
    auto prob = sigmoid(logits);
    for (std::size_t k = 0; k < dets.size(); ++k) {
      std::vector<double> grid(static_cast<std::size_t>(S * S));
      for (std::int64_t q = 0; q < S * S; ++q) grid[q] = static_cast<double>(prob[k * S * S + q]);
      dets[k].mask = paste_mask(grid, S, dets[k].box, Hi, Wi, h.mask_threshold);
    }
  }
  return dets;
}

}  // namespace gfm
