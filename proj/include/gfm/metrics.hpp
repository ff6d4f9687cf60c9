#pragma once

// COCO-style evaluation: box and mask IoU, greedy matching, 101-point AP,
// mAP at 0.5 and over 0.50:0.05:0.95, and size-stratified mAP.

#include <algorithm>
#include <array>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfm/box.hpp"
#include "gfm/datagen.hpp"
#include "gfm/error.hpp"

namespace gfm {

struct Detection {
  std::int64_t id = 0;
  std::int64_t image_id = 0;
  std::int64_t class_id = 1;
  Box box;
  double score = 0;
  BinaryMask mask;  // empty for detection-only models
};

enum class IouKind { Box, Mask };
enum class Stratum { All = 0, Small = 1, Medium = 2, Large = 3 };
inline constexpr std::array<Stratum, 4> kStrata{Stratum::All, Stratum::Small, Stratum::Medium,
                                                Stratum::Large};

inline std::string to_string(IouKind k) { return k == IouKind::Box ? "box" : "mask"; }
inline std::string to_string(Stratum s) {
  constexpr const char* names[] = {"all", "small", "medium", "large"};
  return names[static_cast<int>(s)];
}

// 0.50, 0.55, ..., 0.95
inline std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int k = 50; k <= 95; k += 5) t.push_back(k / 100.0);
  return t;
}

struct EvalConfig {
  std::vector<double> iou_thresholds = coco_thresholds();
  IouKind iou_kind = IouKind::Box;
  double small_max_area = 32.0 * 32.0;   // small: area <= 1024
  double medium_max_area = 96.0 * 96.0;  // medium: 1024 < area <= 9216

  void validate() const {
    if (iou_thresholds.empty()) throw ConfigError("eval.iou_thresholds: empty");
    for (std::size_t i = 0; i < iou_thresholds.size(); ++i) {
      const double t = iou_thresholds[i];
      if (!(t > 0.0 && t <= 1.0))
        throw ConfigError("eval.iou_thresholds: " + std::to_string(t) + " outside (0, 1]");
      if (i > 0 && !(t > iou_thresholds[i - 1]))
        throw ConfigError("eval.iou_thresholds: not strictly increasing");
    }
    if (!(small_max_area < medium_max_area)) throw ConfigError("eval: strata boundaries out of order");
  }

  Stratum stratum_of(double area) const {
    if (area <= small_max_area) return Stratum::Small;
    if (area <= medium_max_area) return Stratum::Medium;
    return Stratum::Large;
  }
  bool in_stratum(double area, Stratum s) const { return s == Stratum::All || stratum_of(area) == s; }
};

// |a and b| / |a or b|.
inline double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.height != b.height || a.width != b.width)
    throw DimensionError("mask_iou: " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                         " vs " + std::to_string(b.height) + "x" + std::to_string(b.width));
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    inter += a.bits[i] & b.bits[i];
    uni += a.bits[i] | b.bits[i];
  }
  if (uni == 0) throw UndefinedIouError("mask_iou: both masks are empty");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline double object_area(const InstanceAnnotation& g, IouKind k) {
  return k == IouKind::Box ? g.box.area() : g.mask_area();
}
inline double object_area(const Detection& d, IouKind k) {
  return k == IouKind::Box ? d.box.area() : static_cast<double>(d.mask.count());
}

inline double pair_iou(const Detection& d, const InstanceAnnotation& g, IouKind k) {
  if (k == IouKind::Box) return iou(d.box, g.box);
  if (d.mask.bits.empty())
    throw InputError("detection " + std::to_string(d.id) + " has no mask for mask evaluation");
  return mask_iou(d.mask, g.mask);
}

enum MatchFlag : std::int8_t { kFalsePositive = 0, kTruePositive = 1, kIgnored = -1 };

struct MatchResult {
  std::vector<std::int8_t> flags;         // per detection
  std::vector<std::int64_t> matched_gt;   // gt index or -1
};

// Greedy matching of score-sorted detections of one class in one image.
// ious[d][g]; ignore_gt marks ground truths outside the evaluated stratum.
// A detection takes the highest-IoU unmatched non-ignored gt with IoU >= thr;
// failing that, a detection overlapping an unmatched ignored gt is ignored.
inline MatchResult match_detections(const std::vector<std::vector<double>>& ious,
                                    const std::vector<bool>& ignore_gt, double thr) {
  const auto G = ignore_gt.size();
  MatchResult r;
  r.flags.assign(ious.size(), kFalsePositive);
  r.matched_gt.assign(ious.size(), -1);
  std::vector<bool> taken(G, false);
  for (std::size_t d = 0; d < ious.size(); ++d) {
    for (int pass = 0; pass < 2 && r.matched_gt[d] < 0; ++pass) {
      const bool want_ignored = pass == 1;
      double best = thr;
      std::int64_t bi = -1;
      for (std::size_t g = 0; g < G; ++g) {
        if (taken[g] || ignore_gt[g] != want_ignored) continue;
        if (ious[d][g] >= best && (bi < 0 || ious[d][g] > best)) {
          best = ious[d][g];
          bi = static_cast<std::int64_t>(g);
        }
      }
      if (bi >= 0) {
        taken[bi] = true;
        r.matched_gt[d] = bi;
        r.flags[d] = want_ignored ? kIgnored : kTruePositive;
      }
    }
  }
  return r;
}

// 101-point interpolated AP over a score-sorted TP/FP sequence (ignored
// entries already removed). nullopt when there is nothing to score.
inline std::optional<double> average_precision(const std::vector<std::int8_t>& tp,
                                               std::int64_t n_gt) {
  if (n_gt < 0) throw InputError("average_precision: negative gt count");
  if (n_gt == 0) return tp.empty() ? std::nullopt : std::optional<double>(0.0);
  const auto n = tp.size();
  std::vector<double> prec(n), rec(n);
  std::int64_t ctp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ctp += tp[i] == kTruePositive;
    prec[i] = static_cast<double>(ctp) / static_cast<double>(i + 1);
    rec[i] = static_cast<double>(ctp) / static_cast<double>(n_gt);
  }
  for (std::size_t i = n; i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double sum = 0;
  std::size_t i = 0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    while (i < n && rec[i] < r) ++i;
    if (i < n) sum += prec[i];
  }
  return sum / 101.0;
}

struct StratumResult {
  std::int64_t num_gt = 0;
  std::vector<std::optional<double>> per_threshold;  // class-mean AP per threshold
  std::optional<double> mean;                        // over thresholds; nullopt = N/A
};

struct EvalReport {
  IouKind kind = IouKind::Box;
  std::vector<double> thresholds;
  std::array<StratumResult, 4> strata;

  std::optional<double> at(double thr, Stratum s = Stratum::All) const {
    for (std::size_t i = 0; i < thresholds.size(); ++i)
      if (thresholds[i] == thr) return strata[static_cast<int>(s)].per_threshold[i];
    return std::nullopt;
  }
  std::optional<double> map50() const { return at(0.5); }
  std::optional<double> map() const { return strata[0].mean; }
  std::optional<double> map_s() const { return strata[1].mean; }
  std::optional<double> map_m() const { return strata[2].mean; }
  std::optional<double> map_l() const { return strata[3].mean; }
};

inline std::string format_metric(const std::optional<double>& v, int digits = 4) {
  if (!v) return "N/A";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, *v);
  return buf;
}

inline nlohmann::json metric_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json report_json(const EvalReport& r) {
  return {{"iou_kind", to_string(r.kind)},
          {"mAP50", metric_json(r.map50())},
          {"mAP", metric_json(r.map())},
          {"mAP_S", metric_json(r.map_s())},
          {"mAP_M", metric_json(r.map_m())},
          {"mAP_L", metric_json(r.map_l())}};
}

namespace detail {

// Per-image matching outcome for every (stratum, threshold) pair.
struct ImageMatches {
  // flags[s][t][k] for the image's detections k (in the image's sorted order)
  std::array<std::vector<std::vector<std::int8_t>>, 4> flags;
  std::vector<std::size_t> dets;  // global detection indices, sorted by (-score, id)
};

inline bool score_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

inline ImageMatches match_image(const std::vector<Detection>& dets,
                                const std::vector<std::size_t>& det_idx,
                                const std::vector<InstanceAnnotation>& gts,
                                const std::vector<std::size_t>& gt_idx, const EvalConfig& cfg) {
  ImageMatches m;
  m.dets = det_idx;
  std::sort(m.dets.begin(), m.dets.end(),
            [&](std::size_t a, std::size_t b) { return score_before(dets[a], dets[b]); });
  const auto T = cfg.iou_thresholds.size();
  for (auto s : kStrata)
    m.flags[static_cast<int>(s)].assign(T, std::vector<std::int8_t>(m.dets.size(), kFalsePositive));

  std::set<std::int64_t> classes;
  for (auto i : m.dets) classes.insert(dets[i].class_id);
  for (const auto cls : classes) {
    std::vector<std::size_t> dk, gk;  // positions in m.dets, indices into gts
    for (std::size_t k = 0; k < m.dets.size(); ++k)
      if (dets[m.dets[k]].class_id == cls) dk.push_back(k);
    for (auto g : gt_idx)
      if (gts[g].class_id == cls) gk.push_back(g);
    std::vector<std::vector<double>> ious(dk.size(), std::vector<double>(gk.size()));
    for (std::size_t a = 0; a < dk.size(); ++a)
      for (std::size_t b = 0; b < gk.size(); ++b)
        ious[a][b] = pair_iou(dets[m.dets[dk[a]]], gts[gk[b]], cfg.iou_kind);
    for (auto s : kStrata) {
      std::vector<bool> ignore(gk.size());
      for (std::size_t b = 0; b < gk.size(); ++b)
        ignore[b] = !cfg.in_stratum(object_area(gts[gk[b]], cfg.iou_kind), s);
      for (std::size_t t = 0; t < T; ++t) {
        const auto r = match_detections(ious, ignore, cfg.iou_thresholds[t]);
        auto& out = m.flags[static_cast<int>(s)][t];
        for (std::size_t a = 0; a < dk.size(); ++a) {
          auto f = r.flags[a];
          if (f == kFalsePositive &&
              !cfg.in_stratum(object_area(dets[m.dets[dk[a]]], cfg.iou_kind), s))
            f = kIgnored;
          out[dk[a]] = f;
        }
      }
    }
  }
  return m;
}

}  // namespace detail

// Full metric set over a dataset. Images are matched in parallel and merged
// in image-id order, so results do not depend on `threads`.
inline EvalReport evaluate(const std::vector<Detection>& dets,
                           const std::vector<InstanceAnnotation>& gts, const EvalConfig& cfg,
                           int threads = 1) {
  cfg.validate();
  {
    std::set<std::int64_t> ids;
    for (const auto& d : dets)
      if (!ids.insert(d.id).second)
        throw InputError("duplicate detection id " + std::to_string(d.id));
  }
  std::map<std::int64_t, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> by_image;
  for (std::size_t i = 0; i < dets.size(); ++i) by_image[dets[i].image_id].first.push_back(i);
  for (std::size_t i = 0; i < gts.size(); ++i) by_image[gts[i].image_id].second.push_back(i);
  std::vector<std::int64_t> images;
  for (const auto& [id, _] : by_image) images.push_back(id);

  std::vector<detail::ImageMatches> matches(images.size());
  const auto work = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < images.size(); i += step) {
      const auto& [di, gi] = by_image.at(images[i]);
      matches[i] = detail::match_image(dets, di, gts, gi, cfg);
    }
  };
  const auto nt = static_cast<std::size_t>(std::max(1, threads));
  if (nt == 1) {
    work(0, 1);
  } else {
    std::vector<std::exception_ptr> errs(nt);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < nt; ++w)
      pool.emplace_back([&, w] {
        try {
          work(w, nt);
        } catch (...) {
          errs[w] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errs)
      if (e) std::rethrow_exception(e);
  }

  std::set<std::int64_t> classes;
  for (const auto& d : dets) classes.insert(d.class_id);
  for (const auto& g : gts) classes.insert(g.class_id);

  EvalReport rep;
  rep.kind = cfg.iou_kind;
  rep.thresholds = cfg.iou_thresholds;
  const auto T = cfg.iou_thresholds.size();
  for (auto s : kStrata) {
    auto& out = rep.strata[static_cast<int>(s)];
    std::map<std::int64_t, std::int64_t> n_gt;
    for (const auto& g : gts)
      if (cfg.in_stratum(object_area(g, cfg.iou_kind), s)) ++n_gt[g.class_id], ++out.num_gt;
    out.per_threshold.assign(T, std::nullopt);
    if (out.num_gt == 0) continue;
    for (std::size_t t = 0; t < T; ++t) {
      double sum = 0;
      int counted = 0;
      for (const auto cls : classes) {
        // (detection index, flag) across images, then global score order
        std::vector<std::pair<std::size_t, std::int8_t>> seq;
        for (const auto& m : matches) {
          const auto& f = m.flags[static_cast<int>(s)][t];
          for (std::size_t k = 0; k < m.dets.size(); ++k)
            if (dets[m.dets[k]].class_id == cls && f[k] != kIgnored) seq.emplace_back(m.dets[k], f[k]);
        }
        std::sort(seq.begin(), seq.end(), [&](const auto& a, const auto& b) {
          return detail::score_before(dets[a.first], dets[b.first]);
        });
        std::vector<std::int8_t> tp;
        tp.reserve(seq.size());
        for (const auto& e : seq) tp.push_back(e.second);
        const auto ap = average_precision(tp, n_gt.count(cls) ? n_gt.at(cls) : 0);
        if (ap) sum += *ap, ++counted;
      }
      out.per_threshold[t] = sum / counted;
    }
    double total = 0;
    for (const auto& v : out.per_threshold) total += *v;
    out.mean = total / static_cast<double>(T);
  }
  return rep;
}

// Detection records in COCO results form.
inline nlohmann::json detection_json(const Detection& d) {
  const auto bb = d.box.xywh();
  nlohmann::json j{{"id", d.id},
                   {"image_id", d.image_id},
                   {"category_id", d.class_id},
                   {"bbox", {bb[0], bb[1], bb[2], bb[3]}},
                   {"score", d.score}};
  if (!d.mask.bits.empty())
    j["segmentation"] = {{"counts", rle_encode(d.mask)}, {"size", {d.mask.height, d.mask.width}}};
  return j;
}

inline Detection detection_from_json(const nlohmann::json& j) {
  Detection d;
  try {
    d.id = j.at("id").get<std::int64_t>();
    d.image_id = j.at("image_id").get<std::int64_t>();
    d.class_id = j.at("category_id").get<std::int64_t>();
    d.score = j.at("score").get<double>();
    const auto bb = j.at("bbox").get<std::vector<double>>();
    if (bb.size() != 4) throw FormatError("detection " + std::to_string(d.id) + ": bbox needs 4 values");
    d.box = Box::from_xywh(bb[0], bb[1], bb[2], bb[3]);
    if (j.contains("segmentation")) {
      const auto& s = j["segmentation"];
      const auto size = s.at("size").get<std::vector<std::int64_t>>();
      d.mask = rle_decode(s.at("counts").get<std::vector<std::int64_t>>(), size.at(0), size.at(1));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("detection record: ") + e.what());
  }
  return d;
}

}  // namespace gfm
