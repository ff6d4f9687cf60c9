#pragma once

// Multi-scale feature construction: an FPN over hierarchical backbone maps and
// a pyramid generator for single-scale (patch-grid) backbones.

#include <string>
#include <vector>

#include "gfm/checkpoint.hpp"
#include "gfm/nn.hpp"

namespace gfm {

// Feature maps [F, H/s, W/s] keyed by stride, ascending.
template <class T>
struct FeatureLevels {
  std::vector<std::int64_t> strides;
  std::vector<Tensor<T>> maps;

  std::size_t size() const { return maps.size(); }
  std::int64_t channels() const { return maps.empty() ? 0 : maps[0].dim(0); }

  // Checks spatial sizes against an (H, W) source and channel uniformity.
  void validate(std::int64_t H, std::int64_t W) const {
    if (strides.size() != maps.size() || maps.empty())
      throw DimensionError("feature levels: stride/map count mismatch");
    for (std::size_t i = 0; i < maps.size(); ++i) {
      const auto& m = maps[i];
      if (m.rank() != 3 || m.dim(0) != channels())
        throw DimensionError("feature levels: level " + std::to_string(strides[i]) +
                             " has shape " + shape_str(m.shape()));
      if (m.dim(1) * strides[i] != H || m.dim(2) * strides[i] != W)
        throw DimensionError("feature levels: stride " + std::to_string(strides[i]) + " map " +
                             shape_str(m.shape()) + " inconsistent with " + std::to_string(H) +
                             "x" + std::to_string(W));
    }
  }
};

// A full pyramid has strides 4, 8, 16 and 32.
template <class T>
void require_full_pyramid(const FeatureLevels<T>& p, std::int64_t H, std::int64_t W) {
  if (p.strides != std::vector<std::int64_t>{4, 8, 16, 32})
    throw DimensionError("feature pyramid must have strides 4, 8, 16, 32");
  p.validate(H, W);
}

// 1x1 projection followed by a 3x3 smoothing conv with replicate padding.
template <class T>
struct Projection {
  Conv2d<T> lateral, output;

  Projection() = default;
  Projection(std::int64_t in, std::int64_t F, Rng rng)
      : lateral(in, F, 1, 1, 0, rng.split("lateral")), output(F, F, 3, 1, 0, rng.split("output")) {}

  Tensor<T> smooth(const Tensor<T>& x) const { return output(pad2d_replicate(x, 1)); }
  Tensor<T> operator()(const Tensor<T>& x) const { return smooth(lateral(x)); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    lateral.collect(out, prefix + ".lateral");
    output.collect(out, prefix + ".output");
  }
};

template <class T>
struct Fpn {
  std::vector<Projection<T>> levels;  // strides 4, 8, 16, 32

  Fpn() = default;
  Fpn(const std::vector<std::int64_t>& in_channels, std::int64_t F, Rng rng) {
    if (in_channels.size() != 4) throw ConfigError("fpn: exactly 4 input levels required");
    for (std::size_t i = 0; i < 4; ++i)
      levels.emplace_back(in_channels[i], F, rng.split("level").split(static_cast<std::uint64_t>(i)));
  }

  FeatureLevels<T> operator()(const std::vector<Tensor<T>>& maps) const {
    if (maps.size() != 4) throw DimensionError("fpn: expected 4 backbone maps");
    for (std::size_t i = 0; i + 1 < 4; ++i)
      if (maps[i].dim(1) != 2 * maps[i + 1].dim(1) || maps[i].dim(2) != 2 * maps[i + 1].dim(2))
        throw DimensionError("fpn: level " + std::to_string(i) + " map " +
                             shape_str(maps[i].shape()) + " is not twice the size of " +
                             shape_str(maps[i + 1].shape()));
    std::vector<Tensor<T>> merged(4);
    merged[3] = levels[3].lateral(maps[3]);
    for (int i = 2; i >= 0; --i)
      merged[i] = add(levels[i].lateral(maps[i]), upsample_nearest2d(merged[i + 1], 2));
    FeatureLevels<T> out;
    for (std::size_t i = 0; i < 4; ++i) {
      out.strides.push_back(std::int64_t{4} << i);
      out.maps.push_back(levels[i].smooth(merged[i]));
    }
    return out;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < levels.size(); ++i)
      levels[i].collect(out, prefix + ".s" + std::to_string(4 << i));
  }
};

template <class T>
FeatureLevels<T> fpn_forward(const Fpn<T>& fpn, const std::vector<Tensor<T>>& maps) {
  return fpn(maps);
}

inline int log2_exact(std::int64_t v, const char* what) {
  int k = 0;
  while ((std::int64_t{1} << k) < v) ++k;
  if ((std::int64_t{1} << k) != v)
    throw ConfigError(std::string(what) + " must be a power of two, got " + std::to_string(v));
  return k;
}

// Strides 4..32 from one map at `source_stride`: stacked 2x transposed convs
// for finer levels, identity at the source stride, 2x max-pools for coarser
// levels, each followed by a projection to F channels.
template <class T>
struct SimplePyramid {
  std::int64_t source_stride = 16;
  std::vector<std::vector<ConvTranspose2d<T>>> up;  // per level
  std::vector<Projection<T>> proj;

  SimplePyramid() = default;
  SimplePyramid(std::int64_t in, std::int64_t F, std::int64_t src_stride, Rng rng)
      : source_stride(src_stride) {
    const int ls = log2_exact(src_stride, "pyramid source stride");
    if (ls < 2 || ls > 5) throw ConfigError("pyramid source stride must be in 4..32");
    for (int lvl = 2; lvl <= 5; ++lvl) {
      auto r = rng.split("s").split(static_cast<std::uint64_t>(4 << (lvl - 2)));
      std::vector<ConvTranspose2d<T>> chain;
      std::int64_t ch = in;
      for (int k = 0; k < ls - lvl; ++k) {
        const auto next = std::max<std::int64_t>(ch / 2, 8);
        chain.emplace_back(ch, next, 2, 2, r.split("deconv").split(static_cast<std::uint64_t>(k)));
        ch = next;
      }
      up.push_back(std::move(chain));
      proj.emplace_back(ch, F, r.split("proj"));
    }
  }

  FeatureLevels<T> operator()(const Tensor<T>& x, std::int64_t H, std::int64_t W) const {
    if (x.rank() != 3) throw DimensionError("pyramid: source map must be [D, h, w]");
    if (x.dim(1) * source_stride != H || x.dim(2) * source_stride != W)
      throw ConfigError("pyramid: source map " + shape_str(x.shape()) + " is not at stride " +
                        std::to_string(source_stride) + " of " + std::to_string(H) + "x" +
                        std::to_string(W));
    const int ls = log2_exact(source_stride, "pyramid source stride");
    FeatureLevels<T> out;
    for (int lvl = 2; lvl <= 5; ++lvl) {
      auto h = x;
      const auto& chain = up[lvl - 2];
      for (std::size_t k = 0; k < chain.size(); ++k) {
        h = chain[k](h);
        if (k + 1 < chain.size()) h = gelu(h);
      }
      for (int k = 0; k < lvl - ls; ++k) h = max_pool2d(h, 2, 2);
      out.strides.push_back(std::int64_t{1} << lvl);
      out.maps.push_back(proj[lvl - 2](h));
    }
    return out;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < proj.size(); ++i) {
      const auto p = prefix + ".s" + std::to_string(4 << i);
      for (std::size_t k = 0; k < up[i].size(); ++k) up[i][k].collect(out, p + ".deconv" + std::to_string(k));
      proj[i].collect(out, p + ".proj");
    }
  }
};

template <class T>
FeatureLevels<T> simple_pyramid_from_single(const SimplePyramid<T>& g, const Tensor<T>& x,
                                            std::int64_t H, std::int64_t W) {
  return g(x, H, W);
}

// Single-level neck: the source map projected to F channels.
template <class T>
struct SingleScaleNeck {
  std::int64_t source_stride = 16;
  Projection<T> proj;

  SingleScaleNeck() = default;
  SingleScaleNeck(std::int64_t in, std::int64_t F, std::int64_t src_stride, Rng rng)
      : source_stride(src_stride), proj(in, F, rng.split("proj")) {}

  FeatureLevels<T> operator()(const Tensor<T>& x, std::int64_t H, std::int64_t W) const {
    if (x.dim(1) * source_stride != H || x.dim(2) * source_stride != W)
      throw ConfigError("single-scale neck: source map " + shape_str(x.shape()) +
                        " is not at stride " + std::to_string(source_stride));
    return {{source_stride}, {proj(x)}};
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    proj.collect(out, prefix + ".s" + std::to_string(source_stride) + ".proj");
  }
};

// Loads generator weights stored under `prefix` in a checkpoint. Strict mode
// requires every generator tensor; lenient mode leaves missing ones at init.
template <class T>
LoadReport load_pretrained_pyramid(SimplePyramid<T>& g, const Checkpoint& ck, bool strict,
                                   const std::string& prefix = "pyramid") {
  ParamList<T> params;
  g.collect(params, prefix);
  Checkpoint scoped;
  for (const auto& t : ck.tensors)
    if (t.name.rfind(prefix + ".", 0) == 0) scoped.tensors.push_back(t);
  return load_into(params, scoped, strict);
}

}  // namespace gfm
