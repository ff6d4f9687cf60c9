#pragma once

// Spatiotemporal patch embedding and the three ways of feeding 3-band
// imagery to an embedding trained on six bands.

#include <string>
#include <vector>

#include "gfm/nn.hpp"

namespace gfm {

inline const std::vector<std::string>& default_band_order() {
  static const std::vector<std::string> order{"Blue",      "Green", "Red",
                                              "NarrowNIR", "SWIR1", "SWIR2"};
  return order;
}

enum class AdaptationStrategy { ZeroPadded, ChannelDuplication, RetrainedPatchEmbed };

inline const char* to_string(AdaptationStrategy s) {
  switch (s) {
    case AdaptationStrategy::ZeroPadded: return "zero_padded";
    case AdaptationStrategy::ChannelDuplication: return "channel_duplication";
    case AdaptationStrategy::RetrainedPatchEmbed: return "retrained_patch_embed";
  }
  return "?";
}

inline AdaptationStrategy parse_adaptation(const std::string& s) {
  if (s == "zero_padded") return AdaptationStrategy::ZeroPadded;
  if (s == "channel_duplication") return AdaptationStrategy::ChannelDuplication;
  if (s == "retrained_patch_embed") return AdaptationStrategy::RetrainedPatchEmbed;
  throw ConfigError("unknown adaptation strategy '" + s + "'");
}

template <class T>
struct PatchEmbedLayer {
  Tensor<T> kernel;  // [D, C_in, t, p, p]
  Tensor<T> bias;    // [D]
  std::int64_t t = 1, p = 16;
  std::vector<std::string> band_order = default_band_order();

  PatchEmbedLayer() = default;
  PatchEmbedLayer(std::int64_t in_chans, std::int64_t t_, std::int64_t p_, std::int64_t embed_dim,
                  Rng rng, double std = 0.02)
      : kernel(param<T>({embed_dim, in_chans, t_, p_, p_})),
        bias(param<T>({embed_dim})),
        t(t_),
        p(p_) {
    if (in_chans < 1 || t_ < 1 || p_ < 1 || embed_dim < 1)
      throw ConfigError("patch embedding: all dimensions must be positive");
    init_truncated_normal(kernel, rng, std);
    if (in_chans != 6) band_order.clear();
  }

  std::int64_t in_chans() const { return kernel.dim(1); }
  std::int64_t embed_dim() const { return kernel.dim(0); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", kernel});
    out.push_back({prefix + ".bias", bias});
  }
};

struct GridCoord {
  std::int64_t time, row, col;
  friend bool operator==(const GridCoord&, const GridCoord&) = default;
};

// Token sequence [N, D] with the (time,row,col) patch coordinate of each row.
// Row order is time-major, then row, then column.
template <class T>
struct TokenGrid {
  Tensor<T> tokens;
  std::int64_t frames = 0, rows = 0, cols = 0;
  std::vector<GridCoord> coords;

  std::int64_t size() const { return frames * rows * cols; }
};

inline std::vector<GridCoord> grid_coords(std::int64_t frames, std::int64_t rows,
                                          std::int64_t cols) {
  std::vector<GridCoord> c;
  c.reserve(static_cast<std::size_t>(frames * rows * cols));
  for (std::int64_t f = 0; f < frames; ++f)
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t q = 0; q < cols; ++q) c.push_back({f, r, q});
  return c;
}

template <class T>
TokenGrid<T> patch_embed_forward(const PatchEmbedLayer<T>& layer, const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("patch embedding expects (C,T,H,W), got " + shape_str(x.shape()));
  if (x.dim(0) != layer.in_chans()) throw AdaptationRequiredError(layer.in_chans(), x.dim(0));
  auto y = conv3d(x, layer.kernel, layer.bias, {layer.t, layer.p, layer.p});
  const auto D = y.dim(0);
  TokenGrid<T> g;
  g.frames = y.dim(1);
  g.rows = y.dim(2);
  g.cols = y.dim(3);
  g.tokens = transpose(reshape(y, {D, g.size()}));
  g.coords = grid_coords(g.frames, g.rows, g.cols);
  return g;
}

namespace detail {

template <class T>
void require_three_bands(const Tensor<T>& x, const char* op) {
  if (x.rank() != 4 || x.dim(0) != 3)
    throw UsageError(std::string(op) + ": expects a 3-band (3,T,H,W) raster, got " +
                     shape_str(x.shape()));
}

}  // namespace detail

// Picks bands (in the given order) from x[C,T,H,W].
template <class T>
Tensor<T> select_bands(const Tensor<T>& x, const std::vector<std::int64_t>& bands) {
  if (x.rank() != 4) throw DimensionError("select_bands expects (C,T,H,W)");
  const auto plane = x.dim(1) * x.dim(2) * x.dim(3);
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(plane) * bands.size());
  for (auto b : bands) {
    if (b < 0 || b >= x.dim(0)) throw DimensionError("select_bands: band out of range");
    out.insert(out.end(), x.data().begin() + b * plane, x.data().begin() + (b + 1) * plane);
  }
  return Tensor<T>::from({static_cast<std::int64_t>(bands.size()), x.dim(1), x.dim(2), x.dim(3)},
                         std::move(out));
}

// R,G,B raster to the Blue,Green,Red order of the first three embedding bands.
template <class T>
Tensor<T> rgb_to_band_order(const Tensor<T>& rgb) {
  detail::require_three_bands(rgb, "rgb_to_band_order");
  return select_bands(rgb, {2, 1, 0});
}

template <class T>
Tensor<T> adapt_zero_pad(const Tensor<T>& x) {
  detail::require_three_bands(x, "adapt_zero_pad");
  std::vector<T> out(x.vec());
  out.resize(out.size() * 2, T(0));
  return Tensor<T>::from({6, x.dim(1), x.dim(2), x.dim(3)}, std::move(out));
}

template <class T>
Tensor<T> adapt_duplicate(const Tensor<T>& x) {
  detail::require_three_bands(x, "adapt_duplicate");
  std::vector<T> out(x.vec());
  out.insert(out.end(), x.data().begin(), x.data().end());
  return Tensor<T>::from({6, x.dim(1), x.dim(2), x.dim(3)}, std::move(out));
}

// Fresh kernel for `new_bands` inputs; bias and geometry carried over.
template <class T>
PatchEmbedLayer<T> retrain_patch_embed(const PatchEmbedLayer<T>& old, std::int64_t new_bands,
                                       std::uint64_t seed, double std = 0.02) {
  if (new_bands < 1) throw ConfigError("retrain_patch_embed: new_bands must be >= 1");
  PatchEmbedLayer<T> out(new_bands, old.t, old.p, old.embed_dim(), Rng(seed).split("patch_embed"),
                         std);
  std::copy(old.bias.data().begin(), old.bias.data().end(), out.bias.mutable_data().begin());
  if (new_bands == 3 && old.band_order.size() >= 3)
    out.band_order.assign(old.band_order.begin(), old.band_order.begin() + 3);
  return out;
}

template <class T>
std::int64_t param_count(const PatchEmbedLayer<T>& layer) {
  return static_cast<std::int64_t>(layer.kernel.numel() + layer.bias.numel());
}

// Kernel restricted to a contiguous channel range: [D, len, t, p, p].
template <class T>
Tensor<T> kernel_channels(const Tensor<T>& kernel, std::int64_t start, std::int64_t len) {
  const auto Dd = kernel.dim(0), C = kernel.dim(1);
  const auto per = kernel.dim(2) * kernel.dim(3) * kernel.dim(4);
  if (start < 0 || start + len > C) throw DimensionError("kernel_channels: range out of bounds");
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(Dd * len * per));
  for (std::int64_t d = 0; d < Dd; ++d) {
    auto first = kernel.data().begin() + (d * C + start) * per;
    out.insert(out.end(), first, first + len * per);
  }
  return Tensor<T>::from({Dd, len, kernel.dim(2), kernel.dim(3), kernel.dim(4)}, std::move(out));
}

}  // namespace gfm
