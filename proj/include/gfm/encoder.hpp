#pragma once

// Transformer encoder over patch tokens (global or windowed multi-head
// attention) and a small hierarchical convolutional backbone.

#include <cmath>
#include <string>
#include <vector>

#include "gfm/band_adapt.hpp"

namespace gfm {

enum class AttentionKind { Global, Windowed };

struct EncoderConfig {
  std::int64_t in_chans = 6;
  std::int64_t patch_t = 1;
  std::int64_t patch = 8;
  std::int64_t embed_dim = 64;
  std::int64_t depth = 4;
  std::int64_t heads = 4;
  double mlp_ratio = 4.0;
  AttentionKind attention = AttentionKind::Global;
  std::int64_t window_size = 2;
  bool pos_embed = true;

  void validate() const {
    if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
      throw ConfigError("encoder: embed_dim " + std::to_string(embed_dim) +
                        " not divisible by heads " + std::to_string(heads));
    if (depth < 0) throw ConfigError("encoder: negative depth");
    if (mlp_ratio <= 0) throw ConfigError("encoder: mlp_ratio must be positive");
    if (attention == AttentionKind::Windowed && window_size < 1)
      throw ConfigError("encoder: window_size must be >= 1");
  }
};

// 1D sin-cos table for `dim` channels at integer positions [0, n).
inline std::vector<double> sincos_1d(std::int64_t n, std::int64_t dim) {
  std::vector<double> out(static_cast<std::size_t>(n * dim), 0.0);
  const std::int64_t half = dim / 2;
  for (std::int64_t pos = 0; pos < n; ++pos)
    for (std::int64_t i = 0; i < half; ++i) {
      const double omega = std::pow(10000.0, -static_cast<double>(i) / std::max<std::int64_t>(half, 1));
      out[pos * dim + i] = std::sin(pos * omega);
      out[pos * dim + half + i] = std::cos(pos * omega);
    }
  return out;
}

// Fixed 3D sin-cos embedding [N, D] factorized over (time, row, col).
template <class T>
Tensor<T> sincos_pos_embed(const std::vector<GridCoord>& coords, std::int64_t frames,
                           std::int64_t rows, std::int64_t cols, std::int64_t D) {
  const std::int64_t dt = (D / 4) & ~std::int64_t{1};
  const std::int64_t rem = D - dt;
  const std::int64_t dr = (rem / 2) & ~std::int64_t{1};
  const std::int64_t dc = rem - dr;
  const auto et = sincos_1d(frames, dt), er = sincos_1d(rows, dr), ec = sincos_1d(cols, dc);
  const auto N = static_cast<std::int64_t>(coords.size());
  std::vector<T> out(static_cast<std::size_t>(N * D));
  for (std::int64_t n = 0; n < N; ++n) {
    const auto& c = coords[n];
    T* o = out.data() + n * D;
    for (std::int64_t i = 0; i < dt; ++i) o[i] = static_cast<T>(et[c.time * dt + i]);
    for (std::int64_t i = 0; i < dr; ++i) o[dt + i] = static_cast<T>(er[c.row * dr + i]);
    for (std::int64_t i = 0; i < dc; ++i) o[dt + dr + i] = static_cast<T>(ec[c.col * dc + i]);
  }
  return Tensor<T>::from({N, D}, std::move(out));
}

// Multi-head self attention over token groups. Each group (a list of row
// indices) attends only within itself; global attention is one group.
template <class T>
struct Attention {
  std::int64_t heads = 1;
  Linear<T> qkv, proj;

  Attention() = default;
  Attention(std::int64_t D, std::int64_t heads_, Rng rng)
      : heads(heads_), qkv(D, 3 * D, rng.split("qkv")), proj(D, D, rng.split("proj")) {
    if (D % heads_ != 0)
      throw ConfigError("attention: embed_dim " + std::to_string(D) + " not divisible by heads " +
                        std::to_string(heads_));
  }

  // x: [N, D]. `weights`, if non-null, receives each group's per-head
  // attention matrices.
  Tensor<T> forward_group(const Tensor<T>& x, std::vector<Tensor<T>>* weights = nullptr) const {
    const auto D = x.dim(1), dh = D / heads;
    const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    auto q_k_v = qkv(x);
    std::vector<Tensor<T>> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (std::int64_t h = 0; h < heads; ++h) {
      auto q = slice_cols(q_k_v, h * dh, dh);
      auto k = slice_cols(q_k_v, D + h * dh, dh);
      auto v = slice_cols(q_k_v, 2 * D + h * dh, dh);
      auto a = softmax(scale(matmul(q, transpose(k)), sc));
      if (weights) weights->push_back(a);
      outs.push_back(matmul(a, v));
    }
    return proj(heads == 1 ? outs[0] : concat_cols(outs));
  }

  Tensor<T> operator()(const Tensor<T>& x, const std::vector<std::vector<std::int64_t>>& groups,
                       std::vector<Tensor<T>>* weights = nullptr) const {
    if (x.dim(0) < 1) throw DimensionError("attention: no tokens");
    if (groups.size() <= 1) return forward_group(x, weights);
    std::vector<Tensor<T>> parts;
    std::vector<std::int64_t> where(static_cast<std::size_t>(x.dim(0)), -1);
    std::int64_t row = 0;
    for (const auto& g : groups) {
      parts.push_back(forward_group(gather_rows(x, g), weights));
      for (auto i : g) where[i] = row++;
    }
    if (row != x.dim(0)) throw InternalError("attention: groups do not partition the tokens");
    return gather_rows(concat_rows(parts), where);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    qkv.collect(out, prefix + ".qkv");
    proj.collect(out, prefix + ".proj");
  }
};

// Non-overlapping window partition of a rows x cols grid (all frames of a
// spatial window share the window).
inline std::vector<std::vector<std::int64_t>> window_groups(std::int64_t frames, std::int64_t rows,
                                                            std::int64_t cols, std::int64_t w) {
  if (w < 1 || rows % w != 0 || cols % w != 0)
    throw ConfigError("window attention: grid " + std::to_string(rows) + "x" +
                      std::to_string(cols) + " not divisible by window " + std::to_string(w));
  std::vector<std::vector<std::int64_t>> g;
  for (std::int64_t wr = 0; wr < rows / w; ++wr)
    for (std::int64_t wc = 0; wc < cols / w; ++wc) {
      std::vector<std::int64_t> members;
      for (std::int64_t f = 0; f < frames; ++f)
        for (std::int64_t r = wr * w; r < (wr + 1) * w; ++r)
          for (std::int64_t c = wc * w; c < (wc + 1) * w; ++c)
            members.push_back((f * rows + r) * cols + c);
      g.push_back(std::move(members));
    }
  return g;
}

template <class T>
struct Block {
  LayerNorm<T> ln1, ln2;
  Attention<T> attn;
  Linear<T> fc1, fc2;

  Block() = default;
  Block(std::int64_t D, std::int64_t heads, double mlp_ratio, Rng rng)
      : ln1(D), ln2(D), attn(D, heads, rng.split("attn")) {
    const auto hidden = static_cast<std::int64_t>(std::lround(D * mlp_ratio));
    fc1 = Linear<T>(D, hidden, rng.split("fc1"));
    fc2 = Linear<T>(hidden, D, rng.split("fc2"));
  }

  Tensor<T> operator()(const Tensor<T>& x, const std::vector<std::vector<std::int64_t>>& groups,
                       std::vector<Tensor<T>>* weights = nullptr) const {
    auto h = add(x, attn(ln1(x), groups, weights));
    return add(h, fc2(gelu(fc1(ln2(h)))));
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    ln1.collect(out, prefix + ".norm1");
    attn.collect(out, prefix + ".attn");
    ln2.collect(out, prefix + ".norm2");
    fc1.collect(out, prefix + ".mlp.fc1");
    fc2.collect(out, prefix + ".mlp.fc2");
  }
};

template <class T>
Tensor<T> mha_forward(const Block<T>& block, const Tensor<T>& tokens,
                      std::vector<Tensor<T>>* weights = nullptr) {
  return block(tokens, {}, weights);
}

template <class T>
Tensor<T> window_attention_forward(const Block<T>& block, const TokenGrid<T>& grid,
                                   std::int64_t window_size,
                                   std::vector<Tensor<T>>* weights = nullptr) {
  return block(grid.tokens, window_groups(grid.frames, grid.rows, grid.cols, window_size), weights);
}

// Patch embedding followed by transformer blocks and a final norm.
template <class T>
struct Encoder {
  EncoderConfig cfg;
  PatchEmbedLayer<T> embed;
  std::vector<Block<T>> blocks;
  LayerNorm<T> norm;

  Encoder() = default;
  Encoder(const EncoderConfig& c, Rng rng) : cfg(c) {
    cfg.validate();
    embed = PatchEmbedLayer<T>(c.in_chans, c.patch_t, c.patch, c.embed_dim, rng.split("embed"));
    for (std::int64_t i = 0; i < c.depth; ++i)
      blocks.emplace_back(c.embed_dim, c.heads, c.mlp_ratio,
                          rng.split("block").split(static_cast<std::uint64_t>(i)));
    norm = LayerNorm<T>(c.embed_dim);
  }

  // Patch tokens plus positional embedding.
  TokenGrid<T> tokenize(const Tensor<T>& x) const {
    auto g = patch_embed_forward(embed, x);
    if (cfg.pos_embed)
      g.tokens = add(g.tokens, sincos_pos_embed<T>(g.coords, g.frames, g.rows, g.cols,
                                                   cfg.embed_dim));
    return g;
  }

  std::vector<std::vector<std::int64_t>> groups_for(const TokenGrid<T>& g) const {
    if (cfg.attention == AttentionKind::Windowed)
      return window_groups(g.frames, g.rows, g.cols, cfg.window_size);
    return {};
  }

  // Runs the blocks and final norm over an arbitrary token subset using the
  // given grouping (empty = global).
  Tensor<T> run_blocks(Tensor<T> tokens,
                       const std::vector<std::vector<std::int64_t>>& groups = {}) const {
    for (const auto& b : blocks) tokens = b(tokens, groups);
    return norm(tokens);
  }

  // Single-frame feature map [D, H/p, W/p].
  Tensor<T> encode(const Tensor<T>& x) const {
    auto g = tokenize(x);
    if (g.frames != 1)
      throw ConfigError("encode: downstream tasks need a single time step, got " +
                        std::to_string(g.frames));
    auto out = run_blocks(g.tokens, groups_for(g));
    return reshape(transpose(out), {cfg.embed_dim, g.rows, g.cols});
  }

  std::int64_t stride() const { return cfg.patch; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    embed.collect(out, prefix + ".patch_embed");
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(out, prefix + ".blocks." + std::to_string(i));
    norm.collect(out, prefix + ".norm");
  }
};

// ------------------------------------------------------- convolutional backbone

struct ConvBackboneConfig {
  std::int64_t in_chans = 6;
  std::vector<std::int64_t> widths{16, 32, 64, 128};
  std::int64_t groups = 4;

  void validate() const {
    if (widths.size() != 4) throw ConfigError("conv backbone: exactly 4 stage widths required");
    for (auto w : widths)
      if (w <= 0 || w % groups != 0)
        throw ConfigError("conv backbone: width " + std::to_string(w) +
                          " must be positive and divisible by groups " + std::to_string(groups));
  }
};

// x + GELU(GN(conv3x3(x))) with replicate padding.
template <class T>
struct ResidualBlock {
  Conv2d<T> conv;
  GroupNorm<T> gn;

  ResidualBlock() = default;
  ResidualBlock(std::int64_t C, std::int64_t groups, Rng rng)
      : conv(C, C, 3, 1, 0, rng), gn(C, groups) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    return add(x, gelu(gn(conv(pad2d_replicate(x, 1)))));
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    conv.collect(out, prefix + ".conv");
    gn.collect(out, prefix + ".norm");
  }
};

template <class T>
struct ConvBackbone {
  ConvBackboneConfig cfg;
  Conv2d<T> stem;
  GroupNorm<T> stem_norm;
  std::vector<Conv2d<T>> down;  // stages 1..3
  std::vector<ResidualBlock<T>> stages;

  ConvBackbone() = default;
  ConvBackbone(const ConvBackboneConfig& c, Rng rng) : cfg(c) {
    cfg.validate();
    stem = Conv2d<T>(c.in_chans, c.widths[0], 4, 4, 0, rng.split("stem"));
    stem_norm = GroupNorm<T>(c.widths[0], c.groups);
    for (std::size_t i = 0; i < 4; ++i) {
      if (i > 0)
        down.emplace_back(c.widths[i - 1], c.widths[i], 2, 2, 0,
                          rng.split("down").split(static_cast<std::uint64_t>(i)));
      stages.emplace_back(c.widths[i], c.groups,
                          rng.split("stage").split(static_cast<std::uint64_t>(i)));
    }
  }

  // x: [C,1,H,W] or [C,H,W]. Returns maps at strides 4, 8, 16, 32.
  std::vector<Tensor<T>> operator()(const Tensor<T>& x) const {
    auto img = x.rank() == 4 ? reshape(x, {x.dim(0), x.dim(2), x.dim(3)}) : x;
    if (x.rank() == 4 && x.dim(1) != 1)
      throw ConfigError("conv backbone: single time step required");
    if (img.dim(1) % 32 != 0 || img.dim(2) % 32 != 0)
      throw ConfigError("conv backbone: input " + shape_str(img.shape()) +
                        " must have H and W divisible by 32");
    if (img.dim(0) != cfg.in_chans) throw AdaptationRequiredError(cfg.in_chans, img.dim(0));
    std::vector<Tensor<T>> maps;
    auto h = gelu(stem_norm(stem(img)));
    for (std::size_t i = 0; i < 4; ++i) {
      if (i > 0) h = down[i - 1](h);
      h = stages[i](h);
      maps.push_back(h);
    }
    return maps;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    stem.collect(out, prefix + ".stem");
    stem_norm.collect(out, prefix + ".stem_norm");
    for (std::size_t i = 0; i < 4; ++i) {
      if (i > 0) down[i - 1].collect(out, prefix + ".down." + std::to_string(i));
      stages[i].collect(out, prefix + ".stage." + std::to_string(i));
    }
  }
};

template <class T>
std::vector<Tensor<T>> conv_backbone_forward(const ConvBackbone<T>& net, const Tensor<T>& x) {
  return net(x);
}

}  // namespace gfm
