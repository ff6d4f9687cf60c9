#pragma once

// Masked-autoencoder pretraining: random token masking, an encoder that sees
// only visible tokens, a light decoder with a shared mask token, and an MSE
// objective on the masked patches.

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "gfm/encoder.hpp"

namespace gfm {

struct MaskPlan {
  std::int64_t N = 0;
  double mask_ratio = 0;
  std::uint64_t seed = 0;
  std::vector<std::int64_t> masked;   // sorted
  std::vector<std::int64_t> visible;  // sorted complement
};

inline MaskPlan random_mask(std::int64_t N, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio < 1.0))
    throw ConfigError("mae.mask_ratio must be in [0, 1), got " + std::to_string(ratio));
  if (N < 1) throw ConfigError("random_mask: token count must be positive");
  MaskPlan plan{N, ratio, seed, {}, {}};
  const auto count = static_cast<std::int64_t>(std::llround(ratio * static_cast<double>(N)));
  Rng rng(seed);
  auto perm = rng.permutation(static_cast<std::size_t>(N));
  std::vector<char> is_masked(static_cast<std::size_t>(N), 0);
  for (std::int64_t i = 0; i < count; ++i) is_masked[perm[i]] = 1;
  for (std::int64_t i = 0; i < N; ++i) (is_masked[i] ? plan.masked : plan.visible).push_back(i);
  return plan;
}

// x[C,T,H,W] -> [N, C*t*p*p], tokens in (time,row,col) order, values within a
// token in kernel order (c, dt, u, v).
template <class T>
Tensor<T> patchify(const Tensor<T>& x, std::int64_t t, std::int64_t p) {
  if (x.rank() != 4) throw DimensionError("patchify expects (C,T,H,W)");
  const auto C = x.dim(0), Tt = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (Tt % t || H % p || W % p)
    throw ConfigError("patchify: " + shape_str(x.shape()) + " not divisible into patches");
  const auto F = Tt / t, R = H / p, Q = W / p, P = C * t * p * p;
  std::vector<T> out(static_cast<std::size_t>(F * R * Q * P));
  std::int64_t o = 0;
  for (std::int64_t f = 0; f < F; ++f)
    for (std::int64_t r = 0; r < R; ++r)
      for (std::int64_t q = 0; q < Q; ++q)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t dt = 0; dt < t; ++dt)
            for (std::int64_t u = 0; u < p; ++u)
              for (std::int64_t v = 0; v < p; ++v)
                out[o++] = x[((c * Tt + f * t + dt) * H + r * p + u) * W + q * p + v];
  return Tensor<T>::from({F * R * Q, P}, std::move(out));
}

// Per-row standardization of patch targets (optional loss variant).
template <class T>
Tensor<T> normalize_patches(const Tensor<T>& patches, double eps = 1e-6) {
  const auto N = patches.dim(0), P = patches.dim(1);
  std::vector<T> out(patches.vec());
  for (std::int64_t n = 0; n < N; ++n) {
    double m = 0, v = 0;
    for (std::int64_t j = 0; j < P; ++j) m += out[n * P + j];
    m /= P;
    for (std::int64_t j = 0; j < P; ++j) v += (out[n * P + j] - m) * (out[n * P + j] - m);
    const double inv = 1.0 / std::sqrt(v / P + eps);
    for (std::int64_t j = 0; j < P; ++j) out[n * P + j] = static_cast<T>((out[n * P + j] - m) * inv);
  }
  return Tensor<T>::from(patches.shape(), std::move(out));
}

struct MaeConfig {
  double mask_ratio = 0.75;
  std::int64_t decoder_dim = 0;  // 0: embed_dim / 2
  std::int64_t decoder_depth = 2;
  std::int64_t decoder_heads = 0;  // 0: encoder heads
  bool norm_pix_loss = false;
  bool resample_masks = false;  // false: each scene keeps one mask for the whole run
  std::int64_t epochs = 20;
  std::int64_t batch_size = 8;
  AdamWConfig optim{1e-3, 0.9, 0.95, 1e-8, 0.05};

  void validate() const {
    if (!(mask_ratio >= 0.0 && mask_ratio < 1.0))
      throw ConfigError("mae.mask_ratio must be in [0, 1), got " + std::to_string(mask_ratio));
    if (epochs < 0) throw ConfigError("mae.epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("mae.batch_size must be >= 1");
    if (decoder_depth < 0) throw ConfigError("mae.decoder_depth must be >= 0");
  }
};

template <class T>
struct MaeModel {
  Encoder<T> encoder;
  MaeConfig cfg;
  Linear<T> dec_embed;
  Tensor<T> mask_token;  // [1, Dd]
  std::vector<Block<T>> dec_blocks;
  LayerNorm<T> dec_norm;
  Linear<T> dec_pred;

  MaeModel() = default;
  MaeModel(const EncoderConfig& ec, const MaeConfig& mc, Rng rng)
      : encoder(ec, rng.split("encoder")), cfg(mc) {
    mc.validate();
    const auto Dd = decoder_dim();
    const auto heads = mc.decoder_heads > 0 ? mc.decoder_heads : ec.heads;
    dec_embed = Linear<T>(ec.embed_dim, Dd, rng.split("dec_embed"));
    mask_token = param<T>({1, Dd});
    Rng mr = rng.split("mask_token");
    init_normal(mask_token, mr, 0.02);
    for (std::int64_t i = 0; i < mc.decoder_depth; ++i)
      dec_blocks.emplace_back(Dd, heads, ec.mlp_ratio,
                              rng.split("dec_block").split(static_cast<std::uint64_t>(i)));
    dec_norm = LayerNorm<T>(Dd);
    dec_pred = Linear<T>(Dd, patch_values(), rng.split("dec_pred"));
  }

  std::int64_t decoder_dim() const {
    return cfg.decoder_dim > 0 ? cfg.decoder_dim : std::max<std::int64_t>(encoder.cfg.embed_dim / 2, 1);
  }
  std::int64_t patch_values() const {
    const auto& e = encoder.cfg;
    return e.in_chans * e.patch_t * e.patch * e.patch;
  }

  void collect(ParamList<T>& out) const {
    encoder.collect(out, "encoder");
    dec_embed.collect(out, "decoder.embed");
    out.push_back({"decoder.mask_token", mask_token});
    for (std::size_t i = 0; i < dec_blocks.size(); ++i)
      dec_blocks[i].collect(out, "decoder.blocks." + std::to_string(i));
    dec_norm.collect(out, "decoder.norm");
    dec_pred.collect(out, "decoder.pred");
  }
};

// Reconstruction [N, C*t*p*p] for every token.
template <class T>
Tensor<T> mae_forward(const MaeModel<T>& m, const Tensor<T>& x, const MaskPlan& plan) {
  auto grid = m.encoder.tokenize(x);
  const auto N = grid.size();
  if (plan.N != N)
    throw UsageError("mae_forward: mask plan covers " + std::to_string(plan.N) +
                     " tokens, input has " + std::to_string(N));
  auto latent = m.encoder.run_blocks(gather_rows(grid.tokens, plan.visible));
  auto dec = m.dec_embed(latent);
  Tensor<T> full;
  if (plan.masked.empty()) {
    full = dec;
  } else {
    auto fill_tokens = gather_rows(
        m.mask_token, std::vector<std::int64_t>(plan.masked.size(), std::int64_t{0}));
    // rows [visible..., masked...] back to token order
    std::vector<std::int64_t> where(static_cast<std::size_t>(N));
    std::int64_t k = 0;
    for (auto i : plan.visible) where[i] = k++;
    for (auto i : plan.masked) where[i] = k++;
    full = gather_rows(concat_rows<T>({dec, fill_tokens}), where);
  }
  if (m.encoder.cfg.pos_embed)
    full = add(full, sincos_pos_embed<T>(grid.coords, grid.frames, grid.rows, grid.cols,
                                         m.decoder_dim()));
  for (const auto& b : m.dec_blocks) full = b(full, {});
  return m.dec_pred(m.dec_norm(full));
}

// Mean squared error over the masked tokens only.
template <class T>
Tensor<T> mae_loss(const Tensor<T>& recon, const Tensor<T>& target, const MaskPlan& plan) {
  if (recon.shape() != target.shape())
    throw DimensionError("mae_loss: reconstruction " + shape_str(recon.shape()) + " vs target " +
                         shape_str(target.shape()));
  if (plan.masked.empty()) throw ConfigError("mae_loss: empty mask, loss undefined");
  return mse_loss(gather_rows(recon, plan.masked), gather_rows(target.detach(), plan.masked));
}

template <class T>
Tensor<T> mae_target(const MaeModel<T>& m, const Tensor<T>& x) {
  auto t = patchify(x, m.encoder.cfg.patch_t, m.encoder.cfg.patch);
  return m.cfg.norm_pix_loss ? normalize_patches(t) : t;
}

inline MaskPlan mask_for(std::uint64_t seed, std::int64_t epoch, std::int64_t index,
                         std::int64_t N, double ratio) {
  const auto s = Rng(seed).split("mask").split(static_cast<std::uint64_t>(epoch))
                     .split(static_cast<std::uint64_t>(index)).next_u64();
  return random_mask(N, ratio, s);
}

struct PretrainCurve {
  std::vector<double> epoch_loss;
};

// Epochs of mask -> forward -> masked MSE -> AdamW over `data` (normalized
// rasters). `on_epoch(epoch, mean_loss)` is called after every epoch.
template <class T>
PretrainCurve pretrain_loop(MaeModel<T>& model, const std::vector<Tensor<T>>& data,
                            std::uint64_t seed,
                            const std::function<void(std::int64_t, double)>& on_epoch = {}) {
  if (data.empty()) throw UsageError("pretrain_loop: empty dataset");
  const auto& cfg = model.cfg;
  cfg.validate();
  ParamList<T> params;
  model.collect(params);
  AdamW<T> opt(params, cfg.optim);
  const std::int64_t N = model.encoder.tokenize(data[0]).size();
  PretrainCurve curve;
  for (std::int64_t e = 0; e < cfg.epochs; ++e) {
    Rng order_rng = Rng(seed).split("order").split(static_cast<std::uint64_t>(e));
    auto order = order_rng.permutation(data.size());
    std::vector<double> per_scene(data.size(), 0.0);
    opt.zero_grad();
    std::int64_t in_batch = 0, step = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      const auto idx = static_cast<std::int64_t>(order[i]);
      const auto plan = mask_for(seed, cfg.resample_masks ? e : 0, idx, N, cfg.mask_ratio);
      const auto& x = data[order[i]];
      auto loss = mae_loss(mae_forward(model, x, plan), mae_target(model, x), plan);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv))
        throw NumericError("pretraining diverged at epoch " + std::to_string(e + 1) + " step " +
                           std::to_string(step) + " (loss " + std::to_string(lv) + ")");
      per_scene[order[i]] = lv;
      const auto remaining = static_cast<std::int64_t>(order.size() - i + in_batch);
      const auto bs = std::min<std::int64_t>(cfg.batch_size, remaining);
      backward(scale(loss, static_cast<T>(1.0 / static_cast<double>(bs))));
      if (++in_batch == bs) {
        opt.step();
        opt.zero_grad();
        in_batch = 0;
        ++step;
      }
    }
    double total = 0;
    for (double v : per_scene) total += v;  // scene order, independent of shuffling
    curve.epoch_loss.push_back(total / static_cast<double>(data.size()));
    if (on_epoch) on_epoch(e, curve.epoch_loss.back());
  }
  return curve;
}

}  // namespace gfm
