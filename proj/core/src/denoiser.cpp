#include "lavi/denoiser.hpp"

#include <cmath>

#include "lavi/error.hpp"

namespace lavi {

std::string to_string(DenoiserKind kind) { return kind == DenoiserKind::unet ? "unet" : "dit"; }

void DenoiserConfig::validate() const {
  if (base_channels < 1 || cross_dim < 1 || num_heads < 1 || in_channels < 1 || resolution < 1) {
    throw ConfigError("vision model: widths, heads and resolution must be positive");
  }
  if (cross_dim % num_heads != 0) {
    throw ConfigError("vision model: cross_dim " + std::to_string(cross_dim) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (kind == DenoiserKind::unet) {
    if (channel_multipliers.empty()) throw ConfigError("unet: channel_multipliers must not be empty");
    for (int m : channel_multipliers) {
      if (m < 1) throw ConfigError("unet: channel multipliers must be positive");
      if ((base_channels * m) % num_heads != 0) {
        throw ConfigError("unet: level width " + std::to_string(base_channels * m) + " not divisible by num_heads");
      }
    }
    const int f = 1 << (channel_multipliers.size() - 1);
    if (resolution % f != 0) {
      throw ConfigError("unet: resolution " + std::to_string(resolution) + " not divisible by " + std::to_string(f));
    }
  } else {
    if (depth < 0) throw ConfigError("dit: depth must be >= 0");
    if (patch_size < 1 || resolution % patch_size != 0) {
      throw ConfigError("dit: resolution " + std::to_string(resolution) + " not divisible by patch_size " +
                        std::to_string(patch_size));
    }
    if (base_channels % num_heads != 0 || base_channels % 4 != 0) {
      throw ConfigError("dit: width must be divisible by num_heads and by 4");
    }
  }
}

std::vector<std::int64_t> DenoiserConfig::level_channels() const {
  std::vector<std::int64_t> ch;
  for (int m : channel_multipliers) ch.push_back(base_channels * m);
  return ch;
}

DenoiserConfig denoiser_preset(std::string_view name) {
  DenoiserConfig c;
  if (name == "unet-small") {
    c.base_channels = 32;
    c.cross_dim = 64;
  } else if (name == "unet-base") {
    c.base_channels = 64;
    c.cross_dim = 128;
  } else if (name == "dit-base") {
    c.kind = DenoiserKind::dit;
    c.base_channels = 128;
    c.depth = 6;
    c.patch_size = 4;
    c.cross_dim = 128;
  } else {
    throw ConfigError("unknown vision preset '" + std::string(name) + "' (expected unet-small, unet-base or dit-base)");
  }
  return c;
}

std::vector<std::string> denoiser_preset_names() { return {"unet-small", "unet-base", "dit-base"}; }

Tensor timestep_embedding(int t, int dim) {
  const int one[] = {t};
  return timestep_embedding(std::span<const int>(one), dim).reshaped({dim});
}

Tensor timestep_embedding(std::span<const int> t, int dim) {
  LAVI_EXPECT(dim > 0 && dim % 2 == 0, "timestep_embedding: dim must be even, got " + std::to_string(dim));
  const int half = dim / 2;
  Tensor out({static_cast<std::int64_t>(t.size()), dim});
  for (std::size_t n = 0; n < t.size(); ++n) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / half);
      const double arg = t[n] * freq;
      out[static_cast<std::int64_t>(n) * dim + 2 * i] = std::sin(arg);
      out[static_cast<std::int64_t>(n) * dim + 2 * i + 1] = std::cos(arg);
    }
  }
  return out;
}

Var cross_attention(const Var& z, const Var& c, const nn::Attention& w, std::span<const std::uint8_t> mask,
                    const nn::LayerNorm* norm) {
  LAVI_EXPECT(z.value().rank() == 3 && c.value().rank() == 3 && z.dim(0) == c.dim(0),
              "cross_attention: expected [B,N,d] features and [B,L,d_V] context, got " + shape_str(z.shape()) +
                  " and " + shape_str(c.shape()));
  LAVI_EXPECT(mask.empty() || static_cast<std::int64_t>(mask.size()) == c.dim(0) * c.dim(1),
              "cross_attention: mask length does not match context");
  Var q = norm ? norm->forward(z) : z;
  return ops::add(z, w.attend(q, c, mask, false));
}

void VisionModel::check_inputs(const Var& x, std::span<const int> t, const Var& context,
                               std::span<const std::uint8_t> mask) const {
  const auto& c = config_;
  LAVI_EXPECT(x.value().rank() == 4 && x.dim(1) == c.in_channels && x.dim(2) == c.resolution &&
                  x.dim(3) == c.resolution,
              "denoiser input " + shape_str(x.shape()) + " does not match configured [N," +
                  std::to_string(c.in_channels) + "," + std::to_string(c.resolution) + "," +
                  std::to_string(c.resolution) + "]");
  LAVI_EXPECT(static_cast<std::int64_t>(t.size()) == x.dim(0), "denoiser: need one timestep per batch item");
  LAVI_EXPECT(context.value().rank() == 3 && context.dim(0) == x.dim(0) && context.dim(2) == c.cross_dim,
              "denoiser context " + shape_str(context.shape()) + " must be [N, L, " + std::to_string(c.cross_dim) +
                  "]");
  LAVI_EXPECT(mask.empty() || static_cast<std::int64_t>(mask.size()) == context.dim(0) * context.dim(1),
              "denoiser: mask length does not match context");
}

// ---------------------------------------------------------------- U-Net

UNet::ResBlock::ResBlock(std::int64_t in, std::int64_t out, std::int64_t temb_dim, Rng& rng)
    : norm1(in), norm2(out), has_skip(in != out) {
  conv1 = nn::Conv2d(in, out, 3, 1, 1, true, rng);
  temb = nn::Linear(temb_dim, out, true, rng);
  conv2 = nn::Conv2d(out, out, 3, 1, 1, true, rng);
  if (has_skip) skip = nn::Conv2d(in, out, 1, 1, 0, true, rng);
}

Var UNet::ResBlock::forward(const Var& x, const Var& temb_act) const {
  Var h = conv1.forward(ops::silu(norm1.forward(x)));
  h = ops::add_channel_bias(h, temb.forward(temb_act));
  h = conv2.forward(ops::silu(norm2.forward(h)));
  return ops::add(has_skip ? skip.forward(x) : x, h);
}

void UNet::ResBlock::visit(const std::string& prefix, nn::Visitor& v) {
  v.norm(prefix + ".norm1", norm1);
  v.conv(prefix + ".conv1", conv1);
  v.linear(prefix + ".temb", temb);
  v.norm(prefix + ".norm2", norm2);
  v.conv(prefix + ".conv2", conv2);
  if (has_skip) v.conv(prefix + ".skip", skip);
}

UNet::AttnBlock::AttnBlock(std::int64_t channels, std::int64_t cross_dim, int heads, Rng& rng)
    : norm1(channels), norm2(channels) {
  self = nn::Attention(channels, channels, heads, rng);
  cross = nn::Attention(channels, cross_dim, heads, rng);
}

Var UNet::AttnBlock::forward(const Var& x, const Var& context, std::span<const std::uint8_t> mask) const {
  const auto h = x.dim(2), w = x.dim(3);
  Var z = ops::nchw_to_tokens(x);
  Var n = norm1.forward(z);
  z = ops::add(z, self.attend(n, n, {}, false));
  z = cross_attention(z, context, cross, mask, &norm2);
  return ops::tokens_to_nchw(z, h, w);
}

void UNet::AttnBlock::visit(const std::string& prefix, nn::Visitor& v) {
  v.norm(prefix + ".attn_norm", norm1);
  self.visit(prefix + ".attn", v);
  v.norm(prefix + ".xattn_norm", norm2);
  cross.visit(prefix + ".xattn", v);
}

UNet::UNet(DenoiserConfig config) : VisionModel(std::move(config)) {
  config_.kind = DenoiserKind::unet;
  config_.validate();
  Rng rng(config_.seed);
  const auto ch = config_.level_channels();
  const auto levels = static_cast<int>(ch.size());
  const std::int64_t tdim = 4 * config_.base_channels;
  // The two lowest resolutions carry attention.
  auto attn_at = [&](int i) { return i >= levels - 2; };

  in_ = nn::Conv2d(config_.in_channels, ch[0], 3, 1, 1, true, rng);
  time_fc1_ = nn::Linear(config_.base_channels, tdim, true, rng);
  time_fc2_ = nn::Linear(tdim, tdim, true, rng);

  std::int64_t prev = ch[0];
  down_.resize(ch.size());
  for (int i = 0; i < levels; ++i) {
    auto& lv = down_[static_cast<std::size_t>(i)];
    lv.res = ResBlock(prev, ch[i], tdim, rng);
    lv.has_attn = attn_at(i);
    if (lv.has_attn) lv.attn = AttnBlock(ch[i], config_.cross_dim, config_.num_heads, rng);
    lv.has_resample = i + 1 < levels;
    if (lv.has_resample) lv.resample = nn::Conv2d(ch[i], ch[i], 3, 2, 1, true, rng);
    prev = ch[i];
  }
  mid_res_ = ResBlock(prev, prev, tdim, rng);
  mid_attn_ = AttnBlock(prev, config_.cross_dim, config_.num_heads, rng);

  up_.resize(ch.size());
  for (int i = levels - 1; i >= 0; --i) {
    auto& lv = up_[static_cast<std::size_t>(i)];
    lv.res = ResBlock(2 * ch[i], ch[i], tdim, rng);
    lv.has_attn = attn_at(i);
    if (lv.has_attn) lv.attn = AttnBlock(ch[i], config_.cross_dim, config_.num_heads, rng);
    lv.has_resample = i > 0;
    if (lv.has_resample) lv.resample = nn::Conv2d(ch[i], ch[i - 1], 3, 1, 1, true, rng);
  }
  out_norm_ = nn::GroupNorm(ch[0]);
  out_ = nn::Conv2d(ch[0], config_.in_channels, 3, 1, 1, true, rng);
}

Var UNet::forward(const Var& x, std::span<const int> t, const Var& context,
                  std::span<const std::uint8_t> mask) const {
  check_inputs(x, t, context, mask);
  Var temb = Var::constant(timestep_embedding(t, static_cast<int>(config_.base_channels)));
  temb = time_fc2_.forward(ops::silu(time_fc1_.forward(temb)));
  const Var temb_act = ops::silu(temb);

  Var h = in_.forward(x);
  std::vector<Var> skips;
  for (const auto& lv : down_) {
    h = lv.res.forward(h, temb_act);
    if (lv.has_attn) h = lv.attn.forward(h, context, mask);
    skips.push_back(h);
    if (lv.has_resample) h = lv.resample.forward(h);
  }
  h = mid_res_.forward(h, temb_act);
  h = mid_attn_.forward(h, context, mask);
  for (auto i = static_cast<int>(up_.size()) - 1; i >= 0; --i) {
    const auto& lv = up_[static_cast<std::size_t>(i)];
    h = lv.res.forward(ops::concat_channels(h, skips[static_cast<std::size_t>(i)]), temb_act);
    if (lv.has_attn) h = lv.attn.forward(h, context, mask);
    if (lv.has_resample) h = lv.resample.forward(ops::upsample_nearest2x(h));
  }
  return out_.forward(ops::silu(out_norm_.forward(h)));
}

void UNet::visit(nn::Visitor& v) {
  v.conv("unet.in", in_);
  v.linear("unet.time.fc1", time_fc1_);
  v.linear("unet.time.fc2", time_fc2_);
  for (std::size_t i = 0; i < down_.size(); ++i) {
    const std::string p = "unet.down" + std::to_string(i);
    down_[i].res.visit(p + ".res", v);
    if (down_[i].has_attn) down_[i].attn.visit(p, v);
    if (down_[i].has_resample) v.conv(p + ".downsample", down_[i].resample);
  }
  mid_res_.visit("unet.mid.res", v);
  mid_attn_.visit("unet.mid", v);
  for (auto i = static_cast<int>(up_.size()) - 1; i >= 0; --i) {
    auto& lv = up_[static_cast<std::size_t>(i)];
    const std::string p = "unet.up" + std::to_string(i);
    lv.res.visit(p + ".res", v);
    if (lv.has_attn) lv.attn.visit(p, v);
    if (lv.has_resample) v.conv(p + ".upsample", lv.resample);
  }
  v.norm("unet.out_norm", out_norm_);
  v.conv("unet.out", out_);
}

// ---------------------------------------------------------------- DiT

namespace {

// Fixed 2-D sin-cos table [grid*grid, dim]: first half encodes the row,
// second half the column.
Tensor sincos_2d(std::int64_t grid, std::int64_t dim) {
  Tensor out({grid * grid, dim});
  const std::int64_t quarter = dim / 4;
  for (std::int64_t r = 0; r < grid; ++r)
    for (std::int64_t c = 0; c < grid; ++c) {
      const std::int64_t row = (r * grid + c) * dim;
      for (std::int64_t i = 0; i < quarter; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / quarter);
        out[row + i] = std::sin(r * freq);
        out[row + quarter + i] = std::cos(r * freq);
        out[row + 2 * quarter + i] = std::sin(c * freq);
        out[row + 3 * quarter + i] = std::cos(c * freq);
      }
    }
  return out;
}

}  // namespace

DiT::DiT(DenoiserConfig config) : VisionModel(std::move(config)) {
  config_.kind = DenoiserKind::dit;
  config_.validate();
  Rng rng(config_.seed);
  const std::int64_t d = config_.base_channels;
  const std::int64_t p = config_.patch_size;
  patch_embed_ = nn::Linear(config_.in_channels * p * p, d, true, rng);
  pos_embed_ = Var::leaf(sincos_2d(config_.resolution / p, d), false);
  time_fc1_ = nn::Linear(d, d, true, rng);
  time_fc2_ = nn::Linear(d, d, true, rng);
  blocks_.resize(static_cast<std::size_t>(config_.depth));
  for (auto& b : blocks_) {
    b.temb = nn::Linear(d, d, true, rng);
    b.norm1 = nn::LayerNorm(d);
    b.self = nn::Attention(d, d, config_.num_heads, rng);
    b.norm2 = nn::LayerNorm(d);
    b.cross = nn::Attention(d, config_.cross_dim, config_.num_heads, rng);
    b.norm3 = nn::LayerNorm(d);
    b.fc1 = nn::Linear(d, 4 * d, true, rng);
    b.fc2 = nn::Linear(4 * d, d, true, rng);
  }
  final_norm_ = nn::LayerNorm(d);
  final_ = nn::Linear(d, config_.in_channels * p * p, true, rng);
}

std::int64_t DiT::num_tokens() const {
  const std::int64_t g = config_.resolution / config_.patch_size;
  return g * g;
}

Var DiT::forward(const Var& x, std::span<const int> t, const Var& context,
                 std::span<const std::uint8_t> mask) const {
  check_inputs(x, t, context, mask);
  const std::int64_t d = config_.base_channels;
  Var temb = Var::constant(timestep_embedding(t, static_cast<int>(d)));
  temb = time_fc2_.forward(ops::silu(time_fc1_.forward(temb)));
  const Var temb_act = ops::silu(temb);

  Var h = ops::add_rows(patch_embed_.forward(ops::patchify(x, config_.patch_size)), pos_embed_);
  for (const auto& b : blocks_) {
    h = ops::add_token_bias(h, b.temb.forward(temb_act));
    Var n = b.norm1.forward(h);
    h = ops::add(h, b.self.attend(n, n, {}, false));
    h = cross_attention(h, context, b.cross, mask, &b.norm2);
    h = ops::add(h, b.fc2.forward(ops::gelu(b.fc1.forward(b.norm3.forward(h)))));
  }
  h = final_.forward(final_norm_.forward(h));
  return ops::unpatchify(h, config_.patch_size, config_.in_channels, config_.resolution, config_.resolution);
}

void DiT::visit(nn::Visitor& v) {
  v.linear("dit.patch_embed", patch_embed_);
  v.parameter("dit.pos_embed", pos_embed_);
  v.linear("dit.time.fc1", time_fc1_);
  v.linear("dit.time.fc2", time_fc2_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto& b = blocks_[i];
    const std::string p = "dit.blocks." + std::to_string(i);
    v.linear(p + ".temb", b.temb);
    v.norm(p + ".norm1", b.norm1);
    b.self.visit(p + ".attn", v);
    v.norm(p + ".norm2", b.norm2);
    b.cross.visit(p + ".xattn", v);
    v.norm(p + ".norm3", b.norm3);
    v.linear(p + ".ff.fc1", b.fc1);
    v.linear(p + ".ff.fc2", b.fc2);
  }
  v.norm("dit.final_norm", final_norm_);
  v.linear("dit.final", final_);
}

std::unique_ptr<VisionModel> make_vision_model(const DenoiserConfig& config) {
  if (config.kind == DenoiserKind::unet) return std::make_unique<UNet>(config);
  return std::make_unique<DiT>(config);
}

}  // namespace lavi
