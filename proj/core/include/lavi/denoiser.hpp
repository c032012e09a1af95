#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lavi/nn.hpp"

namespace lavi {

enum class DenoiserKind { unet, dit };

std::string to_string(DenoiserKind kind);

struct DenoiserConfig {
  DenoiserKind kind = DenoiserKind::unet;
  std::int64_t base_channels = 32;              // unet: level-0 width; dit: token width
  std::vector<int> channel_multipliers{1, 2, 2};  // unet
  int depth = 6;                                 // dit
  std::int64_t cross_dim = 64;                   // d_V, width of the adapted text
  int num_heads = 4;
  int patch_size = 4;  // dit
  std::int64_t in_channels = 3;
  int resolution = 32;
  std::uint64_t seed = 2;

  void validate() const;
  // Channel width at each U-Net level.
  std::vector<std::int64_t> level_channels() const;
};

// unet-small, unet-base, dit-base.
DenoiserConfig denoiser_preset(std::string_view name);
std::vector<std::string> denoiser_preset_names();

// Interleaved [sin(t w_0), cos(t w_0), sin(t w_1), ...] with w_i = 10000^(-2i/dim).
Tensor timestep_embedding(int t, int dim);
// One row per timestep: [N, dim].
Tensor timestep_embedding(std::span<const int> t, int dim);

// z + o(attn(norm(z) W_q, c W_k, c W_v)) where norm is applied only when given.
// z is [B, N, d_feat]; c is [B, L, d_V]; mask is [B, L].
Var cross_attention(const Var& z, const Var& c, const nn::Attention& w, std::span<const std::uint8_t> mask,
                    const nn::LayerNorm* norm = nullptr);

// Predicts eps from (x_t, t, adapted text). Concrete models name their layers
// with a "unet." or "dit." prefix.
class VisionModel : public nn::Module {
 public:
  explicit VisionModel(DenoiserConfig config) : config_(std::move(config)) {}

  const DenoiserConfig& config() const { return config_; }

  // x: [N, C, H, W]; t: N timesteps; context: [N, L, cross_dim]; mask: [N, L].
  virtual Var forward(const Var& x, std::span<const int> t, const Var& context,
                      std::span<const std::uint8_t> mask) const = 0;

 protected:
  void check_inputs(const Var& x, std::span<const int> t, const Var& context,
                    std::span<const std::uint8_t> mask) const;

  DenoiserConfig config_;
};

class UNet : public VisionModel {
 public:
  explicit UNet(DenoiserConfig config);

  Var forward(const Var& x, std::span<const int> t, const Var& context,
              std::span<const std::uint8_t> mask) const override;
  void visit(nn::Visitor& v) override;

 private:
  struct ResBlock {
    nn::GroupNorm norm1, norm2;
    nn::Conv2d conv1, conv2, skip;
    nn::Linear temb;
    bool has_skip = false;

    ResBlock() = default;
    ResBlock(std::int64_t in, std::int64_t out, std::int64_t temb_dim, Rng& rng);
    Var forward(const Var& x, const Var& temb_act) const;
    void visit(const std::string& prefix, nn::Visitor& v);
  };

  struct AttnBlock {
    nn::LayerNorm norm1, norm2;
    nn::Attention self, cross;

    AttnBlock() = default;
    AttnBlock(std::int64_t channels, std::int64_t cross_dim, int heads, Rng& rng);
    Var forward(const Var& x, const Var& context, std::span<const std::uint8_t> mask) const;
    void visit(const std::string& prefix, nn::Visitor& v);
  };

  struct Level {
    ResBlock res;
    bool has_attn = false;
    AttnBlock attn;
    nn::Conv2d resample;  // downsample (down path) or upsample conv (up path)
    bool has_resample = false;
  };

  nn::Conv2d in_;
  nn::Linear time_fc1_, time_fc2_;
  std::vector<Level> down_;
  ResBlock mid_res_;
  AttnBlock mid_attn_;
  std::vector<Level> up_;  // indexed by level, evaluated from the last level to 0
  nn::GroupNorm out_norm_;
  nn::Conv2d out_;
};

class DiT : public VisionModel {
 public:
  explicit DiT(DenoiserConfig config);

  Var forward(const Var& x, std::span<const int> t, const Var& context,
              std::span<const std::uint8_t> mask) const override;
  void visit(nn::Visitor& v) override;

  std::int64_t num_tokens() const;

 private:
  struct Block {
    nn::Linear temb;
    nn::LayerNorm norm1, norm2, norm3;
    nn::Attention self, cross;
    nn::Linear fc1, fc2;
  };

  nn::Linear patch_embed_;
  Var pos_embed_;  // fixed 2-D sin-cos table, stored frozen
  nn::Linear time_fc1_, time_fc2_;
  std::vector<Block> blocks_;
  nn::LayerNorm final_norm_;
  nn::Linear final_;
};

std::unique_ptr<VisionModel> make_vision_model(const DenoiserConfig& config);

}  // namespace lavi
