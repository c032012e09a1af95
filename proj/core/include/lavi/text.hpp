#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lavi/nn.hpp"

namespace lavi {

// Word-level vocabulary. Ids are dense; the first four are reserved.
class Vocabulary {
 public:
  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kBos = 1;
  static constexpr std::int64_t kEos = 2;
  static constexpr std::int64_t kUnk = 3;

  // One token per line; zero-based line index is the id.
  static Vocabulary load(const std::string& path);
  static Vocabulary parse(std::string_view text);
  // The committed vocabulary compiled into the library.
  static const Vocabulary& builtin();

  std::int64_t id(std::string_view token) const;  // kUnk when absent
  bool contains(std::string_view token) const;
  const std::string& token(std::int64_t id) const;
  std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int64_t> ids_;
};

// Lowercased whitespace-separated words of a prompt.
std::vector<std::string> split_words(std::string_view prompt);

// Number of ids the prompt needs before truncation (words + BOS + EOS).
std::int64_t token_count(std::string_view prompt);

// BOS, words, EOS, then PAD up to max_len. Words beyond max_len - 2 are dropped.
std::vector<std::int64_t> tokenize(const Vocabulary& vocab, std::string_view prompt, std::int64_t max_len);

struct TokenBatch {
  std::vector<std::int64_t> ids;  // [batch, length]
  ops::Mask mask;                 // nonzero where id != PAD
  std::int64_t batch = 0;
  std::int64_t length = 0;

  static TokenBatch from_ids(std::vector<std::int64_t> ids, std::int64_t batch, std::int64_t length);
};

TokenBatch tokenize_batch(const Vocabulary& vocab, const std::vector<std::string>& prompts, std::int64_t max_len);

enum class ArchKind { encoder_only, encoder_decoder, decoder_only };

std::string to_string(ArchKind kind);
ArchKind parse_arch_kind(std::string_view name);

struct TextEncoderConfig {
  ArchKind arch = ArchKind::encoder_only;
  int num_layers = 2;
  std::int64_t embed_dim = 64;
  int num_heads = 4;
  std::int64_t max_len = 16;
  int ffn_mult = 4;
  std::uint64_t seed = 1;  // base-weight initialization

  void validate() const;
};

// lm-small, lm-base, lm-large.
TextEncoderConfig text_encoder_preset(std::string_view name, ArchKind arch);
std::vector<std::string> text_encoder_preset_names();

// Embeddings c = f(y) with their validity mask. Masked rows are zero.
struct TextEncoding {
  Var embeddings;  // [batch, length, dim]
  ops::Mask mask;  // [batch, length]

  std::int64_t batch() const { return embeddings.dim(0); }
  std::int64_t length() const { return embeddings.dim(1); }
  std::int64_t dim() const { return embeddings.dim(2); }
};

// Pre-norm transformer block; the cross-attention sub-layer is present only
// in encoder-decoder decoder blocks.
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(std::int64_t dim, int heads, int ffn_mult, bool with_cross, Rng& rng);

  Var forward(const Var& x, std::span<const std::uint8_t> mask, bool causal, const TextEncoding* context) const;
  void visit(const std::string& prefix, nn::Visitor& v, bool decoder_names);

 private:
  nn::LayerNorm ln1_, ln2_, ln3_;
  nn::Attention attn_, cross_;
  nn::Linear fc1_, fc2_;
  bool with_cross_ = false;
};

// Miniature language model in one of the three transformer layouts.
class LanguageModel : public nn::Module {
 public:
  LanguageModel(TextEncoderConfig config, const Vocabulary& vocab);

  const TextEncoderConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return *vocab_; }

  // Final-layer hidden states (no final norm): bidirectional for
  // encoder-only, causal for decoder-only, encoder stack for encoder-decoder.
  TextEncoding encode(const TokenBatch& tokens) const;
  TextEncoding encode(const std::vector<std::string>& prompts) const;

  // Decoder stack of an encoder-decoder model over target tokens.
  Var decode(const TokenBatch& targets, const TextEncoding& encoder_out) const;

  // encode(tokenize("")), computed without a tape and cached until the
  // parameters are declared updated.
  const TextEncoding& null_encoding() const;
  void parameters_updated() { ++version_; }

  void visit(nn::Visitor& v) override;

  // Test hook: zero the learned positional table.
  void zero_positional_embeddings();

 private:
  TextEncoderConfig config_;
  const Vocabulary* vocab_;
  Var tok_embed_;
  Var pos_embed_;
  std::vector<TransformerBlock> blocks_;   // encoder or decoder-only stack
  std::vector<TransformerBlock> decoder_;  // encoder-decoder only
  std::uint64_t version_ = 0;
  mutable std::optional<std::pair<std::uint64_t, TextEncoding>> null_cache_;
};

}  // namespace lavi
