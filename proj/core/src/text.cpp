#include "lavi/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "lavi/error.hpp"

namespace lavi {

namespace detail {
extern const char* const kBuiltinVocabulary;  // generated from core/data/vocab.txt
}

Vocabulary Vocabulary::parse(std::string_view text) {
  Vocabulary v;
  std::istringstream is{std::string(text)};
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) throw FormatError("vocabulary: empty line at id " + std::to_string(v.tokens_.size()));
    if (!v.ids_.emplace(line, static_cast<std::int64_t>(v.tokens_.size())).second) {
      throw FormatError("vocabulary: duplicate token '" + line + "'");
    }
    v.tokens_.push_back(line);
  }
  if (v.tokens_.size() < 4 || v.tokens_[kPad] != "<pad>" || v.tokens_[kBos] != "<bos>" || v.tokens_[kEos] != "<eos>" ||
      v.tokens_[kUnk] != "<unk>") {
    throw FormatError("vocabulary: first four lines must be <pad>, <bos>, <eos>, <unk>");
  }
  return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("vocabulary: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

const Vocabulary& Vocabulary::builtin() {
  static const Vocabulary v = parse(detail::kBuiltinVocabulary);
  return v;
}

std::int64_t Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return ids_.count(std::string(token)) > 0; }

const std::string& Vocabulary::token(std::int64_t id) const {
  LAVI_EXPECT(id >= 0 && id < size(), "vocabulary id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::string> split_words(std::string_view prompt) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : prompt) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

std::int64_t token_count(std::string_view prompt) { return static_cast<std::int64_t>(split_words(prompt).size()) + 2; }

std::vector<std::int64_t> tokenize(const Vocabulary& vocab, std::string_view prompt, std::int64_t max_len) {
  LAVI_EXPECT(max_len >= 2, "tokenize: max_len must be >= 2");
  std::vector<std::int64_t> ids;
  ids.reserve(static_cast<std::size_t>(max_len));
  ids.push_back(Vocabulary::kBos);
  for (const auto& w : split_words(prompt)) {
    if (static_cast<std::int64_t>(ids.size()) >= max_len - 1) break;
    ids.push_back(vocab.id(w));
  }
  ids.push_back(Vocabulary::kEos);
  ids.resize(static_cast<std::size_t>(max_len), Vocabulary::kPad);
  return ids;
}

TokenBatch TokenBatch::from_ids(std::vector<std::int64_t> ids, std::int64_t batch, std::int64_t length) {
  LAVI_EXPECT(static_cast<std::int64_t>(ids.size()) == batch * length, "token batch size mismatch");
  TokenBatch tb;
  tb.mask.resize(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) tb.mask[i] = ids[i] != Vocabulary::kPad ? 1 : 0;
  tb.ids = std::move(ids);
  tb.batch = batch;
  tb.length = length;
  return tb;
}

TokenBatch tokenize_batch(const Vocabulary& vocab, const std::vector<std::string>& prompts, std::int64_t max_len) {
  std::vector<std::int64_t> ids;
  ids.reserve(prompts.size() * static_cast<std::size_t>(max_len));
  for (const auto& p : prompts) {
    auto one = tokenize(vocab, p, max_len);
    ids.insert(ids.end(), one.begin(), one.end());
  }
  return TokenBatch::from_ids(std::move(ids), static_cast<std::int64_t>(prompts.size()), max_len);
}

std::string to_string(ArchKind kind) {
  switch (kind) {
    case ArchKind::encoder_only: return "encoder_only";
    case ArchKind::encoder_decoder: return "encoder_decoder";
    case ArchKind::decoder_only: return "decoder_only";
  }
  return "?";
}

ArchKind parse_arch_kind(std::string_view name) {
  if (name == "encoder_only") return ArchKind::encoder_only;
  if (name == "encoder_decoder") return ArchKind::encoder_decoder;
  if (name == "decoder_only") return ArchKind::decoder_only;
  throw ConfigError("unknown language architecture '" + std::string(name) +
                    "' (expected encoder_only, encoder_decoder or decoder_only)");
}

void TextEncoderConfig::validate() const {
  if (num_layers < 0) throw ConfigError("language model: num_layers must be >= 0");
  if (embed_dim < 1 || num_heads < 1 || embed_dim % num_heads != 0) {
    throw ConfigError("language model: embed_dim must be a positive multiple of num_heads");
  }
  if (max_len < 2) throw ConfigError("language model: max_len must be >= 2");
  if (ffn_mult < 1) throw ConfigError("language model: ffn_mult must be >= 1");
}

TextEncoderConfig text_encoder_preset(std::string_view name, ArchKind arch) {
  TextEncoderConfig c;
  c.arch = arch;
  c.num_heads = 4;
  c.max_len = 16;
  if (name == "lm-small") {
    c.num_layers = 2;
    c.embed_dim = 64;
  } else if (name == "lm-base") {
    c.num_layers = 4;
    c.embed_dim = 128;
  } else if (name == "lm-large") {
    c.num_layers = 6;
    c.embed_dim = 192;
  } else {
    throw ConfigError("unknown language preset '" + std::string(name) + "' (expected lm-small, lm-base or lm-large)");
  }
  return c;
}

std::vector<std::string> text_encoder_preset_names() { return {"lm-small", "lm-base", "lm-large"}; }

TransformerBlock::TransformerBlock(std::int64_t dim, int heads, int ffn_mult, bool with_cross, Rng& rng)
    : ln1_(dim), ln2_(dim), ln3_(dim), with_cross_(with_cross) {
  attn_ = nn::Attention(dim, dim, heads, rng);
  if (with_cross_) cross_ = nn::Attention(dim, dim, heads, rng);
  fc1_ = nn::Linear(dim, dim * ffn_mult, true, rng);
  fc2_ = nn::Linear(dim * ffn_mult, dim, true, rng);
}

Var TransformerBlock::forward(const Var& x, std::span<const std::uint8_t> mask, bool causal,
                              const TextEncoding* context) const {
  Var n = ln1_.forward(x);
  Var h = ops::add(x, attn_.attend(n, n, mask, causal));
  if (with_cross_) {
    LAVI_EXPECT(context != nullptr, "decoder block requires encoder output");
    h = ops::add(h, cross_.attend(ln3_.forward(h), context->embeddings, context->mask, false));
  }
  return ops::add(h, fc2_.forward(ops::gelu(fc1_.forward(ln2_.forward(h)))));
}

void TransformerBlock::visit(const std::string& prefix, nn::Visitor& v, bool decoder_names) {
  v.norm(prefix + ".ln1", ln1_);
  attn_.visit(prefix + (decoder_names ? ".self_attn" : ".attn"), v);
  if (with_cross_) {
    v.norm(prefix + ".ln3", ln3_);
    cross_.visit(prefix + ".cross_attn", v);
  }
  v.norm(prefix + ".ln2", ln2_);
  v.linear(prefix + ".ff.fc1", fc1_);
  v.linear(prefix + ".ff.fc2", fc2_);
}

LanguageModel::LanguageModel(TextEncoderConfig config, const Vocabulary& vocab)
    : config_(std::move(config)), vocab_(&vocab) {
  config_.validate();
  Rng rng(config_.seed);
  const auto d = config_.embed_dim;
  tok_embed_ = Var::leaf(rng.normal_tensor({vocab.size(), d}, 1.0), false);
  pos_embed_ = Var::leaf(rng.normal_tensor({config_.max_len, d}, 0.5), false);
  for (int i = 0; i < config_.num_layers; ++i) {
    blocks_.emplace_back(d, config_.num_heads, config_.ffn_mult, false, rng);
  }
  if (config_.arch == ArchKind::encoder_decoder) {
    for (int i = 0; i < config_.num_layers; ++i) {
      decoder_.emplace_back(d, config_.num_heads, config_.ffn_mult, true, rng);
    }
  }
}

TextEncoding LanguageModel::encode(const TokenBatch& tokens) const {
  LAVI_EXPECT(tokens.length <= config_.max_len, "encode: sequence length " + std::to_string(tokens.length) +
                                                    " exceeds max_len " + std::to_string(config_.max_len));
  LAVI_EXPECT(tokens.length >= 1 && tokens.batch >= 1, "encode: empty token batch");
  Var h = ops::embedding(tok_embed_, tokens.ids, tokens.batch, tokens.length);
  h = ops::add_rows(h, pos_embed_);
  const bool causal = config_.arch == ArchKind::decoder_only;
  for (const auto& block : blocks_) h = block.forward(h, tokens.mask, causal, nullptr);
  return TextEncoding{ops::zero_masked_rows(h, tokens.mask), tokens.mask};
}

TextEncoding LanguageModel::encode(const std::vector<std::string>& prompts) const {
  return encode(tokenize_batch(*vocab_, prompts, config_.max_len));
}

Var LanguageModel::decode(const TokenBatch& targets, const TextEncoding& encoder_out) const {
  LAVI_EXPECT(config_.arch == ArchKind::encoder_decoder, "decode: only encoder-decoder models have a decoder");
  LAVI_EXPECT(targets.length <= config_.max_len, "decode: target sequence exceeds max_len");
  Var h = ops::embedding(tok_embed_, targets.ids, targets.batch, targets.length);
  h = ops::add_rows(h, pos_embed_);
  for (const auto& block : decoder_) h = block.forward(h, targets.mask, true, &encoder_out);
  return ops::zero_masked_rows(h, targets.mask);
}

const TextEncoding& LanguageModel::null_encoding() const {
  if (!null_cache_ || null_cache_->first != version_) {
    NoGradGuard no_grad;
    null_cache_.emplace(version_, encode(std::vector<std::string>{""}));
  }
  return null_cache_->second;
}

void LanguageModel::visit(nn::Visitor& v) {
  v.parameter("lm.tok_embed", tok_embed_);
  v.parameter("lm.pos_embed", pos_embed_);
  const bool enc_dec = config_.arch == ArchKind::encoder_decoder;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].visit((enc_dec ? "lm.encoder." : "lm.blocks.") + std::to_string(i), v, false);
  }
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    decoder_[i].visit("lm.decoder." + std::to_string(i), v, true);
  }
}

void LanguageModel::zero_positional_embeddings() {
  pos_embed_.mutable_value().fill(0.0);
  ++version_;
}

}  // namespace lavi
