#include "lavi/train.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "lavi/error.hpp"

namespace lavi {

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("train: steps must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("train: learning_rate must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("train: weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("train: betas must be in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("train: adam_eps must be > 0");
  if (!(p_uncond >= 0 && p_uncond <= 1)) throw ConfigError("train: p_uncond must be in [0, 1]");
  if (snapshot_every < 1 || steps % snapshot_every != 0) {
    throw ConfigError("train: snapshot_every (" + std::to_string(snapshot_every) + ") must divide steps (" +
                      std::to_string(steps) + ")");
  }
  if (resolution < 1) throw ConfigError("train: resolution must be positive");
}

Batch make_batch(std::uint64_t seed, std::int64_t first, int count, int resolution) {
  Batch b;
  b.images = Tensor({count, 3, resolution, resolution});
  const std::int64_t per = 3LL * resolution * resolution;
  for (int i = 0; i < count; ++i) {
    Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(first + i));
    auto [spec, text] = generate_scene(rng);
    const Tensor img = render(spec, resolution);
    std::copy(img.data().begin(), img.data().end(), b.images.data().begin() + i * per);
    b.captions.push_back(std::move(text));
    b.specs.push_back(std::move(spec));
  }
  return b;
}

AdamW::AdamW(const std::vector<nn::NamedVar>& params, const TrainConfig& cfg)
    : lr_(cfg.learning_rate), wd_(cfg.weight_decay), b1_(cfg.beta1), b2_(cfg.beta2), eps_(cfg.adam_eps) {
  for (const auto& [name, p] : params) {
    m_.emplace_back(p.shape());
    v_.emplace_back(p.shape());
  }
}

void AdamW::step(std::vector<nn::NamedVar>& params) {
  LAVI_EXPECT(params.size() == m_.size(), "AdamW: parameter list changed size");
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Var& p = params[k].second;
    Tensor& w = p.mutable_value();
    LAVI_EXPECT(w.shape() == m_[k].shape(), "AdamW: shape of '" + params[k].first + "' changed");
    const bool has = p.has_grad();
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::int64_t i = 0; i < w.numel(); ++i) {
      const double g = has ? p.grad()[i] : 0.0;
      m[i] = b1_ * m[i] + (1.0 - b1_) * g;
      v[i] = b2_ * v[i] + (1.0 - b2_) * g * g;
      w[i] -= lr_ * wd_ * w[i];
      w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

void AdamW::restore(std::int64_t t, std::vector<Tensor> m, std::vector<Tensor> v) {
  LAVI_EXPECT(m.size() == m_.size() && v.size() == v_.size(), "AdamW: moment count mismatch");
  for (std::size_t k = 0; k < m.size(); ++k) {
    LAVI_EXPECT(m[k].shape() == m_[k].shape() && v[k].shape() == v_[k].shape(), "AdamW: moment shape mismatch");
  }
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

ItemDraws draw_items(Rng& rng, std::int64_t count, int num_steps, double p_uncond) {
  ItemDraws d;
  for (std::int64_t i = 0; i < count; ++i) {
    d.timesteps.push_back(static_cast<int>(rng.uniform_int(1, num_steps)));
    d.uncond.push_back(rng.bernoulli(p_uncond));
  }
  return d;
}

StepResult train_step(BridgedModel& model, const Batch& batch, const NoiseSchedule& sched, AdamW& opt, Rng& rng,
                      double p_uncond) {
  const auto n = static_cast<std::int64_t>(batch.captions.size());
  LAVI_EXPECT(n >= 1 && batch.images.dim(0) == n, "train_step: images and captions disagree");
  StepResult res;
  const ItemDraws draws = draw_items(rng, n, sched.num_steps, p_uncond);
  const std::vector<int>& ts = draws.timesteps;
  std::vector<std::string> prompts(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    res.uncond_items += draws.uncond[i] ? 1 : 0;
    prompts[i] = draws.uncond[i] ? "" : batch.captions[i];
  }
  const Tensor eps = rng.normal_tensor(batch.images.shape());
  const Tensor x_t = forward_noise(batch.images, ts, eps, sched);

  auto params = model.trainable_parameters();
  for (auto& [name, p] : params) p.zero_grad();

  const TextEncoding text = model.encode(prompts);
  const Var pred = model.predict(Var::constant(x_t), ts, text);
  const Var loss = ddpm_loss(pred, Var::constant(eps));
  res.loss = loss.value().item();
  if (!std::isfinite(res.loss)) {
    throw NumericalError("training loss is not finite (" + std::to_string(res.loss) +
                         "); lower the learning rate or check the inputs");
  }
  backward(loss);
  opt.step(params);
  for (auto& [name, p] : params) p.zero_grad();
  model.parameters_updated();
  return res;
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[8] = {'L', 'A', 'V', 'I', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kDtypeF64 = 1;

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    // Host order is little-endian on every supported target; reverse otherwise.
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    out_.append(reinterpret_cast<const char*>(b), sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out_ += s;
  }
  void tensor(const Tensor& t) {
    pod<std::uint8_t>(kDtypeF64);
    pod<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) pod<std::int64_t>(d);
    for (double v : t.data()) pod<double>(v);
  }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t pos) : bytes_(bytes), pos_(pos) {}

  template <typename T>
  T pod() {
    need(sizeof(T));
    unsigned char b[sizeof(T)];
    std::memcpy(b, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Tensor tensor() {
    if (pod<std::uint8_t>() != kDtypeF64) throw FormatError("checkpoint: unsupported tensor dtype");
    const auto rank = pod<std::uint32_t>();
    if (rank > 8) throw FormatError("checkpoint: implausible tensor rank");
    Shape shape;
    std::int64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = pod<std::int64_t>();
      if (d < 0 || d > (1LL << 32)) throw FormatError("checkpoint: implausible tensor dimension");
      shape.push_back(d);
      numel *= d;
    }
    need(static_cast<std::uint64_t>(numel) * sizeof(double));
    Tensor t(shape);
    for (std::int64_t i = 0; i < numel; ++i) t[i] = pod<double>();
    return t;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw FormatError("checkpoint: truncated data");
  }
  const std::string& bytes_;
  std::size_t pos_;
};

std::uint32_t crc(const std::string& s) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size())));
}

}  // namespace

std::string encode_checkpoint(const CheckpointRecord& r) {
  Writer payload;
  payload.str(r.config_text);
  payload.pod<std::int64_t>(r.step);
  payload.pod<std::uint32_t>(static_cast<std::uint32_t>(r.tensors.size()));
  for (const auto& [name, t] : r.tensors) {
    payload.str(name);
    payload.tensor(t);
  }
  LAVI_EXPECT(r.adam_m.size() == r.adam_v.size(), "checkpoint: optimizer moment lists differ in length");
  payload.pod<std::int64_t>(r.adam_steps);
  payload.pod<std::uint32_t>(static_cast<std::uint32_t>(r.adam_m.size()));
  for (std::size_t i = 0; i < r.adam_m.size(); ++i) {
    payload.tensor(r.adam_m[i]);
    payload.tensor(r.adam_v[i]);
  }
  payload.str(r.rng_state);

  Writer file;
  file.bytes().append(kMagic, sizeof(kMagic));
  file.pod<std::uint32_t>(CheckpointRecord::kVersion);
  file.pod<std::uint32_t>(crc(r.config_text));
  file.pod<std::uint64_t>(payload.bytes().size());
  file.pod<std::uint32_t>(crc(payload.bytes()));
  file.bytes() += payload.bytes();
  return std::move(file.bytes());
}

CheckpointRecord decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("checkpoint: bad magic (not a checkpoint file)");
  }
  Reader head(bytes, sizeof(kMagic));
  const auto version = head.pod<std::uint32_t>();
  if (version != CheckpointRecord::kVersion) {
    throw FormatError("checkpoint: format version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(CheckpointRecord::kVersion) + ")");
  }
  const auto config_crc = head.pod<std::uint32_t>();
  const auto size = head.pod<std::uint64_t>();
  const auto payload_crc = head.pod<std::uint32_t>();
  const std::size_t header = sizeof(kMagic) + 4 + 4 + 8 + 4;
  if (bytes.size() - header != size) throw FormatError("checkpoint: payload size does not match header");
  if (crc(bytes.substr(header)) != payload_crc) throw FormatError("checkpoint: integrity check failed (crc mismatch)");

  Reader in(bytes, header);
  CheckpointRecord r;
  r.config_text = in.str();
  if (crc(r.config_text) != config_crc) throw FormatError("checkpoint: config digest mismatch");
  r.step = in.pod<std::int64_t>();
  const auto n = in.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = in.str();
    r.tensors.emplace_back(std::move(name), in.tensor());
  }
  r.adam_steps = in.pod<std::int64_t>();
  const auto k = in.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < k; ++i) {
    r.adam_m.push_back(in.tensor());
    r.adam_v.push_back(in.tensor());
  }
  r.rng_state = in.str();
  if (!in.done()) throw FormatError("checkpoint: trailing bytes after payload");
  return r;
}

void save_checkpoint(const CheckpointRecord& record, const std::string& path) {
  const std::string bytes = encode_checkpoint(record);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("checkpoint: cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("checkpoint: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw FormatError("checkpoint: cannot rename into " + path);
}

CheckpointRecord load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

// ---------------------------------------------------------------- trainer

Trainer::Trainer(BridgedModel& model, NoiseSchedule sched, TrainConfig cfg)
    : model_(model),
      sched_(std::move(sched)),
      cfg_(std::move(cfg)),
      params_(model.trainable_parameters()),
      opt_(params_, cfg_),
      rng_(Rng::derive(~cfg_.seed, 0)) {
  cfg_.validate();
  if (cfg_.resolution != model.vision().config().resolution) {
    throw ConfigError("train: resolution " + std::to_string(cfg_.resolution) + " differs from the vision model's " +
                      std::to_string(model.vision().config().resolution));
  }
}

StepResult Trainer::step() {
  const Batch batch = make_batch(cfg_.seed, step_ * cfg_.batch_size, cfg_.batch_size, cfg_.resolution);
  const StepResult r = train_step(model_, batch, sched_, opt_, rng_, cfg_.p_uncond);
  ++step_;
  uncond_items_ += r.uncond_items;
  total_items_ += cfg_.batch_size;
  return r;
}

CheckpointRecord Trainer::checkpoint(const std::string& config_text) const {
  CheckpointRecord r;
  r.config_text = config_text;
  r.step = step_;
  for (const auto& [name, p] : params_) r.tensors.emplace_back(name, p.value());
  r.adam_steps = opt_.steps();
  r.adam_m = opt_.first_moments();
  r.adam_v = opt_.second_moments();
  r.rng_state = rng_.state();
  return r;
}

void load_trainable(BridgedModel& model, const CheckpointRecord& r) {
  auto params = model.trainable_parameters();
  if (r.tensors.size() != params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(r.tensors.size()) + " tensors, model has " +
                      std::to_string(params.size()) + " trainable tensors");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = r.tensors[i];
    if (name != params[i].first || t.shape() != params[i].second.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' " + shape_str(t.shape()) + " does not match model tensor '" +
                        params[i].first + "' " + shape_str(params[i].second.shape()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i].second.mutable_value() = r.tensors[i].second;
  model.parameters_updated();
}

void Trainer::restore(const CheckpointRecord& r) {
  load_trainable(model_, r);
  opt_.restore(r.adam_steps, r.adam_m, r.adam_v);
  rng_.set_state(r.rng_state);
  step_ = r.step;
}

}  // namespace lavi
