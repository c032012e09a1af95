#include "lavi/rng.hpp"

#include <sstream>

#include "lavi/error.hpp"

namespace lavi {

Rng::Rng(std::uint64_t seed) : engine_(seed) {}

Rng Rng::derive(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x1a71u};
  Rng r;
  r.engine_.seed(seq);
  return r;
}

double Rng::uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

double Rng::normal() { return normal_(engine_); }

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  LAVI_EXPECT(lo <= hi, "uniform_int: empty range");
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
}

bool Rng::bernoulli(double p) { return uniform() < p; }

Tensor Rng::normal_tensor(Shape shape, Scalar stddev) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = normal() * stddev;
  return t;
}

Tensor Rng::uniform_tensor(Shape shape, Scalar lo, Scalar hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = lo + (hi - lo) * uniform();
  return t;
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_ << ' ' << normal_;
  return os.str();
}

void Rng::set_state(const std::string& state) {
  std::istringstream is(state);
  is >> engine_ >> normal_;
  if (!is) throw FormatError("malformed RNG state");
}

}  // namespace lavi
