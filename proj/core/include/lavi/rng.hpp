#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "lavi/tensor.hpp"

namespace lavi {

// Seeded random source whose complete state (engine plus the normal
// distribution's cached draw) can be saved and restored as text.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  // Independent stream for (seed, stream), e.g. one per dataset item.
  static Rng derive(std::uint64_t seed, std::uint64_t stream);

  double uniform();                                        // [0, 1)
  double normal();                                         // N(0, 1)
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);  // inclusive
  bool bernoulli(double p);

  Tensor normal_tensor(Shape shape, Scalar stddev = 1.0);
  Tensor uniform_tensor(Shape shape, Scalar lo, Scalar hi);

  std::string state() const;
  void set_state(const std::string& state);

  bool operator==(const Rng& other) const { return state() == other.state(); }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_;
};

}  // namespace lavi
