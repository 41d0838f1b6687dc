#pragma once

#include <cstdint>
#include <limits>
#include <vector>

namespace discon {

// Counter-based, splittable generator. The full state is (key, counter), so a
// stream can be saved, restored and forked without hidden buffers. Every
// stochastic routine in the project draws from this type.
class Rng {
 public:
  using result_type = std::uint64_t;

  Rng() = default;
  explicit Rng(std::uint64_t seed);
  Rng(std::uint64_t key, std::uint64_t counter) : key_(key), counter_(counter) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return next_u64(); }
  std::uint64_t next_u64();

  // Independent child stream; does not advance this stream.
  Rng split(std::uint64_t stream) const;

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal via Box-Muller; consumes exactly two draws.
  double normal();
  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n);

  // Uniform random permutation of [0, n).
  std::vector<int> permutation(int n);
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace discon
