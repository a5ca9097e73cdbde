#pragma once

#include <cstdint>
#include <vector>

namespace metabridge {

/// One splitmix64 step; advances `state` and returns the next value.
uint64_t splitmix64(uint64_t& state);

/// Derive a child stream seed from (base, purpose tag, indices).
/// Every RNG stream in the project is named this way so that runs are
/// reproducible regardless of thread count or call interleaving.
uint64_t mix_seed(uint64_t base, uint64_t tag);
uint64_t mix_seed(uint64_t base, uint64_t tag, uint64_t i);
uint64_t mix_seed(uint64_t base, uint64_t tag, uint64_t i, uint64_t j);

/// Stream purpose tags. Values are arbitrary but frozen.
namespace rngtag {
constexpr uint64_t kInit = 0x01;
constexpr uint64_t kSplit = 0x02;
constexpr uint64_t kEpisode = 0x03;
constexpr uint64_t kValEpisode = 0x04;
constexpr uint64_t kBatch = 0x05;
constexpr uint64_t kEps = 0x06;
constexpr uint64_t kDropout = 0x07;
constexpr uint64_t kSupport = 0x08;
constexpr uint64_t kEval = 0x09;
constexpr uint64_t kSynth = 0x0a;
}  // namespace rngtag

/// Deterministic, portable RNG stream (splitmix64 core, Box-Muller normals).
class Rng {
 public:
  explicit Rng(uint64_t seed) : s_(seed) {}

  uint64_t next_u64() { return splitmix64(s_); }

  /// Uniform in [0,1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0,n).
  int64_t uniform_int(int64_t n);

  /// Standard normal draw.
  double normal();

  /// Fisher-Yates shuffle.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = uniform_int(i + 1);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

  /// k distinct indices from [0,n), in draw order.
  std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k);

 private:
  uint64_t s_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace metabridge
