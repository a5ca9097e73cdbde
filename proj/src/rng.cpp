#include "metabridge/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_map>

namespace metabridge {

uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

uint64_t mix_seed(uint64_t base, uint64_t tag) {
  uint64_t s = base;
  uint64_t a = splitmix64(s);
  s = a ^ (tag * 0x9e3779b97f4a7c15ull);
  return splitmix64(s);
}

uint64_t mix_seed(uint64_t base, uint64_t tag, uint64_t i) { return mix_seed(mix_seed(base, tag), i + 1); }

uint64_t mix_seed(uint64_t base, uint64_t tag, uint64_t i, uint64_t j) {
  return mix_seed(mix_seed(base, tag, i), j + 1);
}

int64_t Rng::uniform_int(int64_t n) {
  if (n <= 0) throw std::invalid_argument("uniform_int needs n > 0");
  // Rejection sampling to avoid modulo bias.
  uint64_t un = static_cast<uint64_t>(n);
  uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return static_cast<int64_t>(x % un);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller; u1 in (0,1] so log never sees zero.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::vector<int64_t> Rng::sample_without_replacement(int64_t n, int64_t k) {
  if (k > n) throw std::invalid_argument("cannot sample " + std::to_string(k) + " items from " + std::to_string(n));
  // Partial Fisher-Yates on a sparse index map.
  std::unordered_map<int64_t, int64_t> remap;
  std::vector<int64_t> out;
  out.reserve(static_cast<size_t>(k));
  for (int64_t i = 0; i < k; ++i) {
    int64_t j = i + uniform_int(n - i);
    int64_t vi = remap.count(i) ? remap[i] : i;
    int64_t vj = remap.count(j) ? remap[j] : j;
    out.push_back(vj);
    remap[j] = vi;
  }
  return out;
}

}  // namespace metabridge
