#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>

#include "metabridge/graph.hpp"
#include "metabridge/tensor.hpp"

namespace metabridge::diff {

/// Named parameter collection. Keys under "enc/" form the encoder-side group
/// (embeddings, attention, feedforward, Gaussian heads); keys under "dec/"
/// form the decoder head. std::map keeps iteration lexicographic, which every
/// reduction in this codebase relies on for bit-reproducibility.
using ParamSet = std::map<std::string, Tensor>;

/// Gradient per parameter, same keys and shapes as the source ParamSet.
using GradMap = std::map<std::string, Tensor>;

struct AdamState {
  int64_t step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEpsilon = 1e-8;

struct GradResult {
  double loss = 0.0;
  GradMap grads;
};

/// Runs `build` on fresh leaves for `params` and returns the loss value plus
/// exact reverse-mode gradients. Parameters the loss never touches get
/// exact-zero gradients. Throws if the loss is non-finite.
GradResult gradient(const LossBuilder& build, const ParamSet& params);

/// p' = p − step_size · g, as a new ParamSet; inputs untouched.
ParamSet sgd_step(const ParamSet& params, const GradMap& grads, double step_size);

/// Standard Adam with bias correction (0.9 / 0.999 / 1e-8). A default-constructed
/// state means "start of training"; moments are created as zeros.
std::pair<ParamSet, AdamState> adam_step(const ParamSet& params, const GradMap& grads,
                                         const AdamState& state, double alpha);

/// Checkpoint directory layout: `manifest.txt` with one `name dtype dims...`
/// line per tensor in lexicographic name order, and `tensors.bin` holding the
/// raw little-endian values concatenated in manifest order. dtype is `f64`
/// (default) or `f32`; loading accepts both and always widens to f64.
void save_checkpoint(const std::filesystem::path& dir, const ParamSet& params,
                     bool as_f32 = false);
ParamSet load_checkpoint(const std::filesystem::path& dir);

}  // namespace metabridge::diff
