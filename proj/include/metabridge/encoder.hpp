#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "metabridge/data.hpp"
#include "metabridge/graph.hpp"
#include "metabridge/params.hpp"
#include "metabridge/rng.hpp"
#include "metabridge/tensor.hpp"

namespace metabridge::enc {

struct EncoderConfig {
  int64_t d_model = 16;
  int64_t n_heads = 2;
  int64_t n_layers = 1;
  int64_t ffn_mult = 4;  // feedforward width = ffn_mult * d_model
  double dropout = 0.3;
  int64_t max_profile_len = 64;
  int64_t max_value_len = 16;

  void validate() const;
};

/// Padded id matrix for one batch of sequences. Row layout: [CLS] followed by
/// token ids, then [PAD] up to the batch width. Id 0 is padding by
/// construction (no real token maps to it).
struct TokenBatch {
  int64_t batch = 0;
  int64_t length = 0;
  std::shared_ptr<const std::vector<int32_t>> ids;
};

/// Tokenize, map through the vocab (unknowns to [UNK]), prepend [CLS],
/// truncate to max_len, pad to the longest row.
TokenBatch make_batch(const data::Vocab& vocab, std::span<const std::string> texts,
                      int64_t max_len);

/// Fresh parameter set: shared embedding table, one transformer block stack
/// per side ("profile", "value"), Gaussian heads, decoder. Weights are
/// seeded uniform(-0.1, 0.1) keyed by parameter name; biases zero; layer-norm
/// gains one.
diff::ParamSet init_params(const EncoderConfig& cfg, int64_t vocab_size, uint64_t seed);

/// As init_params, but the embedding table comes from `embeddings` (any dim)
/// and a learned projection `enc/proj` maps it down to d_model.
diff::ParamSet init_params_pretrained(const EncoderConfig& cfg, const Tensor& embeddings,
                                      uint64_t seed);

/// One transformer encoder pass for `which` in {"profile", "value"}; returns
/// the [CLS] hidden states, shape (batch, d_model). When `deterministic` is
/// false, dropout masks are drawn from `dropout_rng` (must be non-null).
diff::ValueId encode_batch(diff::Graph& g, const diff::NodeMap& params, const EncoderConfig& cfg,
                           const TokenBatch& batch, std::string_view which, bool deterministic,
                           Rng* dropout_rng = nullptr);

/// Single-sequence convenience wrapper; ids must start with [CLS].
Tensor encode_sequence(const diff::ParamSet& params, const EncoderConfig& cfg,
                       std::span<const int32_t> ids, std::string_view which);

/// mu = h W_mu + b_mu over rows of h (batch, 2*d_model) -> (batch, d_model).
diff::ValueId gaussian_head_mu(diff::Graph& g, const diff::NodeMap& params, diff::ValueId h);
/// log-sigma head, clamped to [-6, 6] before any downstream use.
diff::ValueId gaussian_head_logsigma(diff::Graph& g, const diff::NodeMap& params,
                                     diff::ValueId h);

inline constexpr double kLogSigmaClamp = 6.0;

/// logits = z W_o + b_o, (batch, d_model) -> (batch, 2); column 0 scores
/// "correct", column 1 scores "incorrect" (the positive class).
diff::ValueId decode_logits(diff::Graph& g, const diff::NodeMap& params, diff::ValueId z);
/// Softmax of decode_logits: rows are (p_correct, p_incorrect).
diff::ValueId decode_probs(diff::Graph& g, const diff::NodeMap& params, diff::ValueId z);

/// Text embedding file: header `count dim`, then `token v1 ... v_dim` rows.
/// Vocab tokens missing from the file fall back to the seeded init scheme.
Tensor load_pretrained_embeddings(const std::filesystem::path& path, const data::Vocab& vocab,
                                  uint64_t seed);

}  // namespace metabridge::enc
