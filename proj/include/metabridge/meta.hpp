#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "metabridge/data.hpp"
#include "metabridge/encoder.hpp"
#include "metabridge/params.hpp"

namespace metabridge::meta {

/// How the outer gradient treats the inner update: kFirst differentiates the
/// query loss at the adapted parameters and reports it as the gradient at the
/// base parameters (inner Jacobian replaced by identity); kSecond
/// differentiates through the inner gradient-descent step itself.
enum class GradOrder { kFirst, kSecond };

/// Model variants. kFull is the complete method; the others are ablations:
///   kMaml            — no bridging term, latent fixed to the posterior mean
///                      everywhere (plain entropy-inner-loop meta-learning);
///   kStochasticMaml  — unit-variance noise added to the decoder input during
///                      training (z = mu + eps), no bridging term;
///   kKlFixedVariance — sigma frozen at 1 everywhere and no sampling, so the
///                      bridging term reduces to half the squared distance
///                      between pooled means.
enum class VariantMode { kFull, kMaml, kStochasticMaml, kKlFixedVariance };

GradOrder parse_grad_order(const std::string& name);
std::string to_string(GradOrder order);
VariantMode parse_variant(const std::string& name);
std::string to_string(VariantMode mode);

struct MetaConfig {
  enc::EncoderConfig encoder;

  double alpha = 1e-4;      // outer (Adam) step size
  double beta = 0.3;        // inner gradient-descent step size
  double lambda = 1.0;      // bridging-regularizer weight
  int64_t inner_steps = 1;  // inner adaptation steps per episode
  int64_t meta_batch = 64;  // categories per outer step
  int64_t epochs = 400;
  int64_t n_support = 100;  // N unlabeled support records per episode
  int64_t n_query = 5;      // K labeled query records per episode
  GradOrder order = GradOrder::kFirst;
  VariantMode variant = VariantMode::kFull;
  // Fixed-once episodes by default; when true, each epoch redraws the support
  // half from the category pool (minus the fixed query records).
  bool resample_support = false;
  uint64_t seed = 0;
  // Worker threads for fan-out over episodes (meta_step) and categories
  // (evaluation). Pure execution knob: results are reduced in fixed order, so
  // every value produces bit-identical numbers; it is excluded from config
  // echoes and saved artifacts.
  int64_t threads = 1;

  void validate() const;
};

/// Category-specific parameters produced by the inner loop, plus provenance.
struct AdaptedModel {
  diff::ParamSet params;
  std::string category_id;
  std::string base_checkpoint_id;
  int64_t inner_steps = 0;
  double beta = 0.0;
};

/// Episode-loss breakdown. `bridge` is the raw KL value (before lambda);
/// `total` = `inference` + effective-lambda * `bridge`, where the effective
/// lambda is 0 for the kMaml and kStochasticMaml variants.
struct EpisodeLoss {
  double total = 0.0;
  double inference = 0.0;
  double bridge = 0.0;
};

struct EpisodeGradient {
  EpisodeLoss loss;
  diff::GradMap grads;
};

struct MetaStepResult {
  diff::ParamSet params;
  diff::AdamState opt;
  double batch_loss = 0.0;  // mean of episode totals (the update uses the sum)
};

struct EpochRecord {
  int64_t epoch = 0;
  double train_loss = 0.0;
  double val_pr_auc = 0.0;
  bool is_best = false;
};

struct TrainResult {
  diff::ParamSet final_params;
  diff::ParamSet best_params;
  std::vector<EpochRecord> history;
  double best_val_pr_auc = 0.0;
  int64_t best_epoch = -1;
};

// ---------------------------------------------------------------------------
// RNG convention: every episode-level computation takes one `rng_seed` and
// derives fixed sub-streams from it (support noise per inner step, query
// noise, dropout masks per phase), so each function below is a pure function
// of its arguments. `training` selects the stochastic forward pass (sampled
// latents where the variant says so, dropout on); `training = false` is the
// deterministic regime (z = posterior mean, dropout off) used for test-time
// adaptation and inference.
// ---------------------------------------------------------------------------

/// Mean over support records of the entropy of the decoded class
/// distribution, the inner-loop objective.
double support_entropy_loss(const diff::ParamSet& params,
                            const std::vector<data::ProductRecord>& support,
                            const MetaConfig& cfg, const data::Vocab& vocab, bool training,
                            uint64_t rng_seed);

/// `inner_steps` gradient-descent steps of the support entropy loss with step
/// size beta, applied to all parameters. inner_steps = 0 (or beta = 0) leaves
/// the parameters bit-identical. Throws on a non-finite inner loss.
AdaptedModel adapt(const diff::ParamSet& params,
                   const std::vector<data::ProductRecord>& support, const MetaConfig& cfg,
                   const data::Vocab& vocab, bool training, uint64_t rng_seed,
                   const std::string& category_id = "",
                   const std::string& base_checkpoint_id = "");

/// Adapt on the support half, then: inference loss = mean over query records
/// of -log p(y|z) (z reparameterized per record when training, posterior mean
/// otherwise; probability floored at 1e-12), bridging term = KL between the
/// pooled query posterior and the pooled support posterior under the adapted
/// parameters. Variants with effective lambda 0 skip the bridging term.
EpisodeLoss episode_loss(const diff::ParamSet& params, const data::Episode& episode,
                         const MetaConfig& cfg, const data::Vocab& vocab, bool training,
                         uint64_t rng_seed);

/// Independently coded plain-MAML episode loss: entropy inner loop with
/// z = mu, then mean query cross-entropy at the adapted parameters. The
/// kMaml variant routes through this; with lambda = 0 in deterministic mode
/// the general path must agree with it exactly.
EpisodeLoss maml_episode_loss(const diff::ParamSet& params, const data::Episode& episode,
                              const MetaConfig& cfg, const data::Vocab& vocab, bool training,
                              uint64_t rng_seed);

/// Episode loss plus its gradient with respect to the BASE parameters,
/// honoring cfg.order. Always evaluates the training-mode (stochastic)
/// objective.
EpisodeGradient episode_gradient(const diff::ParamSet& params, const data::Episode& episode,
                                 const MetaConfig& cfg, const data::Vocab& vocab,
                                 uint64_t rng_seed);

/// One outer step: sum episode gradients in the given episode order (episode
/// i uses rng stream mix_seed(step_seed, kEpisode, i)) and apply Adam with
/// step size alpha. Throws if the batch loss is non-finite.
MetaStepResult meta_step(const diff::ParamSet& params, std::span<const data::Episode> batch,
                         const MetaConfig& cfg, const data::Vocab& vocab,
                         const diff::AdamState& opt, uint64_t step_seed);

/// Full training loop: per epoch, sample meta_batch train categories (without
/// replacement when enough exist, with replacement otherwise), one episode
/// per sampled category, one meta_step; then score the validation split
/// (adapt on each val category's support, predict its query, pool all scores,
/// PR-AUC) and keep the best-validation checkpoint (strict improvement moves
/// it; ties keep the earlier epoch). Pure function of (config, data, seed);
/// `on_epoch`, when given, observes each epoch record as it is produced and
/// must not mutate anything the loop reads.
/// epochs = 0 returns the initialization as both final and best.
TrainResult train(const MetaConfig& cfg, const data::DatasetSplit& split,
                  const data::Vocab& vocab,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Deterministic inference: adapt on the support set with z = mu and dropout
/// off, then decode each query record from its posterior mean. Returns
/// p_incorrect per query record, in input order.
std::vector<double> predict(const diff::ParamSet& params,
                            const std::vector<data::ProductRecord>& support,
                            const std::vector<data::ProductRecord>& query,
                            const MetaConfig& cfg, const data::Vocab& vocab);

}  // namespace metabridge::meta
