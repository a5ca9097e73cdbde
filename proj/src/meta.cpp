#include "metabridge/meta.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <utility>

#include "metabridge/latent.hpp"
#include "metabridge/metrics.hpp"
#include "metabridge/parallel.hpp"
#include "metabridge/rng.hpp"

namespace metabridge::meta {

namespace {

using data::Episode;
using data::ProductRecord;
using diff::GradMap;
using diff::Graph;
using diff::NodeMap;
using diff::ParamSet;
using diff::ValueId;

constexpr double kProbFloor = 1e-12;

// --- RNG sub-streams of one episode seed -----------------------------------
uint64_t support_eps_seed(uint64_t ep_seed, int64_t step) {
    return mix_seed(ep_seed, rngtag::kSupport, static_cast<uint64_t>(step));
}
uint64_t inner_dropout_seed(uint64_t ep_seed, int64_t step) {
    return mix_seed(ep_seed, rngtag::kDropout, static_cast<uint64_t>(1 + step));
}
uint64_t outer_dropout_seed(uint64_t ep_seed) { return mix_seed(ep_seed, rngtag::kDropout, 0); }
uint64_t query_eps_seed(uint64_t ep_seed) { return mix_seed(ep_seed, rngtag::kEps); }

// --- batching ---------------------------------------------------------------
struct PairBatch {
    enc::TokenBatch profile;
    enc::TokenBatch value;
    int64_t rows = 0;
};

PairBatch make_pair_batch(const data::Vocab& vocab, const enc::EncoderConfig& cfg,
                          const std::vector<ProductRecord>& records) {
    if (records.empty()) {
        throw std::invalid_argument("cannot batch an empty record list");
    }
    std::vector<std::string> profiles;
    std::vector<std::string> values;
    profiles.reserve(records.size());
    values.reserve(records.size());
    for (const ProductRecord& r : records) {
        profiles.push_back(r.profile);
        values.push_back(r.value);
    }
    PairBatch b;
    b.profile = enc::make_batch(vocab, profiles, cfg.max_profile_len);
    b.value = enc::make_batch(vocab, values, cfg.max_value_len);
    b.rows = static_cast<int64_t>(records.size());
    return b;
}

std::vector<int> query_labels(const std::vector<ProductRecord>& query) {
    if (query.empty()) {
        throw std::invalid_argument("episode has no query records");
    }
    std::vector<int> labels;
    labels.reserve(query.size());
    for (const ProductRecord& r : query) {
        if (!r.label.has_value()) {
            throw std::invalid_argument("query record '" + r.product_id + "' is unlabeled");
        }
        if (*r.label != 0 && *r.label != 1) {
            throw std::invalid_argument("query record '" + r.product_id + "' has label " +
                                        std::to_string(*r.label) + "; expected 0 or 1");
        }
        labels.push_back(*r.label);
    }
    return labels;
}

Tensor onehot_labels(const std::vector<int>& labels) {
    const int64_t k = static_cast<int64_t>(labels.size());
    Tensor t = Tensor::zeros({k, 2});
    for (int64_t i = 0; i < k; ++i) {
        t[i * 2 + labels[static_cast<size_t>(i)]] = 1.0;
    }
    return t;
}

Tensor normal_tensor(Rng& rng, Shape shape) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.values()) v = rng.normal();
    return t;
}

// --- variant plumbing --------------------------------------------------------
enum class ZMode { kMean, kSampled, kUnitNoise };

ZMode train_z_mode(VariantMode v) {
    switch (v) {
        case VariantMode::kFull: return ZMode::kSampled;
        case VariantMode::kMaml: return ZMode::kMean;
        case VariantMode::kStochasticMaml: return ZMode::kUnitNoise;
        case VariantMode::kKlFixedVariance: return ZMode::kMean;
    }
    throw std::logic_error("unreachable variant");
}

double effective_lambda(const MetaConfig& cfg) {
    const bool bridged =
        cfg.variant == VariantMode::kFull || cfg.variant == VariantMode::kKlFixedVariance;
    return bridged ? cfg.lambda : 0.0;
}

// --- shared graph assembly ---------------------------------------------------
NodeMap make_leaves(Graph& g, const ParamSet& params) {
    NodeMap h;
    for (const auto& [name, value] : params) {
        h.emplace(name, g.leaf(value));
    }
    return h;
}

struct Posterior {
    ValueId mu = diff::kNoValue;
    ValueId logsigma = diff::kNoValue;
};

Posterior posterior_g(Graph& g, const NodeMap& h, const MetaConfig& cfg, const PairBatch& b,
                      bool deterministic, Rng* dropout_rng, bool need_sigma) {
    ValueId hp = enc::encode_batch(g, h, cfg.encoder, b.profile, "profile", deterministic,
                                   dropout_rng);
    ValueId hv = enc::encode_batch(g, h, cfg.encoder, b.value, "value", deterministic,
                                   dropout_rng);
    ValueId pair = g.concat(hp, hv, 1);
    Posterior p;
    p.mu = enc::gaussian_head_mu(g, h, pair);
    if (need_sigma) {
        p.logsigma = cfg.variant == VariantMode::kKlFixedVariance
                         ? g.constant(Tensor::zeros({b.rows, cfg.encoder.d_model}))
                         : enc::gaussian_head_logsigma(g, h, pair);
    }
    return p;
}

ValueId make_z(Graph& g, const Posterior& post, ZMode mode, int64_t rows, int64_t dim,
               uint64_t eps_seed) {
    switch (mode) {
        case ZMode::kMean: return post.mu;
        case ZMode::kSampled: {
            Rng rng(eps_seed);
            return latent::reparameterize_g(g, post.mu, post.logsigma,
                                            normal_tensor(rng, {rows, dim}));
        }
        case ZMode::kUnitNoise: {
            Rng rng(eps_seed);
            return g.add(post.mu, g.constant(normal_tensor(rng, {rows, dim})));
        }
    }
    throw std::logic_error("unreachable z mode");
}

// Mean per-record entropy of a (rows, 2) class-probability matrix.
ValueId mean_entropy_g(Graph& g, ValueId probs, int64_t rows) {
    ValueId logp = g.log(g.clamp_min(probs, kProbFloor));
    ValueId row_sums = g.sum_to(g.mul(probs, logp), Shape{rows, 1});
    return g.scale(g.mean_all(row_sums), -1.0);
}

// Mean negative log-probability of the true labels for (rows, 2) probs.
ValueId mean_nll_g(Graph& g, ValueId probs, const std::vector<int>& labels) {
    const int64_t rows = static_cast<int64_t>(labels.size());
    ValueId picked = g.sum_to(g.mul(probs, g.constant(onehot_labels(labels))), Shape{rows, 1});
    return g.scale(g.mean_all(g.log(g.clamp_min(picked, kProbFloor))), -1.0);
}

// Inner objective: mean entropy of decoded class distributions on the support
// batch. Sampled z in training mode (per the variant), z = mu otherwise.
ValueId entropy_loss_g(Graph& g, const NodeMap& h, const MetaConfig& cfg, const PairBatch& sup,
                       bool training, uint64_t eps_seed, uint64_t dropout_seed) {
    Rng drop(dropout_seed);
    Rng* drop_p = training ? &drop : nullptr;
    const ZMode zm = training ? train_z_mode(cfg.variant) : ZMode::kMean;
    Posterior post =
        posterior_g(g, h, cfg, sup, !training, drop_p, /*need_sigma=*/zm == ZMode::kSampled);
    ValueId z = make_z(g, post, zm, sup.rows, cfg.encoder.d_model, eps_seed);
    return mean_entropy_g(g, enc::decode_probs(g, h, z), sup.rows);
}

struct OuterNodes {
    ValueId total = diff::kNoValue;
    ValueId inference = diff::kNoValue;
    ValueId bridge = diff::kNoValue;  // kNoValue when the variant has no bridge
};

// Query-side objective at the (already adapted) parameters `h`: inference NLL
// plus lambda times the KL between pooled query and support posteriors.
OuterNodes outer_loss_g(Graph& g, const NodeMap& h, const MetaConfig& cfg, const PairBatch& qry,
                        const std::vector<int>& labels, const PairBatch& sup, bool training,
                        uint64_t ep_seed) {
    Rng drop(outer_dropout_seed(ep_seed));
    Rng* drop_p = training ? &drop : nullptr;
    const double lam = effective_lambda(cfg);
    const ZMode zq = training ? train_z_mode(cfg.variant) : ZMode::kMean;
    const bool need_sigma = zq == ZMode::kSampled || lam > 0.0;

    Posterior pq = posterior_g(g, h, cfg, qry, !training, drop_p, need_sigma);
    ValueId z = make_z(g, pq, zq, qry.rows, cfg.encoder.d_model, query_eps_seed(ep_seed));
    OuterNodes out;
    out.inference = mean_nll_g(g, enc::decode_probs(g, h, z), labels);
    out.total = out.inference;
    if (lam > 0.0) {
        Posterior ps = posterior_g(g, h, cfg, sup, !training, drop_p, /*need_sigma=*/true);
        ValueId kl = latent::kl_g(g, latent::pool_rows_g(g, pq.mu),
                                  latent::pool_rows_g(g, pq.logsigma),
                                  latent::pool_rows_g(g, ps.mu),
                                  latent::pool_rows_g(g, ps.logsigma));
        out.bridge = kl;
        out.total = g.add(out.inference, g.scale(kl, lam));
    }
    return out;
}

// --- independent plain-MAML assembly ----------------------------------------
// Encoder -> posterior mean -> class distribution; no latent sampling and no
// bridging anywhere. Kept separate from the general path on purpose: the
// general path with lambda = 0 in deterministic mode must reproduce these
// numbers without sharing the episode-level code.
ValueId maml_probs_g(Graph& g, const NodeMap& h, const MetaConfig& cfg, const PairBatch& b,
                     bool training, Rng* dropout_rng) {
    ValueId hp = enc::encode_batch(g, h, cfg.encoder, b.profile, "profile", !training,
                                   dropout_rng);
    ValueId hv = enc::encode_batch(g, h, cfg.encoder, b.value, "value", !training, dropout_rng);
    ValueId mu = enc::gaussian_head_mu(g, h, g.concat(hp, hv, 1));
    return enc::decode_probs(g, h, mu);
}

ValueId maml_entropy_g(Graph& g, const NodeMap& h, const MetaConfig& cfg, const PairBatch& sup,
                       bool training, uint64_t dropout_seed) {
    Rng drop(dropout_seed);
    ValueId probs = maml_probs_g(g, h, cfg, sup, training, training ? &drop : nullptr);
    return mean_entropy_g(g, probs, sup.rows);
}

OuterNodes maml_outer_g(Graph& g, const NodeMap& h, const MetaConfig& cfg, const PairBatch& qry,
                        const std::vector<int>& labels, bool training, uint64_t ep_seed) {
    Rng drop(outer_dropout_seed(ep_seed));
    ValueId probs = maml_probs_g(g, h, cfg, qry, training, training ? &drop : nullptr);
    OuterNodes out;
    out.inference = mean_nll_g(g, probs, labels);
    out.total = out.inference;
    return out;
}

ParamSet maml_adapt(const ParamSet& params, const PairBatch& sup, const MetaConfig& cfg,
                    bool training, uint64_t ep_seed) {
    ParamSet cur = params;
    for (int64_t s = 0; s < cfg.inner_steps; ++s) {
        auto builder = [&, s](Graph& g, const NodeMap& h) {
            return maml_entropy_g(g, h, cfg, sup, training, inner_dropout_seed(ep_seed, s));
        };
        diff::GradResult res = diff::gradient(builder, cur);
        cur = diff::sgd_step(cur, res.grads, cfg.beta);
    }
    return cur;
}

// --- gradient plumbing --------------------------------------------------------
GradMap backward_to(Graph& g, ValueId loss, const NodeMap& h, const ParamSet& shapes) {
    std::vector<std::string> names;
    std::vector<ValueId> ids;
    names.reserve(h.size());
    ids.reserve(h.size());
    for (const auto& [name, id] : h) {
        names.push_back(name);
        ids.push_back(id);
    }
    std::vector<ValueId> adjoints = g.backward(loss, ids);
    GradMap grads;
    for (std::size_t i = 0; i < names.size(); ++i) {
        grads.emplace(names[i], adjoints[i] == diff::kNoValue
                                    ? Tensor::zeros(shapes.at(names[i]).shape())
                                    : g.val(adjoints[i]));
    }
    return grads;
}

void require_finite_loss(double value, const char* what) {
    if (!std::isfinite(value)) {
        throw std::runtime_error(std::string("non-finite ") + what + ": " +
                                 std::to_string(value));
    }
}

EpisodeLoss read_losses(const Graph& g, const OuterNodes& o) {
    EpisodeLoss out;
    out.total = g.val(o.total).item();
    out.inference = g.val(o.inference).item();
    out.bridge = o.bridge == diff::kNoValue ? 0.0 : g.val(o.bridge).item();
    return out;
}

void accumulate(GradMap& total, const GradMap& part) {
    for (const auto& [name, grad] : part) {
        auto it = total.find(name);
        if (it == total.end()) {
            total.emplace(name, grad);
            continue;
        }
        double* dst = it->second.data();
        const double* src = grad.data();
        const int64_t n = grad.size();
        for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
    }
}

}  // namespace

// --- enum parsing -------------------------------------------------------------
GradOrder parse_grad_order(const std::string& name) {
    if (name == "first") return GradOrder::kFirst;
    if (name == "second") return GradOrder::kSecond;
    throw std::invalid_argument("unknown gradient order '" + name +
                                "'; expected first or second");
}

std::string to_string(GradOrder order) {
    return order == GradOrder::kFirst ? "first" : "second";
}

VariantMode parse_variant(const std::string& name) {
    if (name == "full") return VariantMode::kFull;
    if (name == "maml") return VariantMode::kMaml;
    if (name == "stochastic_maml") return VariantMode::kStochasticMaml;
    if (name == "kl_fixed_variance") return VariantMode::kKlFixedVariance;
    throw std::invalid_argument(
        "unknown variant '" + name +
        "'; expected full, maml, stochastic_maml, or kl_fixed_variance");
}

std::string to_string(VariantMode mode) {
    switch (mode) {
        case VariantMode::kFull: return "full";
        case VariantMode::kMaml: return "maml";
        case VariantMode::kStochasticMaml: return "stochastic_maml";
        case VariantMode::kKlFixedVariance: return "kl_fixed_variance";
    }
    throw std::logic_error("unreachable variant");
}

void MetaConfig::validate() const {
    encoder.validate();
    if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
    if (!(beta >= 0.0)) throw std::invalid_argument("beta must be non-negative");
    if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be non-negative");
    if (inner_steps < 0) throw std::invalid_argument("inner_steps must be non-negative");
    if (meta_batch < 1) throw std::invalid_argument("meta_batch must be at least 1");
    if (epochs < 0) throw std::invalid_argument("epochs must be non-negative");
    if (n_support < 1) throw std::invalid_argument("n_support must be at least 1");
    if (n_query < 1) throw std::invalid_argument("n_query must be at least 1");
    if (threads < 1) throw std::invalid_argument("threads must be at least 1");
}

// --- public operations ----------------------------------------------------------
double support_entropy_loss(const ParamSet& params, const std::vector<ProductRecord>& support,
                            const MetaConfig& cfg, const data::Vocab& vocab, bool training,
                            uint64_t rng_seed) {
    cfg.validate();
    PairBatch sup = make_pair_batch(vocab, cfg.encoder, support);
    Graph g;
    NodeMap h = make_leaves(g, params);
    ValueId loss = entropy_loss_g(g, h, cfg, sup, training, support_eps_seed(rng_seed, 0),
                                  inner_dropout_seed(rng_seed, 0));
    return g.val(loss).item();
}

AdaptedModel adapt(const ParamSet& params, const std::vector<ProductRecord>& support,
                   const MetaConfig& cfg, const data::Vocab& vocab, bool training,
                   uint64_t rng_seed, const std::string& category_id,
                   const std::string& base_checkpoint_id) {
    cfg.validate();
    AdaptedModel out{params, category_id, base_checkpoint_id, cfg.inner_steps, cfg.beta};
    if (cfg.inner_steps == 0) {
        return out;
    }
    PairBatch sup = make_pair_batch(vocab, cfg.encoder, support);
    for (int64_t s = 0; s < cfg.inner_steps; ++s) {
        auto builder = [&, s](Graph& g, const NodeMap& h) {
            return entropy_loss_g(g, h, cfg, sup, training, support_eps_seed(rng_seed, s),
                                  inner_dropout_seed(rng_seed, s));
        };
        diff::GradResult res = diff::gradient(builder, out.params);
        out.params = diff::sgd_step(out.params, res.grads, cfg.beta);
    }
    return out;
}

EpisodeLoss episode_loss(const ParamSet& params, const Episode& episode, const MetaConfig& cfg,
                         const data::Vocab& vocab, bool training, uint64_t rng_seed) {
    cfg.validate();
    if (cfg.variant == VariantMode::kMaml) {
        return maml_episode_loss(params, episode, cfg, vocab, training, rng_seed);
    }
    const std::vector<int> labels = query_labels(episode.query);
    AdaptedModel adapted = adapt(params, episode.support, cfg, vocab, training, rng_seed,
                                 episode.category_id, "");
    PairBatch sup = make_pair_batch(vocab, cfg.encoder, episode.support);
    PairBatch qry = make_pair_batch(vocab, cfg.encoder, episode.query);
    Graph g;
    NodeMap h = make_leaves(g, adapted.params);
    OuterNodes o = outer_loss_g(g, h, cfg, qry, labels, sup, training, rng_seed);
    return read_losses(g, o);
}

EpisodeLoss maml_episode_loss(const ParamSet& params, const Episode& episode,
                              const MetaConfig& cfg, const data::Vocab& vocab, bool training,
                              uint64_t rng_seed) {
    cfg.validate();
    const std::vector<int> labels = query_labels(episode.query);
    PairBatch sup = make_pair_batch(vocab, cfg.encoder, episode.support);
    PairBatch qry = make_pair_batch(vocab, cfg.encoder, episode.query);
    ParamSet adapted = maml_adapt(params, sup, cfg, training, rng_seed);
    Graph g;
    NodeMap h = make_leaves(g, adapted);
    OuterNodes o = maml_outer_g(g, h, cfg, qry, labels, training, rng_seed);
    return read_losses(g, o);
}

EpisodeGradient episode_gradient(const ParamSet& params, const Episode& episode,
                                 const MetaConfig& cfg, const data::Vocab& vocab,
                                 uint64_t rng_seed) {
    cfg.validate();
    const std::vector<int> labels = query_labels(episode.query);
    const bool maml = cfg.variant == VariantMode::kMaml;
    PairBatch sup = make_pair_batch(vocab, cfg.encoder, episode.support);
    PairBatch qry = make_pair_batch(vocab, cfg.encoder, episode.query);

    if (cfg.order == GradOrder::kFirst || cfg.inner_steps == 0) {
        // Inner loop at value level; the outer gradient is taken at the
        // adapted parameters and reported for the base ones (identity inner
        // Jacobian).
        ParamSet adapted =
            maml ? maml_adapt(params, sup, cfg, /*training=*/true, rng_seed)
                 : adapt(params, episode.support, cfg, vocab, /*training=*/true, rng_seed,
                         episode.category_id, "")
                       .params;
        Graph g;
        NodeMap h = make_leaves(g, adapted);
        OuterNodes o = maml ? maml_outer_g(g, h, cfg, qry, labels, /*training=*/true, rng_seed)
                            : outer_loss_g(g, h, cfg, qry, labels, sup, /*training=*/true,
                                           rng_seed);
        EpisodeGradient out;
        out.loss = read_losses(g, o);
        require_finite_loss(out.loss.total, "episode loss");
        out.grads = backward_to(g, o.total, h, params);
        return out;
    }

    // Second order: the inner gradient-descent steps are graph operations, so
    // the outer backward pass differentiates through them.
    Graph g;
    NodeMap base = make_leaves(g, params);
    NodeMap cur = base;
    for (int64_t s = 0; s < cfg.inner_steps; ++s) {
        ValueId inner =
            maml ? maml_entropy_g(g, cur, cfg, sup, /*training=*/true,
                                  inner_dropout_seed(rng_seed, s))
                 : entropy_loss_g(g, cur, cfg, sup, /*training=*/true,
                                  support_eps_seed(rng_seed, s), inner_dropout_seed(rng_seed, s));
        require_finite_loss(g.val(inner).item(), "inner loss");
        std::vector<std::string> names;
        std::vector<ValueId> ids;
        for (const auto& [name, id] : cur) {
            names.push_back(name);
            ids.push_back(id);
        }
        std::vector<ValueId> adjoints = g.backward(inner, ids);
        for (std::size_t i = 0; i < names.size(); ++i) {
            if (adjoints[i] != diff::kNoValue) {
                cur[names[i]] = g.sub(ids[i], g.scale(adjoints[i], cfg.beta));
            }
        }
    }
    OuterNodes o = maml ? maml_outer_g(g, cur, cfg, qry, labels, /*training=*/true, rng_seed)
                        : outer_loss_g(g, cur, cfg, qry, labels, sup, /*training=*/true,
                                       rng_seed);
    EpisodeGradient out;
    out.loss = read_losses(g, o);
    require_finite_loss(out.loss.total, "episode loss");
    out.grads = backward_to(g, o.total, base, params);
    return out;
}

MetaStepResult meta_step(const ParamSet& params, std::span<const Episode> batch,
                         const MetaConfig& cfg, const data::Vocab& vocab,
                         const diff::AdamState& opt, uint64_t step_seed) {
    cfg.validate();
    if (batch.empty()) {
        throw std::invalid_argument("meta_step requires a non-empty episode batch");
    }
    std::vector<EpisodeGradient> parts(batch.size());
    parallel_for_indexed(static_cast<int64_t>(batch.size()), cfg.threads, [&](int64_t i) {
        const auto s = static_cast<std::size_t>(i);
        parts[s] = episode_gradient(params, batch[s], cfg, vocab,
                                    mix_seed(step_seed, rngtag::kEpisode, s));
    });
    // Fixed-order reduction: episode i contributes i-th, whatever thread ran it.
    GradMap total;
    double loss_sum = 0.0;
    for (EpisodeGradient& eg : parts) {
        loss_sum += eg.loss.total;
        accumulate(total, eg.grads);
    }
    require_finite_loss(loss_sum, "batch loss");
    MetaStepResult out;
    auto [next, state] = diff::adam_step(params, total, opt, cfg.alpha);
    out.params = std::move(next);
    out.opt = std::move(state);
    out.batch_loss = loss_sum / static_cast<double>(batch.size());
    return out;
}

namespace {

// Fresh support half for one fixed episode: redraw n_support records from the
// category pool minus the episode's query products, labels stripped.
Episode resample_support(const Episode& fixed, const std::vector<ProductRecord>& pool,
                         int64_t n_support, uint64_t seed) {
    std::set<std::string> query_ids;
    for (const ProductRecord& q : fixed.query) query_ids.insert(q.product_id);
    std::vector<const ProductRecord*> rest;
    for (const ProductRecord& r : pool) {
        if (query_ids.count(r.product_id) == 0) rest.push_back(&r);
    }
    if (static_cast<int64_t>(rest.size()) < n_support) {
        throw std::invalid_argument("category '" + fixed.category_id + "' has only " +
                                    std::to_string(rest.size()) +
                                    " non-query records; need " + std::to_string(n_support));
    }
    Rng rng(seed);
    Episode out;
    out.category_id = fixed.category_id;
    out.query = fixed.query;
    for (int64_t idx : rng.sample_without_replacement(static_cast<int64_t>(rest.size()),
                                                      n_support)) {
        ProductRecord r = *rest[static_cast<size_t>(idx)];
        r.label.reset();
        out.support.push_back(std::move(r));
    }
    return out;
}

}  // namespace

TrainResult train(const MetaConfig& cfg, const data::DatasetSplit& split,
                  const data::Vocab& vocab,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
    cfg.validate();
    if (split.train.empty()) {
        throw std::invalid_argument("train split has no categories");
    }

    // Episodes are drawn once up front; training then only re-reads them.
    std::vector<Episode> train_eps;
    std::vector<const std::vector<ProductRecord>*> train_pools;
    {
        uint64_t idx = 0;
        for (const auto& [cat, pool] : split.train) {
            train_eps.push_back(data::sample_episode(pool, cat, cfg.n_support, cfg.n_query,
                                                     mix_seed(cfg.seed, rngtag::kEpisode, idx)));
            train_pools.push_back(&pool);
            ++idx;
        }
    }
    std::vector<Episode> val_eps;
    {
        uint64_t idx = 0;
        for (const auto& [cat, pool] : split.val) {
            val_eps.push_back(data::sample_episode(pool, cat, cfg.n_support, cfg.n_query,
                                                   mix_seed(cfg.seed, rngtag::kValEpisode, idx)));
            ++idx;
        }
    }

    TrainResult out;
    out.final_params = enc::init_params(cfg.encoder, vocab.size(), cfg.seed);
    out.best_params = out.final_params;
    if (cfg.epochs == 0) {
        return out;
    }

    const int64_t n_cats = static_cast<int64_t>(train_eps.size());
    diff::AdamState opt;
    double best = -1.0;  // any real PR-AUC wins, so epoch 0 seeds the best checkpoint
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng batch_rng(mix_seed(cfg.seed, rngtag::kBatch, static_cast<uint64_t>(epoch), 0));
        std::vector<int64_t> chosen;
        if (n_cats >= cfg.meta_batch) {
            chosen = batch_rng.sample_without_replacement(n_cats, cfg.meta_batch);
        } else {
            for (int64_t i = 0; i < cfg.meta_batch; ++i) {
                chosen.push_back(batch_rng.uniform_int(n_cats));
            }
        }
        std::vector<Episode> batch;
        batch.reserve(chosen.size());
        for (int64_t ci : chosen) {
            if (cfg.resample_support) {
                batch.push_back(resample_support(
                    train_eps[static_cast<size_t>(ci)], *train_pools[static_cast<size_t>(ci)],
                    cfg.n_support,
                    mix_seed(cfg.seed, rngtag::kSupport, static_cast<uint64_t>(epoch),
                             static_cast<uint64_t>(ci))));
            } else {
                batch.push_back(train_eps[static_cast<size_t>(ci)]);
            }
        }
        MetaStepResult step =
            meta_step(out.final_params, batch, cfg, vocab, opt,
                      mix_seed(cfg.seed, rngtag::kBatch, static_cast<uint64_t>(epoch), 1));
        out.final_params = std::move(step.params);
        opt = std::move(step.opt);

        metrics::ScoredSet pooled;
        for (const Episode& ve : val_eps) {
            std::vector<double> scores =
                predict(out.final_params, ve.support, ve.query, cfg, vocab);
            for (std::size_t k = 0; k < scores.size(); ++k) {
                pooled.score.push_back(scores[k]);
                pooled.label.push_back(*ve.query[k].label);
            }
        }
        const double val_auc =
            (pooled.size() > 0 && pooled.positives() > 0) ? metrics::pr_auc(pooled) : 0.0;
        const bool is_best = val_auc > best;
        if (is_best) {
            best = val_auc;
            out.best_params = out.final_params;
            out.best_epoch = epoch;
            out.best_val_pr_auc = val_auc;
        }
        out.history.push_back({epoch, step.batch_loss, val_auc, is_best});
        if (on_epoch) on_epoch(out.history.back());
    }
    return out;
}

std::vector<double> predict(const ParamSet& params, const std::vector<ProductRecord>& support,
                            const std::vector<ProductRecord>& query, const MetaConfig& cfg,
                            const data::Vocab& vocab) {
    cfg.validate();
    if (query.empty()) {
        return {};
    }
    // Deterministic adaptation: z = mu and dropout off, so the rng seed is
    // never consumed.
    AdaptedModel adapted = adapt(params, support, cfg, vocab, /*training=*/false,
                                 /*rng_seed=*/0, "", "");
    PairBatch qry = make_pair_batch(vocab, cfg.encoder, query);
    Graph g;
    NodeMap h = make_leaves(g, adapted.params);
    Posterior post = posterior_g(g, h, cfg, qry, /*deterministic=*/true, nullptr,
                                 /*need_sigma=*/false);
    const Tensor& probs = g.val(enc::decode_probs(g, h, post.mu));
    std::vector<double> out;
    out.reserve(query.size());
    for (int64_t k = 0; k < qry.rows; ++k) {
        out.push_back(probs[k * 2 + 1]);
    }
    return out;
}

}  // namespace metabridge::meta
